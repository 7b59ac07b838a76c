fn main() {
    std::process::exit(ride::cli::run(std::env::args_os()));
}
