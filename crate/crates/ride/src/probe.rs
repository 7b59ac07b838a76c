#[cfg(test)]
mod timing {
    use crate::matcheval::rotation_sweep;
    use crate::model::RideConfig;
    use crate::selfsup::synth_corpus;
    use crate::trainer::{train, TrainConfig};
    use std::time::Instant;

    #[test]
    #[ignore]
    fn full_desk_rehearsal() {
        let corpus = synth_corpus(1, 64, 182);
        let config = TrainConfig::desk();
        let dir = std::path::PathBuf::from("/tmp/ride-desk-run");
        let t0 = Instant::now();
        let outcome = train::<f32>(&corpus, &RideConfig::desk(), &config, Some(&dir)).unwrap();
        let early: f64 = outcome.log[..100].iter().map(|r| r.total).sum::<f64>() / 100.0;
        let n = outcome.log.len();
        let late: f64 = outcome.log[n - 100..].iter().map(|r| r.total).sum::<f64>() / 100.0;
        println!("early mean {early:.3} late mean {late:.3} ratio {:.3}", late / early);
        println!("best iter {:?} val {:?}", outcome.best_iteration, outcome.best_val_mma);
        println!(
            "train {:.2}h skipped {}",
            t0.elapsed().as_secs_f64() / 3600.0,
            outcome.skipped_pairs.len()
        );

        let eval: Vec<(String, crate::selfsup::GrayImage)> = synth_corpus(99, 10, 182)
            .into_iter()
            .enumerate()
            .map(|(i, im)| (format!("tex{i:02}"), im))
            .collect();
        let t1 = Instant::now();
        let rows = rotation_sweep(&outcome.model, &eval, 512).unwrap();
        println!("sweep {:.1}s", t1.elapsed().as_secs_f64());
        for angle_i in 0..36 {
            let angle = 10.0 * angle_i as f64;
            let at: Vec<f64> = rows
                .iter()
                .filter(|r| r.angle_degrees == angle)
                .map(|r| r.mma3)
                .collect();
            let mean: f64 = at.iter().sum::<f64>() / at.len() as f64;
            let min = at.iter().cloned().fold(f64::INFINITY, f64::min);
            println!("angle {angle:5.0} mean mma3 {mean:.3} min {min:.3}");
        }
    }
}
