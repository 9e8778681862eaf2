// probe: spec-level marginal check (1e5 steps), K=4 and K=6, 30 seeds each
use icitris_core::rng::Rng;
use icitris_core::scm::*;

fn main() {
    for k in [4usize, 6] {
        let mut bad = 0;
        for seed in 1..=30u64 {
            let mut rng = Rng::new(seed, 0);
            let scm = GroundTruthScm::<f64>::build(GraphKind::Random, k, 0.25, InterventionPolicy { fp_noise: 0.0 }, &mut rng);
            let mut scm = match scm { Ok(s) => s, Err(e) => { println!("k={k} seed {seed}: build failed: {e}"); bad += 1; continue } };
            let mut r = Rng::new(seed, 99);
            let rows = rollout_sources(&mut scm, k, 100_000, &mut r).unwrap();
            let n = rows.rows();
            let mut ok = true;
            for c in 0..k {
                let mean: f64 = (0..n).map(|t| rows.data[t*k+c]).sum::<f64>() / n as f64;
                let var: f64 = (0..n).map(|t| (rows.data[t*k+c]-mean).powi(2)).sum::<f64>() / n as f64;
                let std = var.sqrt();
                if mean.abs() > 0.1 || !(0.7..=1.5).contains(&std) { ok = false; println!("k={k} seed {seed} var {c}: mean {mean:.3} std {std:.3}"); }
            }
            if !ok { bad += 1; }
        }
        println!("K={k}: {bad}/30 seeds out of band");
    }
}
