use probsal_core::dataset::{synth_scene, SynthConfig};
use probsal_core::metrics::mae;
use probsal_core::pipeline::{smoothed, train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(200);
    let noise: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let std: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.01);

    let sc = SynthConfig { count: 10, size: 64, seed: 31, depth_noise_std: noise, ..SynthConfig::default() };
    let train_set: Vec<_> = (0..10).map(|i| synth_scene(&sc, i)).collect();
    let held_sc = SynthConfig { seed: 99, count: 6, ..sc.clone() };
    let held: Vec<_> = (0..6).map(|i| synth_scene(&held_sc, i)).collect();

    let batch: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(6);
    let config = TrainConfig {
        lr,
        epochs: 400,
        max_steps: Some(steps),
        weight_init_std: std,
        batch,
        ..TrainConfig::tiny(17)
    };
    let t0 = Instant::now();
    let out = train(&train_set, &config, None).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    println!("train: {} steps in {train_time:.1}s ({:.0} ms/step)", out.step_losses.len(), 1000.0 * train_time / out.step_losses.len() as f64);
    println!("loss first {:.4} last {:.4}", out.step_losses[0], out.step_losses.last().unwrap());
    for log in out.logs.iter().rev().take(3).collect::<Vec<_>>().into_iter().rev() {
        println!("  epoch {:3}: loss {:.4} cvae {:.4} kl {:.4} depth {:.4} smooth {:.4}", log.epoch, log.loss, log.cvae, log.kl, log.depth, log.smooth);
    }

    let sm = smoothed(&out.step_losses, 20);
    let mut max_rise = f64::NEG_INFINITY;
    let mut rises = 0;
    for w in sm.windows(2) {
        let d = w[1] - w[0];
        if d > 0.0 { rises += 1; }
        if d > max_rise { max_rise = d; }
    }
    println!("smoothed: {} points, {} rises, max rise {:.2e}, total drop {:.4}", sm.len(), rises, max_rise, sm[0] - sm.last().unwrap());

    // diagnostics: what the maps look like on scene 0
    {
        let mut drng = ChaCha8Rng::seed_from_u64(2);
        let f = out.model.infer_features(&train_set[0], &mut drng).unwrap();
        let sd_mean = f.sd.iter().map(|v| v.abs()).sum::<f64>() / f.sd.len() as f64;
        let gray = f.p_logit.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let gmean = gray.iter().sum::<f64>() / gray.len() as f64;
        let gmax = gray.iter().cloned().fold(f64::MIN, f64::max);
        let gmin = gray.iter().cloned().fold(f64::MAX, f64::min);
        let lat = out.model.prior_latent(&train_set[0]).unwrap();
        let sig: Vec<f64> = lat.sigma().iter().map(|v| (v * 100.0).round() / 100.0).collect();
        println!("diag: |sd| {sd_mean:.2e}; gray mean {gmean:.3} min {gmin:.3} max {gmax:.3} (binarizes iff max > {:.3}); sigma {sig:?}", 2.0 * gmean);
    }

    // criterion 6: consensus MAE over training scenes, C=10
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mae_cons = 0.0;
    let mut mae_single = 0.0;
    for s in &train_set {
        let set = out.model.sample_predictions(s, 10, &mut rng).unwrap();
        mae_cons += mae(&set.consensus_gray, s.gt());
        let per: f64 = set.gray.iter().map(|g| mae(g, s.gt())).sum::<f64>() / 10.0;
        mae_single += per;
    }
    mae_cons /= 10.0; mae_single /= 10.0;
    println!("criterion6: consensus MAE {mae_cons:.4} (need < 0.10)");
    println!("criterion9: consensus {mae_cons:.4} <= single {mae_single:.4} ? {}", mae_cons <= mae_single);

    // criterion 8: depth on held-out
    let mut m_ref = 0.0; let mut m_raw = 0.0;
    for s in &held {
        let clean = s.clean_depth.as_ref().unwrap();
        let dp = out.model.refined_depth(s).unwrap();
        m_ref += mae(&dp, clean);
        m_raw += mae(&s.depth, clean);
    }
    m_ref /= held.len() as f64; m_raw /= held.len() as f64;
    println!("criterion8: MAE(D',clean) {m_ref:.4} vs MAE(noisy,clean) {m_raw:.4} -> {}", m_ref < m_raw);
}
