//! Quick smoke run: train a baseline model on a small synthetic split and
//! print the loss trace plus final train/test accuracy.

use advmetric::dataset::{synth, SplitTag};
use advmetric::eval::predict_flat;
use advmetric::trainer::{train, ConfigKind, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let lr: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let train_ds = synth::generate(n, 11, SplitTag::Train).unwrap();
    let test_ds = synth::generate(n / 4, 12, SplitTag::Test).unwrap();
    let cfg = TrainConfig {
        kind: ConfigKind::Baseline,
        epochs,
        batch_size: 128,
        learning_rate: lr,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let out = train(&cfg, 0, &train_ds, None).unwrap();
    println!("trained in {:.1}s", t0.elapsed().as_secs_f32());
    for e in out.log.iter().step_by(8) {
        println!("{}", e.to_line());
    }
    let preds = predict_flat(&out.model, test_ds.images_flat(), test_ds.len()).unwrap();
    let hits = preds
        .iter()
        .zip(test_ds.labels())
        .filter(|(&p, &y)| p == y as usize)
        .count();
    println!("test acc {:.2}%", 100.0 * hits as f32 / test_ds.len() as f32);
}
