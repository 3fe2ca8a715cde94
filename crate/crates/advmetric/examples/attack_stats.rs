//! Admission-rate and oracle-quality statistics for the attack pipeline
//! at various budgets.

use advmetric::attacks::{build_invariance_set, AttackConfig, Oracle};
use advmetric::dataset::{synth, SplitTag};

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(4000);
    let train = synth::generate(n, 0, SplitTag::Train).unwrap();
    let test = synth::generate(n / 4, 1, SplitTag::Test).unwrap();
    let oracle = Oracle::new(&train, 5, 0.8).unwrap();
    println!("oracle clean-test accuracy: {:.2}%", 100.0 * oracle.accuracy_on(&test));
    for eps in [0.3f32, 0.4, 0.5, 0.6] {
        let t0 = std::time::Instant::now();
        let set = build_invariance_set(&test, &train, &AttackConfig::invariance(eps)).unwrap();
        println!(
            "eps {eps}: admitted {}/{} ({:.1}%) in {:.1}s",
            set.admitted_count(),
            set.len(),
            100.0 * set.admitted_count() as f32 / set.len() as f32,
            t0.elapsed().as_secs_f32()
        );
    }
}
