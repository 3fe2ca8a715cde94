//! Property-based invariants of the distance, triplet, and attack
//! primitives.

use advmetric::losses::{angular_distance, triplet_loss};
use advmetric::tensor::{Tape, Tensor};
use proptest::prelude::*;

const EPS_DIV: f32 = 1e-8;

fn dist(u: &[f32], v: &[f32]) -> f32 {
    let tape = Tape::new();
    let d = u.len();
    let ut = Tensor::from_vec(u.to_vec(), &[1, d]).unwrap();
    let vt = Tensor::from_vec(v.to_vec(), &[1, d]).unwrap();
    angular_distance(&tape, &ut, &vt, EPS_DIV).unwrap().item()
}

fn paired() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (2usize..16).prop_flat_map(|d| {
        (
            prop::collection::vec(-10.0f32..10.0, d),
            prop::collection::vec(-10.0f32..10.0, d),
        )
    })
}

proptest! {
    #[test]
    fn angular_distance_in_unit_interval((v, w) in paired()) {
        let d = dist(&v, &w);
        prop_assert!((0.0..=1.0 + 1e-6).contains(&d), "D = {d}");
    }

    #[test]
    fn angular_distance_is_symmetric((v, w) in paired()) {
        prop_assert!((dist(&v, &w) - dist(&w, &v)).abs() < 1e-6);
    }

    #[test]
    fn angular_distance_scale_invariant((v, w) in paired()) {
        // skip near-zero vectors where eps_div dominates the denominator
        let norm = |x: &[f32]| x.iter().map(|a| a * a).sum::<f32>().sqrt();
        prop_assume!(norm(&v) > 0.1 && norm(&w) > 0.1);
        let base = dist(&v, &w);
        for c in [0.1f32, 10.0] {
            let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
            prop_assert!(
                (dist(&scaled, &w) - base).abs() < 1e-4,
                "scale {c}: {} vs {base}",
                dist(&scaled, &w)
            );
        }
    }

    #[test]
    fn triplet_bounded_by_margin(
        (a, p) in paired(),
        margin in 0.0f32..1.0,
    ) {
        let n: Vec<f32> = a.iter().rev().cloned().collect();
        let tape = Tape::new();
        let d = a.len();
        let at = Tensor::from_vec(a, &[1, d]).unwrap();
        let pt = Tensor::from_vec(p, &[1, d]).unwrap();
        let nt = Tensor::from_vec(n, &[1, d]).unwrap();
        let t = triplet_loss(&tape, &at, &pt, &nt, margin, EPS_DIV)
            .unwrap()
            .item();
        prop_assert!((0.0..=1.0 + margin + 1e-5).contains(&t), "t = {t}");
    }
}
