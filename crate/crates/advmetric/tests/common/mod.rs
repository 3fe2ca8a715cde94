//! Shared test support: a 64-bit naive reference implementation of every
//! differentiable primitive, and a central finite-difference gradient
//! checker built on it. The reference path shares no code with the tape.

#![allow(dead_code)]

use advmetric::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

// ---------------------------------------------------------------------------
// Naive f64 reference ops
// ---------------------------------------------------------------------------

pub fn matmul_ref(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Valid stride-1 convolution, direct 7-loop form.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    in_c: usize,
    h: usize,
    wd: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let mut out = vec![0.0; batch * out_c * oh * ow];
    for b in 0..batch {
        for oc in 0..out_c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut s = bias[oc];
                    for ic in 0..in_c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let xv = x[((b * in_c + ic) * h + oi + ki) * wd + oj + kj];
                                let wv = w[((oc * in_c + ic) * kh + ki) * kw + kj];
                                s += xv * wv;
                            }
                        }
                    }
                    out[((b * out_c + oc) * oh + oi) * ow + oj] = s;
                }
            }
        }
    }
    out
}

pub fn maxpool2d_ref(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        best = best.max(x[p * h * w + (2 * oi + di) * w + 2 * oj + dj]);
                    }
                }
                out[p * oh * ow + oi * ow + oj] = best;
            }
        }
    }
    out
}

pub fn softmax_ce_ref(logits: &[f64], labels: &[usize], classes: usize) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = &logits[r * classes..(r + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            z.ln() + m - row[y]
        })
        .collect()
}

pub fn l2norm_ref(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rowwise_dot_ref(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| a[r * cols + c] * b[r * cols + c]).sum())
        .collect()
}

pub fn rowwise_norm_ref(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| l2norm_ref(&a[r * cols..(r + 1) * cols]))
        .collect()
}

pub fn mean_ref(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

pub const FD_H: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;

/// Checks analytic tape gradients for every input against central finite
/// differences of an independent f64 reference loss.
///
/// `build` receives one attached leaf per input and must return a scalar
/// loss; `reference` computes the same loss from f64 copies of the inputs.
pub fn check_grads(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f32>)],
    build: impl Fn(&Tape, &[Tensor]) -> Tensor,
    reference: impl Fn(&[Vec<f64>]) -> f64,
) {
    check_grads_tol(name, inputs, build, reference, FD_REL_TOL)
}

/// Same as [`check_grads`] with an explicit relative tolerance (full-model
/// composites accumulate more f32 rounding than single primitives).
pub fn check_grads_tol(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f32>)],
    build: impl Fn(&Tape, &[Tensor]) -> Tensor,
    reference: impl Fn(&[Vec<f64>]) -> f64,
    tol: f64,
) {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(&Tensor::from_vec(data.clone(), shape).unwrap()))
        .collect();
    let loss = build(&tape, &leaves);
    assert_eq!(loss.numel(), 1, "{name}: loss must be scalar");
    tape.backward(&loss).unwrap();

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(_, d)| d.iter().map(|&v| v as f64).collect())
        .collect();

    // reference loss should agree with the f32 forward value
    let ref_val = reference(&base);
    let fwd = loss.item() as f64;
    assert!(
        (fwd - ref_val).abs() <= 1e-3 * ref_val.abs().max(1.0),
        "{name}: forward mismatch, tape {fwd} vs reference {ref_val}"
    );

    for (idx, (_, data)) in inputs.iter().enumerate() {
        let grad = tape
            .grad(&leaves[idx])
            .unwrap_or_else(|| panic!("{name}: no grad for input {idx}"));
        for coord in 0..data.len() {
            let mut pert = base.clone();
            pert[idx][coord] += FD_H;
            let plus = reference(&pert);
            pert[idx][coord] -= 2.0 * FD_H;
            let minus = reference(&pert);
            let fd = (plus - minus) / (2.0 * FD_H);
            // one-sided differences disagreeing flags a kink (relu/abs/max)
            // inside the fd window; central differences are meaningless there
            let fd_plus = (plus - ref_val) / FD_H;
            let fd_minus = (ref_val - minus) / FD_H;
            let kink = (fd_plus - fd_minus).abs()
                > 0.05 * fd_plus.abs().max(fd_minus.abs()).max(1e-3);
            if kink {
                continue;
            }
            let a = grad[coord] as f64;
            let denom = a.abs().max(fd.abs()).max(1e-4);
            let rel = (a - fd).abs() / denom;
            assert!(
                rel < tol,
                "{name}: input {idx} coord {coord}: analytic {a} vs fd {fd} (rel {rel:.2e})"
            );
        }
    }
}
