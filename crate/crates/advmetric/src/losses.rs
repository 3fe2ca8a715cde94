//! Angular distance, triplet hinges, cross-entropy, the embedding-norm
//! penalty, and the combined training objective.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Coefficients of the combined objective plus the triplet margin and the
/// division stabilizer for the angular distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
    pub margin: f32,
    pub eps_div: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.001,
            margin: 0.2,
            eps_div: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 || self.margin < 0.0 {
            return Err(Error::Config(
                "loss coefficients and margin must be non-negative".into(),
            ));
        }
        if self.eps_div <= 0.0 {
            return Err(Error::Config("eps_div must be positive".into()));
        }
        Ok(())
    }
}

/// Component values of one combined-loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub l_ce: f32,
    pub l_t_sa: f32,
    pub l_t_ia: f32,
    pub l_norm: f32,
    pub l_all: f32,
}

/// Per-row angular distance between two B x d embedding batches:
/// D = 1 - |u.v| / (|u| |v| + eps). Lies in [0, 1]; antipodal directions
/// have distance 0 because of the absolute value.
pub fn angular_distance(tape: &Tape, u: &Tensor, v: &Tensor, eps_div: f32) -> Result<Tensor> {
    let num = tape.abs(&tape.rowwise_dot(u, v)?);
    let denom = tape.add_scalar(
        &tape.mul(&tape.rowwise_norm(u)?, &tape.rowwise_norm(v)?)?,
        eps_div,
    );
    let cos = tape.div(&num, &denom)?;
    Ok(tape.add_scalar(&tape.scale(&cos, -1.0), 1.0))
}

/// Per-row triplet hinge max(D(a,p) - D(a,n) + m, 0) under the angular
/// distance.
pub fn triplet_loss(
    tape: &Tape,
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f32,
    eps_div: f32,
) -> Result<Tensor> {
    let d_ap = angular_distance(tape, anchor, positive, eps_div)?;
    let d_an = angular_distance(tape, anchor, negative, eps_div)?;
    Ok(tape.relu(&tape.add_scalar(&tape.sub(&d_ap, &d_an)?, margin)))
}

/// Mean cross-entropy over a batch of logits.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(tape.mean(&tape.softmax_ce(logits, labels)?))
}

/// Batch mean of |h(x_a)| + |h(x_p')| + |h(x_p'')| + |h(x_n)|.
pub fn norm_penalty(
    tape: &Tape,
    h_a: &Tensor,
    h_p_sa: &Tensor,
    h_p_ia: &Tensor,
    h_n: &Tensor,
) -> Result<Tensor> {
    let mut acc = tape.mean(&tape.rowwise_norm(h_a)?);
    for h in [h_p_sa, h_p_ia, h_n] {
        acc = tape.add(&acc, &tape.mean(&tape.rowwise_norm(h)?))?;
    }
    Ok(acc)
}

/// Model outputs feeding the combined objective; all four streams are
/// aligned by batch index.
pub struct CombinedInputs<'a> {
    pub logits_anchor: &'a Tensor,
    /// When present, the cross-entropy term becomes the 50/50 mixture of
    /// clean and sensitivity-perturbed samples (adversarial-training CE);
    /// when absent it covers anchors only.
    pub logits_sensitivity: Option<&'a Tensor>,
    pub emb_anchor: &'a Tensor,
    pub emb_sensitivity: &'a Tensor,
    pub emb_invariance: &'a Tensor,
    /// Rows whose invariance positive was admitted; others contribute no
    /// invariance-triplet term.
    pub invariance_mask: &'a [bool],
    pub emb_negative: &'a Tensor,
    pub labels: &'a [usize],
}

/// The combined objective: cross-entropy on anchors plus the two angular
/// triplet regularizers and the norm penalty, each term a batch mean.
/// Zero coefficients disable their terms exactly.
pub fn combined_loss(
    tape: &Tape,
    inputs: &CombinedInputs,
    cfg: &LossConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let batch = inputs.labels.len();
    for (name, t) in [
        ("anchor embeddings", inputs.emb_anchor),
        ("sensitivity embeddings", inputs.emb_sensitivity),
        ("invariance embeddings", inputs.emb_invariance),
        ("negative embeddings", inputs.emb_negative),
    ] {
        if t.shape().first() != Some(&batch) {
            return Err(Error::Shape {
                op: "combined_loss",
                detail: format!("{name} batch {:?} vs {} labels", t.shape(), batch),
            });
        }
    }
    if inputs.invariance_mask.len() != batch {
        return Err(Error::Shape {
            op: "combined_loss",
            detail: format!("mask len {} vs batch {batch}", inputs.invariance_mask.len()),
        });
    }

    let l_ce = match inputs.logits_sensitivity {
        Some(logits_sa) => {
            let clean = cross_entropy(tape, inputs.logits_anchor, inputs.labels)?;
            let adv = cross_entropy(tape, logits_sa, inputs.labels)?;
            tape.scale(&tape.add(&clean, &adv)?, 0.5)
        }
        None => cross_entropy(tape, inputs.logits_anchor, inputs.labels)?,
    };
    let mut total = l_ce.clone();
    let mut bd = LossBreakdown {
        l_ce: l_ce.item(),
        ..Default::default()
    };

    if cfg.lambda1 > 0.0 {
        let t_sa = tape.mean(&triplet_loss(
            tape,
            inputs.emb_anchor,
            inputs.emb_sensitivity,
            inputs.emb_negative,
            cfg.margin,
            cfg.eps_div,
        )?);
        bd.l_t_sa = t_sa.item();
        total = tape.add(&total, &tape.scale(&t_sa, cfg.lambda1))?;
    }
    if cfg.lambda2 > 0.0 {
        let per_row = triplet_loss(
            tape,
            inputs.emb_anchor,
            inputs.emb_invariance,
            inputs.emb_negative,
            cfg.margin,
            cfg.eps_div,
        )?;
        let t_ia = tape.masked_mean(&per_row, inputs.invariance_mask)?;
        bd.l_t_ia = t_ia.item();
        total = tape.add(&total, &tape.scale(&t_ia, cfg.lambda2))?;
    }
    if cfg.lambda3 > 0.0 {
        let norm = norm_penalty(
            tape,
            inputs.emb_anchor,
            inputs.emb_sensitivity,
            inputs.emb_invariance,
            inputs.emb_negative,
        )?;
        bd.l_norm = norm.item();
        total = tape.add(&total, &tape.scale(&norm, cfg.lambda3))?;
    }
    bd.l_all = total.item();
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dist(u: Vec<f32>, v: Vec<f32>) -> f32 {
        let tape = Tape::new();
        let d = u.len();
        let ut = Tensor::from_vec(u, &[1, d]).unwrap();
        let vt = Tensor::from_vec(v, &[1, d]).unwrap();
        angular_distance(&tape, &ut, &vt, 1e-8).unwrap().item()
    }

    #[test]
    fn angular_distance_reference_points() {
        assert_relative_eq!(dist(vec![1.0, 0.0], vec![1.0, 0.0]), 0.0, epsilon = 1e-6);
        assert_relative_eq!(dist(vec![1.0, 0.0], vec![0.0, 1.0]), 1.0, epsilon = 1e-6);
        // absolute value identifies antipodal directions
        assert_relative_eq!(dist(vec![1.0, 0.0], vec![-1.0, 0.0]), 0.0, epsilon = 1e-6);
        assert_relative_eq!(
            dist(vec![1.0, 0.0], vec![1.0, 1.0]),
            1.0 - 1.0 / 2.0f32.sqrt(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn zero_vectors_stay_finite() {
        let d = dist(vec![0.0, 0.0], vec![1.0, 0.0]);
        assert!(d.is_finite() && (0.0..=1.0).contains(&d));
    }

    fn triplet(a: Vec<f32>, p: Vec<f32>, n: Vec<f32>, m: f32) -> f32 {
        let tape = Tape::new();
        let d = a.len();
        let at = Tensor::from_vec(a, &[1, d]).unwrap();
        let pt = Tensor::from_vec(p, &[1, d]).unwrap();
        let nt = Tensor::from_vec(n, &[1, d]).unwrap();
        triplet_loss(&tape, &at, &pt, &nt, m, 1e-8).unwrap().item()
    }

    #[test]
    fn triplet_margin_cases() {
        // cos 0.8 -> D 0.2; cos 0.5 -> D 0.5: margin satisfied
        let v = |c: f32| vec![c, (1.0 - c * c).sqrt()];
        assert_relative_eq!(
            triplet(vec![1.0, 0.0], v(0.8), v(0.5), 0.2),
            0.0,
            epsilon = 1e-6
        );
        // D(a,p) 0.4, D(a,n) 0.3, m 0.2 -> 0.3
        assert_relative_eq!(
            triplet(vec![1.0, 0.0], v(0.6), v(0.7), 0.2),
            0.3,
            epsilon = 1e-6
        );
        // anchor == positive with zero margin
        assert_relative_eq!(
            triplet(vec![0.3, 0.4], vec![0.3, 0.4], v(0.1), 0.0),
            0.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn cross_entropy_reference_points() {
        let tape = Tape::new();
        let uniform = Tensor::from_vec(vec![0.5; 10], &[1, 10]).unwrap();
        assert_relative_eq!(
            cross_entropy(&tape, &uniform, &[3]).unwrap().item(),
            10.0f32.ln(),
            epsilon = 1e-5
        );
        let mut hot = vec![0.0; 10];
        hot[7] = 1000.0;
        let hot = Tensor::from_vec(hot, &[1, 10]).unwrap();
        assert!(cross_entropy(&tape, &hot, &[7]).unwrap().item() < 1e-6);
    }

    #[test]
    fn norm_penalty_cases() {
        let tape = Tape::new();
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(norm_penalty(&tape, &z, &z, &z, &z).unwrap().item(), 0.0);

        let e = Tensor::from_vec(vec![3.0, 4.0], &[1, 2]).unwrap();
        assert_relative_eq!(
            norm_penalty(&tape, &e, &e, &e, &e).unwrap().item(),
            20.0,
            epsilon = 1e-5
        );
        // two identical rows equal the single-row value (mean semantics)
        let e2 = Tensor::from_vec(vec![3.0, 4.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_relative_eq!(
            norm_penalty(&tape, &e2, &e2, &e2, &e2).unwrap().item(),
            20.0,
            epsilon = 1e-5
        );
    }

    #[test]
    fn combined_reduces_to_cross_entropy() {
        let tape = Tape::new();
        let logits = Tensor::from_vec(vec![0.1, -0.4, 0.9, 0.0, 0.2, -0.2], &[2, 3]).unwrap();
        let emb = Tensor::from_vec(vec![0.5, 0.1, 0.2, 0.9], &[2, 2]).unwrap();
        let cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Default::default()
        };
        let labels = [2usize, 0];
        let (total, bd) = combined_loss(
            &tape,
            &CombinedInputs {
                logits_anchor: &logits,
                logits_sensitivity: None,
                emb_anchor: &emb,
                emb_sensitivity: &emb,
                emb_invariance: &emb,
                invariance_mask: &[true, true],
                emb_negative: &emb,
                labels: &labels,
            },
            &cfg,
        )
        .unwrap();
        let ce = cross_entropy(&tape, &logits, &labels).unwrap().item();
        assert_eq!(total.item(), ce);
        assert_eq!(bd.l_t_sa, 0.0);
        assert_eq!(bd.l_t_ia, 0.0);
        assert_eq!(bd.l_norm, 0.0);
    }

    #[test]
    fn identical_streams_zero_margin_kill_triplets() {
        let tape = Tape::new();
        let logits = Tensor::from_vec(vec![0.3, 0.1], &[1, 2]).unwrap();
        let emb = Tensor::from_vec(vec![0.6, 0.8], &[1, 2]).unwrap();
        let cfg = LossConfig {
            margin: 0.0,
            ..Default::default()
        };
        let (_, bd) = combined_loss(
            &tape,
            &CombinedInputs {
                logits_anchor: &logits,
                logits_sensitivity: None,
                emb_anchor: &emb,
                emb_sensitivity: &emb,
                emb_invariance: &emb,
                invariance_mask: &[true],
                emb_negative: &emb,
                labels: &[0],
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(bd.l_t_sa, 0.0);
        assert_eq!(bd.l_t_ia, 0.0);
    }

    #[test]
    fn misaligned_batches_error() {
        let tape = Tape::new();
        let logits = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
        let emb1 = Tensor::zeros(&[1, 2]);
        let emb2 = Tensor::zeros(&[2, 2]);
        let res = combined_loss(
            &tape,
            &CombinedInputs {
                logits_anchor: &logits,
                logits_sensitivity: None,
                emb_anchor: &emb1,
                emb_sensitivity: &emb2,
                emb_invariance: &emb1,
                invariance_mask: &[true],
                emb_negative: &emb1,
                labels: &[0],
            },
            &LossConfig::default(),
        );
        assert!(res.is_err());
    }
}
