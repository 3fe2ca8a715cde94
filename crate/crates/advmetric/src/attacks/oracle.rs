//! Ground-truth labeling oracle: k-nearest-neighbor vote over clean
//! training pixels, abstaining when the winning vote fraction is low.

use crate::dataset::{LabeledDataset, IMAGE_PIXELS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::gemm_nt;

/// Oracle verdict: a confident label or abstention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Label(u8),
    Abstain,
}

impl Verdict {
    pub fn label(self) -> Option<u8> {
        match self {
            Verdict::Label(y) => Some(y),
            Verdict::Abstain => None,
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Label(y) => write!(f, "{y}"),
            Verdict::Abstain => write!(f, "abstain"),
        }
    }
}

/// Deterministic k-NN oracle over a reference dataset.
pub struct Oracle<'a> {
    reference: &'a LabeledDataset,
    k: usize,
    tau: f32,
    ref_sq_norms: Vec<f32>,
}

impl<'a> Oracle<'a> {
    pub fn new(reference: &'a LabeledDataset, k: usize, tau: f32) -> Result<Oracle<'a>> {
        if reference.is_empty() {
            return Err(Error::Data("oracle reference set is empty".into()));
        }
        if k == 0 || k > reference.len() {
            return Err(Error::Config(format!("oracle k {k} out of range")));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("oracle tau {tau} out of range")));
        }
        let ref_sq_norms = (0..reference.len())
            .map(|i| reference.image(i).iter().map(|&p| p * p).sum())
            .collect();
        Ok(Oracle {
            reference,
            k,
            tau,
            ref_sq_norms,
        })
    }

    pub fn verdict(&self, query: &[f32]) -> Verdict {
        self.verdicts(query, 1).pop().unwrap()
    }

    /// Verdicts for `n` queries packed row-major (n x 784). Distances are
    /// computed blockwise with a matrix product; ties in distance break by
    /// reference index, ties in vote count by lower class label.
    pub fn verdicts(&self, queries: &[f32], n: usize) -> Vec<Verdict> {
        assert_eq!(queries.len(), n * IMAGE_PIXELS);
        let refs = self.reference.len();
        let mut out = Vec::with_capacity(n);
        const BLOCK: usize = 256;
        let mut dots = vec![0.0f32; BLOCK * refs];
        for block_start in (0..n).step_by(BLOCK) {
            let b = BLOCK.min(n - block_start);
            dots[..b * refs].iter_mut().for_each(|v| *v = 0.0);
            gemm_nt(
                b,
                IMAGE_PIXELS,
                refs,
                &queries[block_start * IMAGE_PIXELS..(block_start + b) * IMAGE_PIXELS],
                self.reference.images_flat(),
                &mut dots[..b * refs],
            );
            for q in 0..b {
                let qrow = &queries
                    [(block_start + q) * IMAGE_PIXELS..(block_start + q + 1) * IMAGE_PIXELS];
                let q_sq: f32 = qrow.iter().map(|&p| p * p).sum();
                let row = &dots[q * refs..(q + 1) * refs];
                let mut scored: Vec<(f32, usize)> = (0..refs)
                    .map(|i| (q_sq + self.ref_sq_norms[i] - 2.0 * row[i], i))
                    .collect();
                let k = self.k;
                scored.select_nth_unstable_by(k - 1, |a, b| {
                    a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
                });
                let mut votes = [0usize; NUM_CLASSES];
                for &(_, idx) in &scored[..k] {
                    votes[self.reference.label(idx) as usize] += 1;
                }
                let (winner, count) = votes
                    .iter()
                    .enumerate()
                    .max_by_key(|&(c, &n)| (n, NUM_CLASSES - c))
                    .map(|(c, &n)| (c, n))
                    .unwrap();
                let fraction = count as f32 / k as f32;
                out.push(if fraction >= self.tau {
                    Verdict::Label(winner as u8)
                } else {
                    Verdict::Abstain
                });
            }
        }
        out
    }

    /// Fraction of a labeled set the oracle classifies correctly
    /// (abstentions count as errors).
    pub fn accuracy_on(&self, ds: &LabeledDataset) -> f32 {
        let verdicts = self.verdicts(ds.images_flat(), ds.len());
        let hits = verdicts
            .iter()
            .zip(ds.labels())
            .filter(|(v, &y)| v.label() == Some(y))
            .count();
        hits as f32 / ds.len() as f32
    }
}
