//! Attack generation: epsilon-bounded sensitivity examples via FGSM and
//! invariance examples via nearest-different-class projection, with the
//! labeling oracle deciding admission of the latter.

pub mod oracle;

pub use oracle::{Oracle, Verdict};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::{LabeledDataset, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::ClassifierModel;
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_SENSITIVITY_EPS: f32 = 0.1;
pub const DEFAULT_INVARIANCE_EPS: f32 = 0.4;
pub const DEFAULT_ORACLE_K: usize = 5;
pub const DEFAULT_ORACLE_TAU: f32 = 0.8;

/// Pixel shift range tried when aligning a projection target.
const SHIFT_RANGE: i32 = 2;
/// Candidates kept from the coarse nearest-neighbor prefilter before
/// exact shift-aligned refinement.
const REFINE_CANDIDATES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Sensitivity,
    Invariance,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackKind::Sensitivity => write!(f, "sensitivity"),
            AttackKind::Invariance => write!(f, "invariance"),
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<AttackKind> {
        match s {
            "sensitivity" => Ok(AttackKind::Sensitivity),
            "invariance" => Ok(AttackKind::Invariance),
            other => Err(Error::Config(format!("unknown attack kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity radius in pixel units, in (0, 1].
    pub epsilon: f32,
    pub oracle_k: usize,
    pub oracle_tau: f32,
}

impl AttackConfig {
    pub fn sensitivity(epsilon: f32) -> AttackConfig {
        AttackConfig {
            kind: AttackKind::Sensitivity,
            epsilon,
            oracle_k: DEFAULT_ORACLE_K,
            oracle_tau: DEFAULT_ORACLE_TAU,
        }
    }

    pub fn invariance(epsilon: f32) -> AttackConfig {
        AttackConfig {
            kind: AttackKind::Invariance,
            epsilon,
            oracle_k: DEFAULT_ORACLE_K,
            oracle_tau: DEFAULT_ORACLE_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!(
                "attack epsilon must be in (0, 1], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Provenance of one perturbed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub source_index: usize,
    pub original_label: u8,
    pub verdict: Verdict,
    pub kind: AttackKind,
    pub epsilon: f32,
    pub checkpoint_hash: String,
}

impl AttackRecord {
    /// An invariance sample counts only when the oracle confidently
    /// assigns a label different from the original.
    pub fn admitted(&self) -> bool {
        match self.kind {
            AttackKind::Sensitivity => true,
            AttackKind::Invariance => matches!(
                self.verdict,
                Verdict::Label(v) if v != self.original_label
            ),
        }
    }
}

/// Perturbed dataset with per-sample provenance, one record per source
/// sample.
#[derive(Debug, Clone)]
pub struct AttackSet {
    images: Vec<f32>,
    records: Vec<AttackRecord>,
}

impl AttackSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn images_flat(&self) -> &[f32] {
        &self.images
    }

    pub fn records(&self) -> &[AttackRecord] {
        &self.records
    }

    pub fn admitted_count(&self) -> usize {
        self.records.iter().filter(|r| r.admitted()).count()
    }

    /// Map from source index to attack-set position, admitted records only.
    pub fn admitted_by_source(&self) -> std::collections::HashMap<usize, usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.admitted())
            .map(|(i, r)| (r.source_index, i))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Gradients w.r.t. the input and FGSM
// ---------------------------------------------------------------------------

/// Gradient of the mean cross-entropy w.r.t. the input batch. Model
/// parameters stay detached and untouched.
pub fn grad_wrt_input(model: &ClassifierModel, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let tape = Tape::new();
    let x_leaf = tape.leaf(x);
    let pass = model.forward(&tape, &x_leaf)?;
    let loss = losses::cross_entropy(&tape, &pass.logits, labels)?;
    tape.backward(&loss)?;
    let grad = tape
        .grad(&x_leaf)
        .ok_or_else(|| Error::Autodiff("input gradient missing".into()))?;
    Tensor::from_vec(grad, x.shape())
}

/// Fast gradient sign method: x* = clip(x + eps * sign(grad_x CE), 0, 1).
pub fn fgsm(model: &ClassifierModel, x: &Tensor, labels: &[usize], epsilon: f32) -> Result<Tensor> {
    let grad = grad_wrt_input(model, x, labels)?;
    let step = grad.sign();
    let data: Vec<f32> = x
        .data()
        .iter()
        .zip(step.data())
        .map(|(&p, &s)| (p + epsilon * s).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(data, x.shape())
}

// ---------------------------------------------------------------------------
// Invariance attack
// ---------------------------------------------------------------------------

/// Nearest-different-class search support: 7x7 average-pooled thumbnails
/// prefilter candidates, exact shift-aligned L2 refines them.
pub struct InvarianceIndex<'a> {
    trainset: &'a LabeledDataset,
    coarse: Vec<f32>,
}

const COARSE_SIDE: usize = 7;
const COARSE_PIXELS: usize = COARSE_SIDE * COARSE_SIDE;

fn coarse_thumbnail(img: &[f32]) -> [f32; COARSE_PIXELS] {
    let mut out = [0.0f32; COARSE_PIXELS];
    let factor = IMAGE_SIDE / COARSE_SIDE;
    for cy in 0..COARSE_SIDE {
        for cx in 0..COARSE_SIDE {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += img[(cy * factor + dy) * IMAGE_SIDE + cx * factor + dx];
                }
            }
            out[cy * COARSE_SIDE + cx] = s / (factor * factor) as f32;
        }
    }
    out
}

/// L2 distance between `img` and `target` shifted by (dx, dy) with zero
/// fill outside the frame.
fn shifted_distance_sq(img: &[f32], target: &[f32], dx: i32, dy: i32) -> f32 {
    let side = IMAGE_SIDE as i32;
    let mut s = 0.0f32;
    for y in 0..side {
        for x in 0..side {
            let (sx, sy) = (x - dx, y - dy);
            let t = if (0..side).contains(&sx) && (0..side).contains(&sy) {
                target[(sy * side + sx) as usize]
            } else {
                0.0
            };
            let d = img[(y * side + x) as usize] - t;
            s += d * d;
        }
    }
    s
}

fn shifted_image(target: &[f32], dx: i32, dy: i32) -> Vec<f32> {
    let side = IMAGE_SIDE as i32;
    let mut out = vec![0.0f32; IMAGE_PIXELS];
    for y in 0..side {
        for x in 0..side {
            let (sx, sy) = (x - dx, y - dy);
            if (0..side).contains(&sx) && (0..side).contains(&sy) {
                out[(y * side + x) as usize] = target[(sy * side + sx) as usize];
            }
        }
    }
    out
}

impl<'a> InvarianceIndex<'a> {
    pub fn new(trainset: &'a LabeledDataset) -> InvarianceIndex<'a> {
        let mut coarse = Vec::with_capacity(trainset.len() * COARSE_PIXELS);
        for i in 0..trainset.len() {
            coarse.extend_from_slice(&coarse_thumbnail(trainset.image(i)));
        }
        InvarianceIndex { trainset, coarse }
    }

    /// Nearest training image of a different class, shift-aligned.
    fn nearest_target(&self, img: &[f32], label: u8) -> Result<(Vec<f32>, usize)> {
        let q = coarse_thumbnail(img);
        let mut scored: Vec<(f32, usize)> = (0..self.trainset.len())
            .filter(|&i| self.trainset.label(i) != label)
            .map(|i| {
                let c = &self.coarse[i * COARSE_PIXELS..(i + 1) * COARSE_PIXELS];
                let d: f32 = q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        if scored.is_empty() {
            return Err(Error::Data(
                "invariance attack needs a sample from a different class".into(),
            ));
        }
        let take = REFINE_CANDIDATES.min(scored.len());
        scored.select_nth_unstable_by(take - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        let mut best: Option<(f32, usize, i32, i32)> = None;
        let mut candidates: Vec<(f32, usize)> = scored[..take].to_vec();
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, idx) in &candidates {
            let target = self.trainset.image(idx);
            for dy in -SHIFT_RANGE..=SHIFT_RANGE {
                for dx in -SHIFT_RANGE..=SHIFT_RANGE {
                    let d = shifted_distance_sq(img, target, dx, dy);
                    let better = match best {
                        None => true,
                        Some((bd, bi, _, _)) => d < bd || (d == bd && idx < bi),
                    };
                    if better {
                        best = Some((d, idx, dx, dy));
                    }
                }
            }
        }
        let (_, idx, dx, dy) = best.unwrap();
        Ok((shifted_image(self.trainset.image(idx), dx, dy), idx))
    }
}

/// Project `img` toward its nearest different-class training image within
/// the epsilon box and ask the oracle for the resulting label.
pub fn invariance_attack(
    index: &InvarianceIndex,
    oracle: &Oracle,
    img: &[f32],
    label: u8,
    epsilon: f32,
) -> Result<(Vec<f32>, Verdict)> {
    let (target, _) = index.nearest_target(img, label)?;
    let perturbed: Vec<f32> = img
        .iter()
        .zip(&target)
        .map(|(&x, &t)| (x + (t - x).clamp(-epsilon, epsilon)).clamp(0.0, 1.0))
        .collect();
    let verdict = oracle.verdict(&perturbed);
    Ok((perturbed, verdict))
}

// ---------------------------------------------------------------------------
// Attack-set construction
// ---------------------------------------------------------------------------

/// One FGSM record per sample of `dataset`, generated against a frozen
/// model; the oracle labels every perturbed sample.
pub fn build_sensitivity_set(
    model: &ClassifierModel,
    checkpoint_hash: &str,
    dataset: &LabeledDataset,
    oracle: &Oracle,
    cfg: &AttackConfig,
) -> Result<AttackSet> {
    cfg.validate()?;
    let params_before = model.params.value_hash();
    let mut images = Vec::with_capacity(dataset.len() * IMAGE_PIXELS);
    const BATCH: usize = 256;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(BATCH) {
        let (x, labels) = dataset.batch(chunk);
        let adv = fgsm(model, &x, &labels, cfg.epsilon)?;
        images.extend_from_slice(adv.data());
    }
    debug_assert_eq!(model.params.value_hash(), params_before);
    let verdicts = oracle.verdicts(&images, dataset.len());
    let records = (0..dataset.len())
        .map(|i| AttackRecord {
            source_index: i,
            original_label: dataset.label(i),
            verdict: verdicts[i],
            kind: AttackKind::Sensitivity,
            epsilon: cfg.epsilon,
            checkpoint_hash: checkpoint_hash.to_string(),
        })
        .collect();
    Ok(AttackSet { images, records })
}

/// One invariance record per sample of `dataset`; model-independent.
pub fn build_invariance_set(
    dataset: &LabeledDataset,
    trainset: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<AttackSet> {
    cfg.validate()?;
    let oracle = Oracle::new(trainset, cfg.oracle_k, cfg.oracle_tau)?;
    let index = InvarianceIndex::new(trainset);
    let mut images = Vec::with_capacity(dataset.len() * IMAGE_PIXELS);
    for i in 0..dataset.len() {
        let (img, _) = invariance_attack(
            &index,
            &oracle,
            dataset.image(i),
            dataset.label(i),
            cfg.epsilon,
        )
        .map(|(img, v)| (img, v))?;
        images.extend_from_slice(&img);
    }
    // verdicts in one blocked pass
    let verdicts = oracle.verdicts(&images, dataset.len());
    let records = (0..dataset.len())
        .map(|i| AttackRecord {
            source_index: i,
            original_label: dataset.label(i),
            verdict: verdicts[i],
            kind: AttackKind::Invariance,
            epsilon: cfg.epsilon,
            checkpoint_hash: "none".to_string(),
        })
        .collect();
    Ok(AttackSet { images, records })
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.tsv + images.idx (IDX layout, f32 payload)
// ---------------------------------------------------------------------------

const F32_IMAGES_MAGIC: u32 = 0x0000_0D03;

impl AttackSet {
    /// Write the set as a directory: a one-record-per-line manifest and an
    /// IDX-layout image blob with f32 payload (type code 0x0D).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.tsv");
        let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.source_index, r.original_label, r.verdict, r.kind, r.epsilon, r.checkpoint_hash
            )
            .map_err(|e| Error::io(&manifest, e))?;
        }
        drop(w);

        let blob = dir.join("images.idx");
        let file = File::create(&blob).map_err(|e| Error::io(&blob, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(&blob, e));
        emit(&F32_IMAGES_MAGIC.to_be_bytes())?;
        emit(&(self.len() as u32).to_be_bytes())?;
        emit(&(IMAGE_SIDE as u32).to_be_bytes())?;
        emit(&(IMAGE_SIDE as u32).to_be_bytes())?;
        for v in &self.images {
            emit(&v.to_be_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<AttackSet> {
        let dir = dir.as_ref();
        let manifest = dir.join("manifest.tsv");
        let file = File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&manifest, e))?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 6 fields, got {}",
                    manifest.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse_err = |what: &str| {
                Error::Format(format!("{}:{}: bad {what}", manifest.display(), lineno + 1))
            };
            records.push(AttackRecord {
                source_index: fields[0].parse().map_err(|_| parse_err("source index"))?,
                original_label: fields[1].parse().map_err(|_| parse_err("label"))?,
                verdict: match fields[2] {
                    "abstain" => Verdict::Abstain,
                    s => Verdict::Label(s.parse().map_err(|_| parse_err("verdict"))?),
                },
                kind: fields[3].parse()?,
                epsilon: fields[4].parse().map_err(|_| parse_err("epsilon"))?,
                checkpoint_hash: fields[5].to_string(),
            });
        }

        let blob = dir.join("images.idx");
        let file = File::open(&blob).map_err(|e| Error::io(&blob, e))?;
        let mut r = BufReader::new(file);
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|e| Error::io(&blob, e))?;
        let magic = u32::from_be_bytes(head[0..4].try_into().unwrap());
        if magic != F32_IMAGES_MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic number {magic:#010x}",
                blob.display()
            )));
        }
        let n = u32::from_be_bytes(head[4..8].try_into().unwrap()) as usize;
        if n != records.len() {
            return Err(Error::Format(format!(
                "{}: {} images vs {} manifest records",
                blob.display(),
                n,
                records.len()
            )));
        }
        let mut raw = vec![0u8; n * IMAGE_PIXELS * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Format(format!("{}: truncated image blob", blob.display())))?;
        let images = raw
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(AttackSet { images, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth, SplitTag};

    #[test]
    fn fgsm_moves_interior_pixels_by_epsilon() {
        let model = ClassifierModel::init(0);
        let ds = synth::generate(8, 1, SplitTag::Train).unwrap();
        let (x, labels) = ds.batch(&[0, 1, 2, 3]);
        let eps = 0.3;
        let adv = fgsm(&model, &x, &labels, eps).unwrap();
        let grad = grad_wrt_input(&model, &x, &labels).unwrap();
        for ((&orig, &new), &g) in x.data().iter().zip(adv.data()).zip(grad.data()) {
            let delta = new - orig;
            assert!(delta.abs() <= eps + 1e-6);
            assert!((0.0..=1.0).contains(&new));
            // interior pixels move exactly +/- eps or 0
            if orig > eps && orig < 1.0 - eps {
                if g == 0.0 {
                    assert_eq!(delta, 0.0);
                } else {
                    assert!((delta.abs() - eps).abs() < 1e-6, "delta {delta}");
                }
            }
        }
    }

    #[test]
    fn zero_model_gradient_leaves_input_unchanged() {
        // zero all params: logits are constant in x, so grad_x = 0
        let mut model = ClassifierModel::init(0);
        let zeroed = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        model.params = crate::model::ModelParams::from_tensors(zeroed).unwrap();
        let ds = synth::generate(4, 2, SplitTag::Train).unwrap();
        let (x, labels) = ds.batch(&[0, 1]);
        let adv = fgsm(&model, &x, &labels, 0.3).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn fgsm_does_not_touch_model_params() {
        let model = ClassifierModel::init(3);
        let before = model.params.value_hash();
        let ds = synth::generate(8, 4, SplitTag::Train).unwrap();
        let (x, labels) = ds.batch(&[0, 1, 2]);
        fgsm(&model, &x, &labels, 0.1).unwrap();
        assert_eq!(model.params.value_hash(), before);
    }

    #[test]
    fn invariance_full_budget_reaches_target() {
        let train = synth::generate(100, 5, SplitTag::Train).unwrap();
        let oracle = Oracle::new(&train, 1, 1.0).unwrap();
        let index = InvarianceIndex::new(&train);
        let img = train.image(0).to_vec();
        let (adv, verdict) = invariance_attack(&index, &oracle, &img, train.label(0), 1.0).unwrap();
        // with eps = 1 the projection reaches the (shifted) target exactly
        assert_ne!(verdict.label(), Some(train.label(0)));
        assert!(adv.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn invariance_zero_budget_is_rejected() {
        let train = synth::generate(100, 6, SplitTag::Train).unwrap();
        let oracle = Oracle::new(&train, 5, 0.8).unwrap();
        let index = InvarianceIndex::new(&train);
        let img = train.image(3).to_vec();
        // epsilon ~ 0: x* == x, so the verdict cannot flip to another class
        let (adv, verdict) =
            invariance_attack(&index, &oracle, &img, train.label(3), 1e-7).unwrap();
        let clean = oracle.verdict(train.image(3));
        assert_eq!(verdict, clean);
        let rec = AttackRecord {
            source_index: 3,
            original_label: train.label(3),
            verdict,
            kind: AttackKind::Invariance,
            epsilon: 1e-7,
            checkpoint_hash: "none".into(),
        };
        assert!(!rec.admitted());
        assert!(adv
            .iter()
            .zip(train.image(3))
            .all(|(&a, &b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn attack_set_round_trip_and_bounds() {
        let train = synth::generate(120, 7, SplitTag::Train).unwrap();
        let test = synth::generate(20, 8, SplitTag::Test).unwrap();
        let cfg = AttackConfig::invariance(0.4);
        let set = build_invariance_set(&test, &train, &cfg).unwrap();
        assert_eq!(set.len(), test.len());
        for (i, rec) in set.records().iter().enumerate() {
            let delta_max = set
                .image(i)
                .iter()
                .zip(test.image(rec.source_index))
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(delta_max <= cfg.epsilon + 1e-6);
        }
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let loaded = AttackSet::load(dir.path()).unwrap();
        assert_eq!(loaded.images_flat(), set.images_flat());
        assert_eq!(loaded.records(), set.records());
    }
}
