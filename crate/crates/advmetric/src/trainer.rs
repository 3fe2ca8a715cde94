//! Training orchestration: the three compared configurations (adversarial
//! training baseline, +sensitivity triplet, +both triplets) over seeded
//! SGD runs, plus the full comparison grid.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackConfig, AttackSet};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval::{self, RunReport};
use crate::losses::{combined_loss, cross_entropy, CombinedInputs, LossBreakdown, LossConfig};
use crate::model::{hex, ClassifierModel, ModelParams};
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Which comparison row a run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConfigKind {
    /// Cross-entropy on a 50/50 clean/FGSM mixture.
    Baseline,
    /// Baseline objective plus the sensitivity triplet and norm terms.
    Mls,
    /// Full objective including the invariance triplet.
    MlsMli,
}

pub const ALL_KINDS: [ConfigKind; 3] = [ConfigKind::Baseline, ConfigKind::Mls, ConfigKind::MlsMli];

impl std::fmt::Display for ConfigKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigKind::Baseline => write!(f, "baseline"),
            ConfigKind::Mls => write!(f, "mls"),
            ConfigKind::MlsMli => write!(f, "mls+mli"),
        }
    }
}

impl std::str::FromStr for ConfigKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ConfigKind> {
        match s {
            "baseline" => Ok(ConfigKind::Baseline),
            "mls" => Ok(ConfigKind::Mls),
            "mls+mli" => Ok(ConfigKind::MlsMli),
            other => Err(Error::Config(format!(
                "unknown configuration '{other}' (expected baseline, mls, or mls+mli)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub kind: ConfigKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seeds: Vec<u64>,
    pub loss: LossConfig,
    pub sensitivity: AttackConfig,
    pub invariance: AttackConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: ConfigKind::MlsMli,
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            seeds: vec![0, 1, 2],
            loss: LossConfig::default(),
            sensitivity: AttackConfig::sensitivity(attacks::DEFAULT_SENSITIVITY_EPS),
            invariance: AttackConfig::invariance(attacks::DEFAULT_INVARIANCE_EPS),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "bad optimizer settings: lr {}, momentum {}",
                self.learning_rate, self.momentum
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        self.loss.validate()?;
        self.sensitivity.validate()?;
        self.invariance.validate()
    }

    /// Loss coefficients after applying the configuration's ablation:
    /// baseline zeroes every regularizer, mls zeroes the invariance term.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss;
        match self.kind {
            ConfigKind::Baseline => {
                l.lambda1 = 0.0;
                l.lambda2 = 0.0;
                l.lambda3 = 0.0;
            }
            ConfigKind::Mls => l.lambda2 = 0.0,
            ConfigKind::MlsMli => {}
        }
        l
    }

    /// Stable hash of every hyperparameter that shapes a run.
    pub fn config_hash(&self) -> String {
        let l = self.effective_loss();
        let desc = format!(
            "kind={} epochs={} batch={} lr={} momentum={} l1={} l2={} l3={} margin={} epsdiv={} eps_sa={} eps_ia={} k={} tau={}",
            self.kind,
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.momentum,
            l.lambda1,
            l.lambda2,
            l.lambda3,
            l.margin,
            l.eps_div,
            self.sensitivity.epsilon,
            self.invariance.epsilon,
            self.invariance.oracle_k,
            self.invariance.oracle_tau,
        );
        hex(&Sha256::digest(desc.as_bytes())[..16])
    }

    pub fn with_kind(&self, kind: ConfigKind) -> TrainConfig {
        TrainConfig {
            kind,
            ..self.clone()
        }
    }
}

/// One appended training-log record.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} step={} l_ce={:.6} l_t_sa={:.6} l_t_ia={:.6} l_norm={:.6} l_all={:.6}",
            self.epoch,
            self.step,
            self.loss.l_ce,
            self.loss.l_t_sa,
            self.loss.l_t_ia,
            self.loss.l_norm,
            self.loss.l_all
        )
    }
}

pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub log: Vec<StepLog>,
}

struct Sgd {
    velocity: Vec<Vec<f32>>,
    lr: f32,
    momentum: f32,
}

impl Sgd {
    fn new(params: &ModelParams, lr: f32, momentum: f32) -> Sgd {
        Sgd {
            velocity: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            lr,
            momentum,
        }
    }

    fn step(&mut self, params: &ModelParams, grads: &[Vec<f32>]) -> Result<ModelParams> {
        let updated = params
            .tensors()
            .iter()
            .zip(grads)
            .zip(&mut self.velocity)
            .map(|((t, g), v)| {
                let data: Vec<f32> = t
                    .data()
                    .iter()
                    .zip(g)
                    .zip(v.iter_mut())
                    .map(|((&w, &gi), vi)| {
                        *vi = self.momentum * *vi - self.lr * gi;
                        w + *vi
                    })
                    .collect();
                Tensor::from_vec(data, t.shape())
            })
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_tensors(updated)
    }
}

fn collect_grads(tape: &Tape, attached: &ModelParams) -> Result<Vec<Vec<f32>>> {
    attached
        .tensors()
        .iter()
        .map(|t| {
            tape.grad(t)
                .ok_or_else(|| Error::Autodiff("parameter gradient missing".into()))
        })
        .collect()
}

/// Train one (configuration, seed) run. `invariance_set` must cover the
/// training set and is required for the mls+mli configuration; the mls
/// configuration uses it only inside the norm penalty when present.
pub fn train(
    cfg: &TrainConfig,
    seed: u64,
    train_ds: &LabeledDataset,
    invariance_set: Option<&AttackSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.kind == ConfigKind::MlsMli && invariance_set.is_none() {
        return Err(Error::Config(
            "mls+mli training needs a precomputed invariance attack set".into(),
        ));
    }
    let loss_cfg = cfg.effective_loss();
    let mut model = ClassifierModel::init(seed);
    let mut sgd = Sgd::new(&model.params, cfg.learning_rate, cfg.momentum);
    let mut log = Vec::new();
    let admitted = invariance_set.map(|s| s.admitted_by_source());

    for epoch in 0..cfg.epochs {
        let batches = train_ds.batches(cfg.batch_size, seed, epoch as u64)?;
        let mut neg_rng = rng::stream_at(seed, "negative", epoch as u64);
        for (step, idxs) in batches.iter().enumerate() {
            let (x, labels) = train_ds.batch(idxs);
            let x_sa = attacks::fgsm(&model, &x, &labels, cfg.sensitivity.epsilon)?;

            let tape = Tape::new();
            let attached = model.params.attach(&tape);
            let breakdown = if cfg.kind == ConfigKind::Baseline {
                let clean = model.forward_with(&tape, &x, &attached)?;
                let adv = model.forward_with(&tape, &x_sa, &attached)?;
                let l_clean = cross_entropy(&tape, &clean.logits, &labels)?;
                let l_adv = cross_entropy(&tape, &adv.logits, &labels)?;
                let total = tape.scale(&tape.add(&l_clean, &l_adv)?, 0.5);
                let bd = LossBreakdown {
                    l_ce: total.item(),
                    l_all: total.item(),
                    ..Default::default()
                };
                check_finite(&bd, epoch, step)?;
                tape.backward(&total)?;
                bd
            } else {
                // invariance positives aligned by source index; unadmitted
                // rows fall back to the stored candidate but are masked out
                // of the triplet term
                let b = idxs.len();
                let mut mask = vec![false; b];
                let mut x_ia = x.data().to_vec();
                if let (Some(set), Some(adm)) = (invariance_set, admitted.as_ref()) {
                    let by_pos: std::collections::HashMap<usize, usize> = set
                        .records()
                        .iter()
                        .enumerate()
                        .map(|(p, r)| (r.source_index, p))
                        .collect();
                    for (row, &src) in idxs.iter().enumerate() {
                        if let Some(&pos) = by_pos.get(&src) {
                            let img = set.image(pos);
                            let px = crate::dataset::IMAGE_PIXELS;
                            x_ia[row * px..(row + 1) * px].copy_from_slice(img);
                            mask[row] = adm.contains_key(&src);
                        }
                    }
                }
                let x_ia = Tensor::from_vec(x_ia, x.shape())?;
                let neg_idx: Vec<usize> = idxs
                    .iter()
                    .map(|&i| train_ds.sample_negative(train_ds.label(i), &mut neg_rng))
                    .collect::<Result<_>>()?;
                let (x_n, _) = train_ds.batch(&neg_idx);

                let anchor = model.forward_with(&tape, &x, &attached)?;
                let sa = model.forward_with(&tape, &x_sa, &attached)?;
                let ia = model.forward_with(&tape, &x_ia, &attached)?;
                let neg = model.forward_with(&tape, &x_n, &attached)?;
                let (total, bd) = combined_loss(
                    &tape,
                    &CombinedInputs {
                        logits_anchor: &anchor.logits,
                        // regularized rows keep the baseline's 50/50
                        // clean/adversarial cross-entropy underneath
                        logits_sensitivity: Some(&sa.logits),
                        emb_anchor: &anchor.embeddings,
                        emb_sensitivity: &sa.embeddings,
                        emb_invariance: &ia.embeddings,
                        invariance_mask: &mask,
                        emb_negative: &neg.embeddings,
                        labels: &labels,
                    },
                    &loss_cfg,
                )?;
                check_finite(&bd, epoch, step)?;
                tape.backward(&total)?;
                bd
            };
            let grads = collect_grads(&tape, &attached)?;
            model.params = sgd.step(&model.params, &grads)?;
            log.push(StepLog {
                epoch,
                step,
                loss: breakdown,
            });
        }
    }
    Ok(TrainOutcome { model, log })
}

fn check_finite(bd: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    if !bd.l_all.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at epoch {epoch} step {step}: \
             l_ce={} l_t_sa={} l_t_ia={} l_norm={}",
            bd.l_ce, bd.l_t_sa, bd.l_t_ia, bd.l_norm
        )));
    }
    Ok(())
}

pub fn write_log(log: &[StepLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for entry in log {
        writeln!(w, "{}", entry.to_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn run_one(
    cfg: &TrainConfig,
    seed: u64,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    inv_train: &AttackSet,
    inv_test: &AttackSet,
    out: &Path,
) -> Result<RunReport> {
    let outcome = train(cfg, seed, train_ds, Some(inv_train))?;
    let tag = format!("{}_seed{}", cfg.kind.to_string().replace('+', "_"), seed);
    outcome
        .model
        .save_checkpoint(out.join(format!("{tag}.ckpt")), &cfg.config_hash(), seed)?;
    write_log(&outcome.log, out.join(format!("{tag}.log")))?;

    let oracle = attacks::Oracle::new(
        train_ds,
        cfg.invariance.oracle_k,
        cfg.invariance.oracle_tau,
    )?;
    let sens = attacks::build_sensitivity_set(
        &outcome.model,
        &outcome.model.params.value_hash(),
        test_ds,
        &oracle,
        &cfg.sensitivity,
    )?;
    sens.save(out.join(format!("{tag}_sensitivity")))?;
    Ok(eval::evaluate(&outcome.model, test_ds, &sens, inv_test)?.tagged(
        cfg.kind.to_string(),
        seed,
        cfg.config_hash(),
    ))
}

/// Train and evaluate every configuration over every seed, writing
/// checkpoints, logs, attack sets, and the aggregate report under `out`.
/// `jobs` bounds how many (configuration, seed) runs execute in parallel;
/// each run stays single-threaded and fully deterministic.
pub fn run_table1(
    template: &TrainConfig,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    out: impl AsRef<Path>,
    jobs: usize,
) -> Result<Vec<RunReport>> {
    let out = out.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    // invariance sets are model-independent: one over the training set
    // (triplet positives) and one over the test set (evaluation), shared
    // by every run
    let inv_train = attacks::build_invariance_set(train_ds, train_ds, &template.invariance)?;
    let inv_test = attacks::build_invariance_set(test_ds, train_ds, &template.invariance)?;
    inv_test.save(out.join("invariance_test"))?;

    let runs: Vec<(TrainConfig, u64)> = ALL_KINDS
        .iter()
        .flat_map(|&kind| {
            let cfg = template.with_kind(kind);
            cfg.seeds.clone().into_iter().map(move |s| (cfg.clone(), s))
        })
        .collect();
    let jobs = jobs.max(1).min(runs.len());

    let mut reports: Vec<Option<Result<RunReport>>> = (0..runs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let results: Vec<_> = (0..jobs)
            .map(|_| {
                let (next, runs) = (&next, &runs);
                let (inv_train, inv_test) = (&inv_train, &inv_test);
                scope.spawn(move || {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        let Some((cfg, seed)) = runs.get(i) else { break };
                        local.push((
                            i,
                            run_one(cfg, *seed, train_ds, test_ds, inv_train, inv_test, out),
                        ));
                    }
                    local
                })
            })
            .collect();
        for handle in results {
            for (i, res) in handle.join().expect("run worker panicked") {
                reports[i] = Some(res);
            }
        }
    });
    let reports = reports
        .into_iter()
        .map(|r| r.expect("every run scheduled"))
        .collect::<Result<Vec<_>>>()?;
    eval::emit_report(&reports, out.join("report.csv"))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth, SplitTag};

    fn tiny_config(kind: ConfigKind) -> TrainConfig {
        TrainConfig {
            kind,
            epochs: 1,
            batch_size: 16,
            seeds: vec![0],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn baseline_forces_all_regularizers_off() {
        let cfg = tiny_config(ConfigKind::Baseline);
        let l = cfg.effective_loss();
        assert_eq!((l.lambda1, l.lambda2, l.lambda3), (0.0, 0.0, 0.0));
        let l = tiny_config(ConfigKind::Mls).effective_loss();
        assert_eq!(l.lambda2, 0.0);
        assert!(l.lambda1 > 0.0 && l.lambda3 > 0.0);
    }

    #[test]
    fn loss_decreases_early_and_logs_are_clean() {
        let ds = synth::generate(256, 11, SplitTag::Train).unwrap();
        let mut cfg = tiny_config(ConfigKind::Baseline);
        cfg.epochs = 3;
        let outcome = train(&cfg, 0, &ds, None).unwrap();
        assert_eq!(outcome.log.len(), 3 * 256 / 16);
        // per-batch losses are noisy; epoch means must trend down
        let epoch_mean = |e: usize| {
            let rows: Vec<f32> = outcome
                .log
                .iter()
                .filter(|l| l.epoch == e)
                .map(|l| l.loss.l_all)
                .collect();
            rows.iter().sum::<f32>() / rows.len() as f32
        };
        let (first, last) = (epoch_mean(0), epoch_mean(2));
        assert!(last < first, "no early progress: {first} -> {last}");
        for entry in &outcome.log {
            assert_eq!(entry.loss.l_t_sa, 0.0);
            assert_eq!(entry.loss.l_t_ia, 0.0);
            assert_eq!(entry.loss.l_norm, 0.0);
        }
    }

    #[test]
    fn same_seed_reproduces_checkpoint_hash() {
        let ds = synth::generate(64, 12, SplitTag::Train).unwrap();
        let cfg = tiny_config(ConfigKind::Mls);
        let a = train(&cfg, 1, &ds, None).unwrap();
        let b = train(&cfg, 1, &ds, None).unwrap();
        assert_eq!(a.model.params.value_hash(), b.model.params.value_hash());
    }

    #[test]
    fn mls_equals_mls_mli_with_zero_invariance_weight() {
        let ds = synth::generate(64, 13, SplitTag::Train).unwrap();
        let inv = attacks::build_invariance_set(&ds, &ds, &AttackConfig::invariance(0.4)).unwrap();
        let mls = tiny_config(ConfigKind::Mls);
        let mut ablated = tiny_config(ConfigKind::MlsMli);
        ablated.loss.lambda2 = 0.0;
        let a = train(&mls, 2, &ds, Some(&inv)).unwrap();
        let b = train(&ablated, 2, &ds, Some(&inv)).unwrap();
        assert_eq!(a.model.params.value_hash(), b.model.params.value_hash());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.loss.l_all, y.loss.l_all);
        }
    }

    #[test]
    fn mls_mli_without_invariance_set_is_a_config_error() {
        let ds = synth::generate(32, 14, SplitTag::Train).unwrap();
        let err = train(&tiny_config(ConfigKind::MlsMli), 0, &ds, None)
            .err()
            .expect("training without an invariance set must fail");
        assert_eq!(err.exit_code(), 1);
    }
}
