//! Evaluation and analytics: accuracy over clean and perturbed sets,
//! principal-component projection of penultimate embeddings, dispersion
//! summaries, and report/plot emission.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::attacks::AttackSet;
use crate::dataset::{LabeledDataset, IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{ClassifierModel, EMBEDDING_DIM};
use crate::tensor::{Tape, Tensor};

/// One evaluated (configuration, seed) run. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub model: String,
    pub seed: u64,
    pub clean_acc: f32,
    pub fgsm_acc: f32,
    pub inv_acc: f32,
    pub inv_admitted: usize,
    pub config_hash: String,
}

impl RunReport {
    pub fn tagged(mut self, model: String, seed: u64, config_hash: String) -> RunReport {
        self.model = model;
        self.seed = seed;
        self.config_hash = config_hash;
        self
    }
}

const EVAL_BATCH: usize = 256;

/// Predictions over a flat image buffer, batched.
pub fn predict_flat(model: &ClassifierModel, images: &[f32], n: usize) -> Result<Vec<usize>> {
    assert_eq!(images.len(), n * IMAGE_PIXELS);
    let mut preds = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let b = EVAL_BATCH.min(n - start);
        let x = Tensor::from_vec(
            images[start * IMAGE_PIXELS..(start + b) * IMAGE_PIXELS].to_vec(),
            &[b, 1, IMAGE_SIDE, IMAGE_SIDE],
        )?;
        preds.extend(model.predict(&x)?);
    }
    Ok(preds)
}

/// Penultimate-layer embeddings over a flat image buffer, batched.
pub fn embed_flat(model: &ClassifierModel, images: &[f32], n: usize) -> Result<Vec<f32>> {
    assert_eq!(images.len(), n * IMAGE_PIXELS);
    let mut out = Vec::with_capacity(n * EMBEDDING_DIM);
    for start in (0..n).step_by(EVAL_BATCH) {
        let b = EVAL_BATCH.min(n - start);
        let x = Tensor::from_vec(
            images[start * IMAGE_PIXELS..(start + b) * IMAGE_PIXELS].to_vec(),
            &[b, 1, IMAGE_SIDE, IMAGE_SIDE],
        )?;
        let tape = Tape::new();
        let pass = model.forward(&tape, &x)?;
        out.extend_from_slice(pass.embeddings.data());
    }
    Ok(out)
}

fn percent(hits: usize, total: usize) -> f32 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f32 / total as f32
    }
}

/// Score one model: clean and sensitivity accuracy against original
/// labels, invariance accuracy against the oracle's verdict over admitted
/// samples only. The sensitivity set must have been generated against this
/// exact model.
pub fn evaluate(
    model: &ClassifierModel,
    clean: &LabeledDataset,
    sensitivity: &AttackSet,
    invariance: &AttackSet,
) -> Result<RunReport> {
    let model_hash = model.params.value_hash();
    if let Some(rec) = sensitivity
        .records()
        .iter()
        .find(|r| r.checkpoint_hash != model_hash)
    {
        return Err(Error::Config(format!(
            "sensitivity set was generated against checkpoint {} but the \
             model under evaluation hashes to {}",
            rec.checkpoint_hash, model_hash
        )));
    }

    let clean_preds = predict_flat(model, clean.images_flat(), clean.len())?;
    let clean_hits = clean_preds
        .iter()
        .zip(clean.labels())
        .filter(|(&p, &y)| p == y as usize)
        .count();

    let sens_preds = predict_flat(model, sensitivity.images_flat(), sensitivity.len())?;
    let sens_hits = sens_preds
        .iter()
        .zip(sensitivity.records())
        .filter(|(&p, r)| p == r.original_label as usize)
        .count();

    // admitted invariance samples are scored against the oracle's label,
    // which by construction differs from the original
    let inv_preds = predict_flat(model, invariance.images_flat(), invariance.len())?;
    let mut inv_hits = 0;
    let mut inv_admitted = 0;
    for (&p, r) in inv_preds.iter().zip(invariance.records()) {
        if r.admitted() {
            inv_admitted += 1;
            if Some(p as u8) == r.verdict.label() {
                inv_hits += 1;
            }
        }
    }

    Ok(RunReport {
        model: String::new(),
        seed: 0,
        clean_acc: percent(clean_hits, clean.len()),
        fgsm_acc: percent(sens_hits, sensitivity.len()),
        inv_acc: percent(inv_hits, inv_admitted),
        inv_admitted,
        config_hash: String::new(),
    })
}

// ---------------------------------------------------------------------------
// PCA via power iteration with deflation
// ---------------------------------------------------------------------------

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Top-k principal decomposition of an n x d sample matrix.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// n x k score matrix, row-major.
    pub scores: Vec<f32>,
    /// Fraction of total variance captured per component, non-increasing.
    pub explained: Vec<f32>,
    /// k x d component matrix, row-major, rows unit-norm.
    pub components: Vec<f32>,
    pub n: usize,
    pub dim: usize,
    pub k: usize,
}

/// Mean-center and decompose via repeated power iteration, deflating each
/// found component. Sign convention: the largest-magnitude coordinate of
/// every component is positive. All internal arithmetic is f64.
pub fn pca_project(data: &[f32], n: usize, dim: usize, k: usize) -> Result<PcaProjection> {
    if data.len() != n * dim {
        return Err(Error::Shape {
            op: "pca_project",
            detail: format!("{} values vs {n} x {dim}", data.len()),
        });
    }
    if n < k || dim < k || k == 0 {
        return Err(Error::Config(format!(
            "pca needs n >= k and dim >= k > 0, got n={n} dim={dim} k={k}"
        )));
    }
    let mut centered: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    for j in 0..dim {
        let mean: f64 = (0..n).map(|i| centered[i * dim + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * dim + j] -= mean;
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let total_var: f64 = centered.iter().map(|v| v * v).sum::<f64>() / denom;

    let mut components = Vec::with_capacity(k * dim);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut work = centered.clone();
    for comp in 0..k {
        // deterministic start: unit vector along the highest-variance axis
        let lead = (0..dim)
            .max_by(|&a, &b| {
                let va: f64 = (0..n).map(|i| work[i * dim + a].powi(2)).sum();
                let vb: f64 = (0..n).map(|i| work[i * dim + b].powi(2)).sum();
                va.partial_cmp(&vb).unwrap()
            })
            .unwrap();
        let mut v = vec![0.0f64; dim];
        v[lead] = 1.0;
        let mut eigenvalue = 0.0;
        for _ in 0..POWER_MAX_ITERS {
            // w = X^T (X v) / (n - 1), the covariance product without
            // materializing the d x d matrix
            let mut xv = vec![0.0f64; n];
            for i in 0..n {
                xv[i] = (0..dim).map(|j| work[i * dim + j] * v[j]).sum();
            }
            let mut w = vec![0.0f64; dim];
            for i in 0..n {
                let c = xv[i];
                for j in 0..dim {
                    w[j] += work[i * dim + j] * c;
                }
            }
            for wj in &mut w {
                *wj /= denom;
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < POWER_TOL {
                // exhausted the variance: remaining components span the
                // null space
                eigenvalue = 0.0;
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let delta: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            eigenvalue = norm;
            if delta < POWER_TOL {
                break;
            }
        }
        if eigenvalue == 0.0 {
            // pick any unit vector orthogonal to the found components
            v = orthogonal_filler(&components, comp, dim);
        }
        // sign convention
        let lead = (0..dim)
            .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
            .unwrap();
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        // deflate: remove the component's contribution from every row
        for i in 0..n {
            let proj: f64 = (0..dim).map(|j| work[i * dim + j] * v[j]).sum();
            for j in 0..dim {
                work[i * dim + j] -= proj * v[j];
            }
        }
        eigenvalues.push(eigenvalue);
        components.extend(v);
    }

    let mut scores = Vec::with_capacity(n * k);
    for i in 0..n {
        for c in 0..k {
            let s: f64 = (0..dim)
                .map(|j| centered[i * dim + j] * components[c * dim + j])
                .sum();
            scores.push(s as f32);
        }
    }
    let explained = eigenvalues
        .iter()
        .map(|&e| {
            if total_var > 0.0 {
                (e / total_var) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(PcaProjection {
        scores,
        explained,
        components: components.iter().map(|&v| v as f32).collect(),
        n,
        dim,
        k,
    })
}

fn orthogonal_filler(components: &[f64], found: usize, dim: usize) -> Vec<f64> {
    for axis in 0..dim {
        let mut v = vec![0.0f64; dim];
        v[axis] = 1.0;
        for c in 0..found {
            let row = &components[c * dim..(c + 1) * dim];
            let proj: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for j in 0..dim {
                v[j] -= proj * row[j];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
    let mut v = vec![0.0f64; dim];
    v[0] = 1.0;
    v
}

/// Mean Euclidean distance to the group centroid, per tag, over the 2-d
/// score rows of a projection.
pub fn cluster_dispersion(proj: &PcaProjection, tags: &[String]) -> BTreeMap<String, f32> {
    assert_eq!(tags.len(), proj.n);
    let k = proj.k;
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, tag) in tags.iter().enumerate() {
        let entry = sums.entry(tag).or_insert_with(|| (vec![0.0; k], 0));
        for c in 0..k {
            entry.0[c] += proj.scores[i * k + c] as f64;
        }
        entry.1 += 1;
    }
    let centroids: BTreeMap<&str, Vec<f64>> = sums
        .iter()
        .map(|(&t, (s, cnt))| (t, s.iter().map(|v| v / *cnt as f64).collect()))
        .collect();
    let mut dists: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, tag) in tags.iter().enumerate() {
        let c = &centroids[tag.as_str()];
        let d: f64 = (0..k)
            .map(|j| (proj.scores[i * k + j] as f64 - c[j]).powi(2))
            .sum::<f64>()
            .sqrt();
        let entry = dists.entry(tag.clone()).or_insert((0.0, 0));
        entry.0 += d;
        entry.1 += 1;
    }
    dists
        .into_iter()
        .map(|(t, (s, cnt))| (t, (s / cnt as f64) as f32))
        .collect()
}

// ---------------------------------------------------------------------------
// Report CSV
// ---------------------------------------------------------------------------

const REPORT_HEADER: &str = "model,seed,clean_acc,fgsm_acc,inv_acc,inv_admitted,config_hash";

/// Write per-run rows plus one mean row per model kind. Mean rows carry
/// `mean` in the seed column and are skipped by [`parse_report`].
pub fn emit_report(reports: &[RunReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| Error::io(path, e);
    writeln!(w, "{REPORT_HEADER}").map_err(werr)?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.model, r.seed, r.clean_acc, r.fgsm_acc, r.inv_acc, r.inv_admitted, r.config_hash
        )
        .map_err(werr)?;
    }
    let mut kinds: Vec<&str> = Vec::new();
    for r in reports {
        if !kinds.contains(&r.model.as_str()) {
            kinds.push(&r.model);
        }
    }
    for kind in kinds {
        let rows: Vec<&RunReport> = reports.iter().filter(|r| r.model == kind).collect();
        let n = rows.len() as f32;
        writeln!(
            w,
            "{},mean,{},{},{},{},-",
            kind,
            rows.iter().map(|r| r.clean_acc).sum::<f32>() / n,
            rows.iter().map(|r| r.fgsm_acc).sum::<f32>() / n,
            rows.iter().map(|r| r.inv_acc).sum::<f32>() / n,
            rows.iter().map(|r| r.inv_admitted).sum::<usize>() / rows.len(),
        )
        .map_err(werr)?;
    }
    Ok(())
}

/// Read back the per-run rows of a report CSV (mean rows excluded).
pub fn parse_report(path: impl AsRef<Path>) -> Result<Vec<RunReport>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .unwrap_or_default();
    if header != REPORT_HEADER {
        return Err(Error::Format(format!(
            "{}: unexpected header '{header}'",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!(
                "{}:{}: expected 7 fields, got {}",
                path.display(),
                lineno + 2,
                f.len()
            )));
        }
        if f[1] == "mean" {
            continue;
        }
        let bad = |what: &str| {
            Error::Format(format!("{}:{}: bad {what}", path.display(), lineno + 2))
        };
        out.push(RunReport {
            model: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad("seed"))?,
            clean_acc: f[2].parse().map_err(|_| bad("clean accuracy"))?,
            fgsm_acc: f[3].parse().map_err(|_| bad("fgsm accuracy"))?,
            inv_acc: f[4].parse().map_err(|_| bad("invariance accuracy"))?,
            inv_admitted: f[5].parse().map_err(|_| bad("admitted count"))?,
            config_hash: f[6].to_string(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PCA artifacts
// ---------------------------------------------------------------------------

/// Per-point CSV: pc1,pc2,label,kind.
pub fn emit_pca_csv(
    proj: &PcaProjection,
    labels: &[u8],
    kinds: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    assert!(proj.k >= 2 && labels.len() == proj.n && kinds.len() == proj.n);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "pc1,pc2,label,kind").map_err(|e| Error::io(path, e))?;
    for i in 0..proj.n {
        writeln!(
            w,
            "{},{},{},{}",
            proj.scores[i * proj.k],
            proj.scores[i * proj.k + 1],
            labels[i],
            kinds[i]
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

const SVG_SIZE: f32 = 800.0;
const SVG_MARGIN: f32 = 40.0;

/// Static scatter plot: class decides the color, point kind decides the
/// marker (circle for clean, square for perturbed variants).
pub fn emit_pca_plot(
    proj: &PcaProjection,
    labels: &[u8],
    kinds: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    assert!(proj.k >= 2 && labels.len() == proj.n && kinds.len() == proj.n);
    let (mut min_x, mut max_x) = (f32::INFINITY, f32::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f32::INFINITY, f32::NEG_INFINITY);
    for i in 0..proj.n {
        let (x, y) = (proj.scores[i * proj.k], proj.scores[i * proj.k + 1]);
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let span_x = (max_x - min_x).max(1e-6);
    let span_y = (max_y - min_y).max(1e-6);
    let scale = (SVG_SIZE - 2.0 * SVG_MARGIN) / span_x.max(span_y);

    let palette = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        "#bcbd22", "#17becf",
    ];
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| Error::io(path, e);
    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">",
        s = SVG_SIZE
    )
    .map_err(werr)?;
    writeln!(
        w,
        "<rect width=\"{s}\" height=\"{s}\" fill=\"white\"/>",
        s = SVG_SIZE
    )
    .map_err(werr)?;
    for i in 0..proj.n {
        let px = SVG_MARGIN + (proj.scores[i * proj.k] - min_x) * scale;
        let py = SVG_SIZE - SVG_MARGIN - (proj.scores[i * proj.k + 1] - min_y) * scale;
        let color = palette[labels[i] as usize % NUM_CLASSES];
        if kinds[i] == "clean" {
            writeln!(
                w,
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.6\"/>"
            )
            .map_err(werr)?;
        } else {
            writeln!(
                w,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"4\" height=\"4\" fill=\"{color}\" fill-opacity=\"0.6\"/>",
                px - 2.0,
                py - 2.0
            )
            .map_err(werr)?;
        }
    }
    writeln!(w, "</svg>").map_err(werr)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn pca_line_captures_all_variance() {
        // points on the line y = 2x
        let data: Vec<f32> = (0..50).flat_map(|i| [i as f32, 2.0 * i as f32]).collect();
        let p = pca_project(&data, 50, 2, 2).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-5, "{:?}", p.explained);
        assert!(p.explained[1].abs() < 1e-5);
        // component is (1, 2)/sqrt(5) with the sign convention making the
        // largest coordinate positive
        assert!((p.components[0] - 1.0 / 5.0f32.sqrt()).abs() < 1e-4);
        assert!((p.components[1] - 2.0 / 5.0f32.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn pca_isotropic_gaussian_splits_evenly() {
        let mut r = rng::stream(0, "pca-test");
        let mut data = Vec::with_capacity(20_000);
        for _ in 0..10_000 {
            // Box-Muller
            let u1: f32 = r.gen_range(1e-9..1.0f32);
            let u2: f32 = r.gen_range(0.0..1.0f32);
            let m = (-2.0 * u1.ln()).sqrt();
            data.push(m * (2.0 * std::f32::consts::PI * u2).cos());
            data.push(m * (2.0 * std::f32::consts::PI * u2).sin());
        }
        let p = pca_project(&data, 10_000, 2, 2).unwrap();
        assert!((p.explained[0] - 0.5).abs() < 0.05, "{:?}", p.explained);
        assert!((p.explained[1] - 0.5).abs() < 0.05);
        assert!(p.explained[0] >= p.explained[1]);
    }

    #[test]
    fn pca_identity_on_principal_axes() {
        // already-decorrelated data: variance 9 along x, 1 along y
        let data: Vec<f32> = (0..40)
            .flat_map(|i| {
                let t = (i as f32 - 19.5) / 20.0;
                [3.0 * t, if i % 2 == 0 { t } else { -t }]
            })
            .collect();
        let p = pca_project(&data, 40, 2, 2).unwrap();
        // components are the coordinate axes up to sign
        assert!(p.components[0].abs() > 0.999);
        assert!(p.components[3].abs() > 0.999);
    }

    #[test]
    fn pca_reconstructs_centered_data() {
        let mut r = rng::stream(1, "pca-test");
        let (n, d) = (30, 6);
        let data: Vec<f32> = (0..n * d).map(|_| r.gen_range(-1.0..1.0f32)).collect();
        let p = pca_project(&data, n, d, d).unwrap();
        // center the original
        let mut centered = data.clone();
        for j in 0..d {
            let mean: f32 = (0..n).map(|i| data[i * d + j]).sum::<f32>() / n as f32;
            for i in 0..n {
                centered[i * d + j] -= mean;
            }
        }
        for i in 0..n {
            for j in 0..d {
                let rec: f32 = (0..d)
                    .map(|c| p.scores[i * d + c] * p.components[c * d + j])
                    .sum();
                assert!((rec - centered[i * d + j]).abs() < 1e-4);
            }
        }
        let total: f32 = p.explained.iter().sum();
        assert!(total <= 1.0 + 1e-6);
        for w in p.explained.windows(2) {
            assert!(w[0] >= w[1] - 1e-6);
        }
    }

    #[test]
    fn pca_degenerate_input_has_zero_ratios() {
        let data = vec![0.5f32; 20 * 3];
        let p = pca_project(&data, 20, 3, 2).unwrap();
        assert_eq!(p.explained, vec![0.0, 0.0]);
        assert!(p.scores.iter().all(|&s| s.abs() < 1e-6));
    }

    #[test]
    fn dispersion_scaling_and_degenerate_cases() {
        // group b is group a scaled by 2 around its centroid
        let mut scores = Vec::new();
        let mut tags = Vec::new();
        for &(x, y) in &[(1.0f32, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            scores.extend([x, y]);
            tags.push("a".to_string());
        }
        for &(x, y) in &[(2.0f32, 0.0), (-2.0, 0.0), (0.0, 2.0), (0.0, -2.0)] {
            scores.extend([x + 10.0, y]);
            tags.push("b".to_string());
        }
        let proj = PcaProjection {
            scores,
            explained: vec![1.0, 0.0],
            components: vec![1.0, 0.0, 0.0, 1.0],
            n: 8,
            dim: 2,
            k: 2,
        };
        let d = cluster_dispersion(&proj, &tags);
        assert!((d["b"] / d["a"] - 2.0).abs() < 1e-5);

        let same = PcaProjection {
            scores: vec![3.0; 10],
            explained: vec![0.0],
            components: vec![1.0],
            n: 10,
            dim: 1,
            k: 1,
        };
        let tags: Vec<String> = vec!["x".into(); 10];
        assert_eq!(cluster_dispersion(&same, &tags)["x"], 0.0);
    }

    #[test]
    fn report_round_trip_is_exact() {
        let reports: Vec<RunReport> = (0..6)
            .map(|i| RunReport {
                model: if i < 3 { "baseline" } else { "mls" }.to_string(),
                seed: (i % 3) as u64,
                clean_acc: 98.5 + 0.137 * i as f32,
                fgsm_acc: 97.25 - 0.311 * i as f32,
                inv_acc: 85.0 + i as f32 / 3.0,
                inv_admitted: 900 + i,
                config_hash: format!("hash{i}"),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        emit_report(&reports, &path).unwrap();
        let parsed = parse_report(&path).unwrap();
        assert_eq!(parsed, reports);
        // mean rows present: 6 data + 2 means + header
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert_eq!(text.lines().filter(|l| l.contains(",mean,")).count(), 2);
    }

    #[test]
    fn svg_is_well_formed() {
        let proj = PcaProjection {
            scores: vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5],
            explained: vec![0.8, 0.2],
            components: vec![1.0, 0.0, 0.0, 1.0],
            n: 3,
            dim: 2,
            k: 2,
        };
        let labels = vec![0u8, 5, 9];
        let kinds = vec!["clean".to_string(), "sensitivity".into(), "invariance".into()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        emit_pca_plot(&proj, &labels, &kinds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // crude well-formedness: every opened tag closes, one root element
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert_eq!(text.matches("<circle").count(), 1);
        assert_eq!(text.matches("<rect").count(), 3); // background + 2 markers
        assert!(!text.contains("NaN"));
    }
}
