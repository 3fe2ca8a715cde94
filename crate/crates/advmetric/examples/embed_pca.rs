//! Train a small run, project clean and perturbed test embeddings onto
//! their top two principal components, and report per-kind dispersion.

use advmetric::attacks::{build_invariance_set, build_sensitivity_set, AttackConfig, Oracle};
use advmetric::dataset::{synth, SplitTag};
use advmetric::eval::{cluster_dispersion, embed_flat, emit_pca_plot, pca_project};
use advmetric::model::EMBEDDING_DIM;
use advmetric::trainer::{train, ConfigKind, TrainConfig};

fn main() {
    let train_ds = synth::generate(1500, 0, SplitTag::Train).unwrap();
    let test_ds = synth::generate(300, 1, SplitTag::Test).unwrap();
    let cfg = TrainConfig {
        kind: ConfigKind::Mls,
        epochs: 6,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    println!("training {} ({} epochs)...", cfg.kind, cfg.epochs);
    let outcome = train(&cfg, 0, &train_ds, None).unwrap();

    let oracle = Oracle::new(&train_ds, 5, 0.8).unwrap();
    let sens = build_sensitivity_set(
        &outcome.model,
        &outcome.model.params.value_hash(),
        &test_ds,
        &oracle,
        &cfg.sensitivity,
    )
    .unwrap();
    let inv = build_invariance_set(&test_ds, &train_ds, &AttackConfig::invariance(0.6)).unwrap();

    // shared basis: clean points plus both attack families
    let mut images = test_ds.images_flat().to_vec();
    let mut labels = test_ds.labels().to_vec();
    let mut kinds: Vec<String> = vec!["clean".into(); test_ds.len()];
    for (set, tag) in [(&sens, "sensitivity"), (&inv, "invariance")] {
        images.extend_from_slice(set.images_flat());
        for r in set.records() {
            labels.push(r.verdict.label().unwrap_or(r.original_label));
            kinds.push(tag.to_string());
        }
    }
    let n = labels.len();
    let emb = embed_flat(&outcome.model, &images, n).unwrap();
    let proj = pca_project(&emb, n, EMBEDDING_DIM, 2).unwrap();
    println!(
        "explained variance: {:.3} / {:.3}",
        proj.explained[0], proj.explained[1]
    );
    for (kind, d) in cluster_dispersion(&proj, &kinds) {
        println!("dispersion[{kind}] = {d:.3}");
    }

    let out = std::env::temp_dir().join("embed_pca.svg");
    emit_pca_plot(&proj, &labels, &kinds, &out).unwrap();
    println!("scatter plot: {}", out.display());
}
