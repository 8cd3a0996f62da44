use std::path::{Path, PathBuf};

use candle_core::Device;
use retifuse::archive;
use retifuse::features::BackboneSource;
use retifuse::imgio::{scan_dataset, DatasetManifest, PairLoadOptions};
use retifuse::nets::ModelBundle;
use retifuse::pipeline::fuse_images;
use retifuse::trainer::{train, TrainConfig, TrainOptions, FINAL_CHECKPOINT};
use retifuse::Error;

fn samples() -> DatasetManifest {
    scan_dataset(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/samples")).unwrap()
}

fn tiny(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.learning_rate = 1e-3;
    c.batch_size = 2;
    c.epochs = 3;
    c.max_steps = Some(4);
    c.crop = 16;
    c.seed = seed;
    c.checkpoint_every = 2;
    c.model.hidden = 4;
    c.backbone = BackboneSource::Surrogate { seed: 1, base_width: 4 };
    c
}

fn parameters(bundle: &ModelBundle) -> Vec<(String, Vec<f32>)> {
    bundle
        .named_parameters()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

#[test]
fn same_seed_gives_identical_logs_and_weights() {
    let m = samples();
    let a = train(&tiny(9), &m, &TrainOptions::default()).unwrap();
    let b = train(&tiny(9), &m, &TrainOptions::default()).unwrap();
    let c = train(&tiny(10), &m, &TrainOptions::default()).unwrap();
    assert_eq!(a.log.totals(), b.log.totals());
    assert_eq!(parameters(&a.bundle), parameters(&b.bundle));
    assert_ne!(a.log.totals(), c.log.totals());
}

#[test]
fn logged_total_recomputes_from_components() {
    let m = samples();
    let config = tiny(2);
    let out = train(&config, &m, &TrainOptions::default()).unwrap();
    for r in &out.log.records {
        let expect = config.loss_weights.lambda * r.decomp.decomp_total + r.d2s.d2s_total;
        assert_eq!(r.total, expect, "step {}", r.step);
    }
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let m = samples();
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(4);
    let straight = train(&config, &m, &TrainOptions::default()).unwrap();
    train(
        &config,
        &m,
        &TrainOptions {
            out_dir: Some(dir.path().join("first")),
            resume: None,
        },
    )
    .unwrap();
    let resumed = train(
        &config,
        &m,
        &TrainOptions {
            out_dir: Some(dir.path().join("second")),
            resume: Some(dir.path().join("first/checkpoints/step_000002.safetensors")),
        },
    )
    .unwrap();
    let full = straight.log.totals();
    let tail = resumed.log.totals();
    assert_eq!(tail.len(), 2);
    for (k, (x, y)) in full[2..].iter().zip(&tail).enumerate() {
        assert!((x - y).abs() <= 1e-6, "step {}: {x} vs {y}", k + 3);
    }
    assert_eq!(parameters(&straight.bundle), parameters(&resumed.bundle));
}

#[test]
fn backbone_checksum_is_conserved() {
    let out = train(&tiny(5), &samples(), &TrainOptions::default()).unwrap();
    let (before, after) = &out.backbone_checksum;
    assert_eq!(before.len(), 64);
    assert_eq!(before, after);
}

fn mean_abs_to_visible(bundle: &ModelBundle, m: &DatasetManifest, size: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..m.len() {
        let p = m
            .load_pair(
                i,
                PairLoadOptions {
                    gray_visible: true,
                    size: Some((size, size)),
                },
            )
            .unwrap();
        let fused = fuse_images(bundle, &p.visible, &p.infrared, Default::default()).unwrap();
        for (f, v) in fused.data().iter().zip(p.visible.data()) {
            total += (f - v).abs() as f64;
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn pixel_only_objective_regresses_toward_the_visible_image() {
    let m = samples();
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(0);
    config.crop = 32;
    config.model.hidden = 8;
    config.learning_rate = 2e-3;
    config.batch_size = 4;
    config.epochs = 1000;
    config.checkpoint_every = 0;
    config.loss_weights.lambda = 0.0;
    let d2s = &mut config.loss_weights.d2s;
    (d2s.gamma2, d2s.gamma4, d2s.beta2, d2s.beta3) = (0.0, 0.0, 0.0, 0.0);

    let segment = 15;
    let mut resume: Option<PathBuf> = None;
    let mut trace = Vec::new();
    for k in 1..=5 {
        config.max_steps = Some(k * segment);
        let out_dir = dir.path().join(format!("seg{k}"));
        let out = train(
            &config,
            &m,
            &TrainOptions {
                out_dir: Some(out_dir.clone()),
                resume: resume.take(),
            },
        )
        .unwrap();
        for r in &out.log.records {
            assert_eq!(r.total, r.d2s.d2s_total);
            assert_eq!(r.d2s.d2s_total, config.loss_weights.d2s.gamma1 * r.d2s.pixel);
        }
        trace.push(mean_abs_to_visible(&out.bundle, &m, config.crop));
        resume = Some(out_dir.join(FINAL_CHECKPOINT));
    }
    assert!(
        trace.windows(2).all(|w| w[1] < w[0]),
        "fused-vs-visible trace {trace:?}"
    );
}

#[test]
fn non_finite_loss_aborts_with_a_tensor_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(1);
    config.learning_rate = 1e38;
    config.max_steps = Some(6);
    let err = train(
        &config,
        &samples(),
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: None,
        },
    )
    .err()
    .expect("training must diverge");
    let Error::Numeric(msg) = &err else {
        panic!("expected a numeric error, got {err}")
    };
    assert!(msg.contains("dumped to"), "{msg}");
    let dump = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            p.file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("numeric_dump_step_")
        })
        .expect("dump file");
    let a = archive::load(&dump, &Device::Cpu).unwrap();
    assert!(a.tensors.contains_key("input.visible"));
    assert!(a.tensors.contains_key("input.infrared"));
    assert!(a.tensors.keys().any(|k| k.starts_with("param.")));
    assert!(a.metadata["ids"].contains("scene_"));
}
