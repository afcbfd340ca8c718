//! Dataset synthesis, the training loop and evaluation on miniature data.

use biplanar_core::model::{Model, ModelConfig};
use biplanar_core::train::dataset::{phantom_seed, MANIFEST_FILE};
use biplanar_core::train::eval::self_report;
use biplanar_core::train::{
    build_dataset, evaluate, train, train_from, CropMode, DatasetConfig, EvalOptions, Manifest, Sample, Split, TrainConfig,
    TrainOutputs,
};
use biplanar_core::volume::Plane;
use biplanar_core::{Error, Exec};
use std::collections::HashSet;
use std::path::Path;

fn tiny_dataset(dir: &Path) -> (Manifest, Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let cfg = DatasetConfig {
        n_train: 2,
        n_val: 1,
        n_test: 1,
        vol_dims: [16, 16, 16],
        drr_res: (16, 16),
        ..Default::default()
    };
    let m = build_dataset(&cfg, dir).unwrap();
    let tr = m.load_split(dir, Split::Train).unwrap();
    let va = m.load_split(dir, Split::Val).unwrap();
    let te = m.load_split(dir, Split::Test).unwrap();
    (m, tr, va, te)
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::miniature(),
        epochs: 2,
        batch: 6,
        slices_per_volume: Some(12),
        val_slices_per_volume: 6,
        crop_min: (4, 4),
        exec: Exec::Sequential,
        adam: biplanar_core::autodiff::AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn params_bits(m: &Model<f32>) -> Vec<u32> {
    m.params().values().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn one_volume_per_split_at_64_cubed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_train: 1,
        n_val: 1,
        n_test: 1,
        ..Default::default()
    };
    let m = build_dataset(&cfg, dir.path()).unwrap();
    for split in Split::ALL {
        assert_eq!(m.slice_count(split), 192);
        let rec = m.split(split).next().unwrap();
        for plane in Plane::ALL {
            assert_eq!(rec.slices.iter().filter(|s| s.plane == plane).count(), 64);
        }
    }
    let paths: Vec<_> = m.volumes.iter().map(|v| v.volume_path.clone()).collect();
    assert_eq!(paths.iter().collect::<HashSet<_>>().len(), 3);
    let seeds: HashSet<u64> = m.volumes.iter().map(|v| v.phantom_seed).collect();
    assert_eq!(seeds.len(), 3);
    assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    assert_eq!(Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
}

#[test]
fn dataset_regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ma, ..) = tiny_dataset(a.path());
    let (mb, ..) = tiny_dataset(b.path());
    assert_eq!(ma, mb);
    for rec in &ma.volumes {
        for p in [&rec.volume_path, &rec.pa_path, &rec.lat_path] {
            assert_eq!(std::fs::read(a.path().join(p)).unwrap(), std::fs::read(b.path().join(p)).unwrap());
        }
    }
}

#[test]
fn phantom_seeds_never_collide_across_splits() {
    let mut seen = HashSet::new();
    for split in Split::ALL {
        for i in 0..200 {
            assert!(seen.insert(phantom_seed(7, split, i)));
        }
    }
}

#[test]
fn training_is_deterministic_in_both_execution_modes() {
    let dir = tempfile::tempdir().unwrap();
    let (m, tr, va, _) = tiny_dataset(dir.path());
    let cfg = tiny_config();
    let a = train(&tr, &va, &m.rig, &cfg, None).unwrap();
    let b = train(&tr, &va, &m.rig, &cfg, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(params_bits(&a.model), params_bits(&b.model));
    let par = train(&tr, &va, &m.rig, &TrainConfig { exec: Exec::Parallel, ..cfg.clone() }, None).unwrap();
    assert_eq!(a.history, par.history);
    assert_eq!(params_bits(&a.model), params_bits(&par.model));
    let other = train(&tr, &va, &m.rig, &TrainConfig { seed: 1, ..cfg }, None).unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (m, tr, va, _) = tiny_dataset(dir.path());
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    cfg.adam.lr = 0.0;
    let init = Model::<f32>::new(cfg.model.clone()).unwrap();
    let out = train_from(init.clone(), &tr, &va, &m.rig, &cfg, None).unwrap();
    assert_eq!(params_bits(&out.model), params_bits(&init));
    assert!(out.history[0].train_loss.is_finite());
}

#[test]
fn outputs_are_written_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let (m, tr, va, te) = tiny_dataset(&dir.path().join("data"));
    let out = TrainOutputs {
        dir: dir.path().join("run"),
    };
    let cfg = tiny_config();
    let res = train(&tr, &va, &m.rig, &cfg, Some(&out)).unwrap();
    let csv = std::fs::read_to_string(out.loss_csv()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,val_psnr");
    assert_eq!(lines.len(), 1 + cfg.epochs);
    assert_eq!(res.best_checkpoint.as_deref(), Some(out.best_checkpoint().as_path()));
    let last = Model::<f32>::load(&out.final_checkpoint()).unwrap();
    assert_eq!(params_bits(&last), params_bits(&res.model));
    let opts = EvalOptions {
        slices_per_volume: Some(6),
        ..Default::default()
    };
    let a = evaluate(&res.model, &m.rig, &te, Split::Test, &opts).unwrap();
    let b = evaluate(&last, &m.rig, &te, Split::Test, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn wrong_initial_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (m, tr, va, _) = tiny_dataset(dir.path());
    let cfg = tiny_config();
    let other = Model::<f32>::new(ModelConfig {
        init_seed: 99,
        ..cfg.model.clone()
    })
    .unwrap();
    assert!(matches!(train_from(other, &tr, &va, &m.rig, &cfg, None), Err(Error::Versioning(_))));
}

#[test]
fn non_finite_input_is_reported_as_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let (m, mut tr, va, _) = tiny_dataset(dir.path());
    tr.truncate(1);
    tr[0].pa[5] = f32::NAN;
    let err = train(&tr, &va, &m.rig, &tiny_config(), None).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1, batch: 0, .. }), "{err:?}");
}

#[test]
fn evaluation_rows_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _, _, te) = tiny_dataset(dir.path());
    let model = Model::<f32>::new(ModelConfig::miniature()).unwrap();
    let opts = EvalOptions {
        slices_per_volume: Some(9),
        crop_suite: true,
        batch: 4,
        exec: Exec::Parallel,
    };
    let rep = evaluate(&model, &m.rig, &te, Split::Test, &opts).unwrap();
    assert_eq!(rep.per_slice().count(), te.len() * 9 * 3);
    for mode in CropMode::SUITE {
        for plane in ["axial", "coronal", "sagittal", "all"] {
            let row = rep.aggregate(plane, mode).unwrap();
            assert_eq!(row.slice_index, -1);
            assert!(row.psnr_db.is_finite() && row.ssim.is_finite(), "{row:?}");
        }
    }
    let seq = evaluate(&model, &m.rig, &te, Split::Test, &EvalOptions { exec: Exec::Sequential, ..opts }).unwrap();
    assert_eq!(rep, seq);
    let csv = rep.to_csv();
    assert_eq!(csv.lines().count(), 1 + rep.rows.len());
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, va, _) = tiny_dataset(dir.path());
    let rep = self_report(&va, Split::Val, Some(6), (16, 16)).unwrap();
    assert_eq!(rep.per_slice().count(), 6);
    for row in &rep.rows {
        assert_eq!(row.psnr_db, f64::INFINITY);
        assert!((row.ssim - 1.0).abs() <= 1e-9);
    }
    assert!(rep.to_csv().contains(",inf,"));
}

#[test]
fn learning_moves_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (m, tr, va, _) = tiny_dataset(dir.path());
    let cfg = TrainConfig {
        epochs: 4,
        p_part: 0.5,
        ..tiny_config()
    };
    let out = train(&tr, &va, &m.rig, &cfg, None).unwrap();
    let h = &out.history;
    assert!(h.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));
    assert!(h.last().unwrap().train_loss < h[0].train_loss, "{h:?}");
}
