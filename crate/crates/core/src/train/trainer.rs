//! Mini-batch training loop.
//!
//! A batch is a set of slices drawn from one volume, so the encoder runs
//! once per view per batch. Batches from all volumes are shuffled together
//! every epoch.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crop::sample_crop;
use super::dataset::{all_slices, Sample};
use super::loss::{loss_total, FeatureNet, LossWeights};
use super::metrics;
use crate::autodiff::{Adam, AdamConfig, Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::BiplanarRig;
use crate::model::{Model, ModelConfig, SliceInputs};
use crate::volume::{extract_slice, SliceSpec, DEFAULT_CROP_MIN};

pub const LOSS_CSV_HEADER: &str = "epoch,train_loss,val_loss,val_psnr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch: usize,
    /// Probability of training on a random window instead of the full slice.
    pub p_part: f64,
    pub crop_min: (usize, usize),
    pub seed: u64,
    /// Slices drawn per training volume per epoch; `None` uses all of them.
    pub slices_per_volume: Option<usize>,
    /// Evenly spaced slices per validation volume.
    pub val_slices_per_volume: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            epochs: 15,
            batch: 16,
            p_part: 0.0,
            crop_min: (DEFAULT_CROP_MIN, DEFAULT_CROP_MIN),
            seed: 0,
            slices_per_volume: Some(16),
            val_slices_per_volume: 12,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch == 0 {
            return Err(Error::param("batch must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_part) {
            return Err(Error::param("p_part must lie in [0, 1]"));
        }
        if !(self.adam.lr >= 0.0 && self.adam.eps > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::param("invalid Adam hyperparameters"));
        }
        if self.slices_per_volume == Some(0) {
            return Err(Error::param("slices_per_volume must be >= 1"));
        }
        Ok(())
    }

    /// Digest of the full training configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub model: Model<f32>,
}

/// A set of slices of one volume, ready for the network.
pub struct PreparedBatch<T: Real> {
    pub inputs: SliceInputs,
    /// `[B, 1, H_out, W_out]`.
    pub targets: Tensor<T>,
}

/// Extracts targets and coordinate grids for `specs` of `sample`; each
/// spec is resampled to the model output resolution.
pub fn prepare_batch<T: Real>(cfg: &ModelConfig, rig: &BiplanarRig, sample: &Sample, specs: &[SliceSpec], crop_min: (usize, usize)) -> Result<PreparedBatch<T>> {
    let (or, oc) = cfg.out_res;
    let mut grids = Vec::with_capacity(specs.len());
    let mut data = Vec::with_capacity(specs.len() * or * oc);
    for spec in specs {
        let spec = SliceSpec { out_res: cfg.out_res, ..*spec };
        let ex = extract_slice(&sample.volume, &spec, cfg.feature_res, crop_min)?;
        data.extend(ex.image.iter().map(|&v| T::of(v as f64)));
        grids.push(ex.grid);
    }
    Ok(PreparedBatch {
        inputs: SliceInputs::new(cfg, rig, &grids)?,
        targets: Tensor::new(&[specs.len(), 1, or, oc], data)?,
    })
}

fn image_tensor<T: Real>(img: &[f32], res: usize) -> Result<Tensor<T>> {
    Tensor::new(&[1, 1, res, res], img.iter().map(|&v| T::of(v as f64)).collect())
}

/// Loss and predictions of one batch without gradient tracking.
pub fn evaluate_batch<T: Real>(model: &Model<T>, net: &FeatureNet<T>, weights: LossWeights, sample: &Sample, batch: &PreparedBatch<T>, exec: Exec) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::with_exec(exec);
    let p = model.params().bind(&mut g, false);
    let np = net.bind(&mut g);
    let res = model.config().input_res;
    let pa = g.constant(image_tensor(&sample.pa, res)?);
    let lat = g.constant(image_tensor(&sample.lat, res)?);
    let pred = model.forward_graph(&mut g, &p, pa, lat, &batch.inputs)?;
    let target = g.constant(batch.targets.clone());
    let terms = loss_total(&mut g, net, &np, pred, target, weights)?;
    let (or, oc) = model.config().out_res;
    let preds = g
        .value(pred)
        .data()
        .chunks(or * oc)
        .map(|c| c.iter().map(|v| v.f64() as f32).collect())
        .collect();
    Ok((g.value(terms.total).item().f64(), preds))
}

/// One optimizer step on a batch; returns the batch loss. `at` is the
/// `(epoch, batch)` position reported on divergence.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model<f32>,
    net: &FeatureNet<f32>,
    adam: &mut Adam,
    weights: LossWeights,
    sample: &Sample,
    batch: &PreparedBatch<f32>,
    exec: Exec,
    at: (usize, usize),
) -> Result<f64> {
    let mut g = Graph::with_exec(exec);
    g.set_check_finite(true);
    let p = model.params().bind(&mut g, true);
    let np = net.bind(&mut g);
    let res = model.config().input_res;
    let pa = g.constant(image_tensor(&sample.pa, res)?);
    let lat = g.constant(image_tensor(&sample.lat, res)?);
    let pred = model.forward_graph(&mut g, &p, pa, lat, &batch.inputs)?;
    let target = g.constant(batch.targets.clone());
    let terms = loss_total(&mut g, net, &np, pred, target, weights)?;
    let diverged = |detail: String| Error::Divergence {
        epoch: at.0,
        batch: at.1,
        detail,
    };
    if let Err(Error::Numeric { op, node }) = g.ensure_finite() {
        return Err(diverged(format!("op `{op}` (node {node}) produced a non-finite value")));
    }
    let loss = g.value(terms.total).item() as f64;
    if !loss.is_finite() {
        return Err(diverged(format!("loss is {loss}")));
    }
    let grads = g.backward(terms.total)?;
    let per_param: Vec<Tensor<f32>> = model
        .params()
        .ids()
        .map(|id| grads.wrt(p.var(id), model.params().get(id).shape()))
        .collect();
    if let Some(i) = per_param.iter().position(|t| !t.is_finite()) {
        return Err(diverged(format!(
            "gradient of `{}` is non-finite",
            model.params().name(model.params().ids().nth(i).expect("index"))
        )));
    }
    adam.step(model.params_mut(), &per_param)?;
    Ok(loss)
}

/// Evenly spaced subset of `n` of the volume's slices (all if fewer).
pub fn spaced_slices(sample: &Sample, n: usize) -> Vec<SliceSpec> {
    let all = all_slices(&sample.volume);
    if n == 0 || n >= all.len() {
        return all;
    }
    (0..n).map(|i| all[(i * all.len() + all.len() / 2) / n]).collect()
}

/// Mean loss and PSNR over evenly spaced slices of each volume.
pub fn validate(model: &Model<f32>, net: &FeatureNet<f32>, cfg: &TrainConfig, rig: &BiplanarRig, samples: &[Sample]) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut psnr_sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let specs = spaced_slices(s, cfg.val_slices_per_volume);
        for chunk in specs.chunks(cfg.batch) {
            let b = prepare_batch::<f32>(&cfg.model, rig, s, chunk, cfg.crop_min)?;
            let (loss, preds) = evaluate_batch(model, net, cfg.loss, s, &b, cfg.exec)?;
            loss_sum += loss * chunk.len() as f64;
            let px = cfg.model.out_res.0 * cfg.model.out_res.1;
            for (i, p) in preds.iter().enumerate() {
                psnr_sum += metrics::psnr(p, &b.targets.data()[i * px..(i + 1) * px], 1.0)?;
            }
            n += chunk.len();
        }
    }
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((loss_sum / n as f64, psnr_sum / n as f64))
}

/// Mean pixel MSE of `model` over the given slices of `samples`.
pub fn mean_mse(model: &Model<f32>, cfg: &TrainConfig, rig: &BiplanarRig, samples: &[Sample], slices_per_volume: usize) -> Result<f64> {
    let net = FeatureNet::new();
    let weights = LossWeights { rec: 1.0, perceptual: 0.0 };
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let specs = spaced_slices(s, slices_per_volume);
        for chunk in specs.chunks(cfg.batch) {
            let b = prepare_batch::<f32>(&cfg.model, rig, s, chunk, cfg.crop_min)?;
            let (loss, _) = evaluate_batch(model, &net, weights, s, &b, cfg.exec)?;
            sum += loss * chunk.len() as f64;
            n += chunk.len();
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Batches of one epoch as `(sample index, specs)`.
fn epoch_batches(samples: &[Sample], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, Vec<SliceSpec>)>> {
    let mut batches = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut specs = all_slices(&s.volume);
        specs.shuffle(rng);
        if let Some(k) = cfg.slices_per_volume {
            specs.truncate(k);
        }
        for spec in specs.iter_mut() {
            let native = s.volume.geometry().slice_shape(spec.plane);
            spec.crop = sample_crop(native, cfg.p_part, (cfg.crop_min.0.min(native.0), cfg.crop_min.1.min(native.1)), rng)?;
        }
        for chunk in specs.chunks(cfg.batch) {
            batches.push((i, chunk.to_vec()));
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
}

/// Trains a fresh model. With `out` set, writes the loss curve, the best
/// validation checkpoint and the final checkpoint there.
pub fn train(train_set: &[Sample], val_set: &[Sample], rig: &BiplanarRig, cfg: &TrainConfig, out: Option<&TrainOutputs>) -> Result<TrainOutcome> {
    train_from(Model::new(cfg.model.clone())?, train_set, val_set, rig, cfg, out)
}

/// As [`train`], starting from the given weights.
pub fn train_from(
    mut model: Model<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    rig: &BiplanarRig,
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::param("empty training set"));
    }
    if model.config() != &cfg.model {
        return Err(Error::Versioning("initial model does not match the training config".into()));
    }
    let net = FeatureNet::<f32>::new();
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::file(&o.dir, e))?;
            let path = o.loss_csv();
            let mut f = std::fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
            writeln!(f, "{LOSS_CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize);
    let mut best_checkpoint = None;
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(train_set, cfg, &mut rng)?;
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (bi, (si, specs)) in batches.iter().enumerate() {
            let sample = &train_set[*si];
            let b = prepare_batch(&cfg.model, rig, sample, specs, cfg.crop_min)?;
            let loss = train_step(&mut model, &net, &mut adam, cfg.loss, sample, &b, cfg.exec, (epoch, bi))?;
            loss_sum += loss * specs.len() as f64;
            count += specs.len();
        }
        let train_loss = loss_sum / count.max(1) as f64;
        let (val_loss, val_psnr) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            validate(&model, &net, cfg, rig, val_set)?
        };
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_psnr,
        };
        history.push(stats);
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{epoch},{train_loss},{val_loss},{val_psnr}")?;
        }
        let score = if val_loss.is_nan() { train_loss } else { val_loss };
        if score < best.0 {
            best = (score, epoch);
            if let Some(o) = out {
                model.save(&o.best_checkpoint())?;
                best_checkpoint = Some(o.best_checkpoint());
            }
        }
    }
    if let Some(o) = out {
        model.save(&o.final_checkpoint())?;
    }
    Ok(TrainOutcome {
        history,
        best_epoch: best.1,
        best_checkpoint,
        model,
    })
}

/// Writes a loss history in the loss-curve CSV format.
pub fn write_loss_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for e in history {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.val_psnr));
    }
    std::fs::write(path, s).map_err(|e| Error::file(path, e))
}
