//! Per-slice PSNR/SSIM evaluation and CSV reporting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Sample, Split};
use super::metrics;
use super::trainer::{prepare_batch, spaced_slices};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::geometry::BiplanarRig;
use crate::model::Model;
use crate::volume::{Crop, Plane, SliceSpec};

pub const EVAL_CSV_HEADER: &str = "split,plane,slice_index,crop,psnr_db,ssim";

/// Evaluation window relative to the native slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Full,
    /// Centered window of half the native size per axis.
    Half,
    /// Centered window of a quarter of the native size per axis.
    Quarter,
}

impl CropMode {
    pub const SUITE: [CropMode; 3] = [CropMode::Full, CropMode::Half, CropMode::Quarter];

    pub fn name(self) -> &'static str {
        match self {
            CropMode::Full => "full",
            CropMode::Half => "half",
            CropMode::Quarter => "quarter",
        }
    }

    pub fn window(self, native: (usize, usize)) -> Option<Crop> {
        let div = match self {
            CropMode::Full => return None,
            CropMode::Half => 2,
            CropMode::Quarter => 4,
        };
        Some(Crop::centered(native, (native.0 / div).max(2), (native.1 / div).max(2)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: Split,
    /// Plane name, or `all` for the cross-plane aggregate.
    pub plane: String,
    /// Slice index, `-1` for aggregate rows.
    pub slice_index: i64,
    pub crop: CropMode,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub config_digest: String,
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Slices per volume, evenly spaced over all planes; `None` for all.
    pub slices_per_volume: Option<usize>,
    pub crop_suite: bool,
    pub batch: usize,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            slices_per_volume: None,
            crop_suite: false,
            batch: 16,
            exec: Exec::default(),
        }
    }
}

/// Smallest crop accepted when evaluating fixed windows.
const EVAL_CROP_MIN: (usize, usize) = (2, 2);

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

impl EvalReport {
    pub fn per_slice(&self) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(|r| r.slice_index >= 0)
    }

    pub fn aggregate(&self, plane: &str, crop: CropMode) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.slice_index < 0 && r.plane == plane && r.crop == crop)
    }

    /// Mean PSNR over every slice evaluated with `crop`.
    pub fn mean_psnr(&self, crop: CropMode) -> Option<f64> {
        self.aggregate("all", crop).map(|r| r.psnr_db)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.split.name(),
                r.plane,
                r.slice_index,
                r.crop.name(),
                fmt_f64(r.psnr_db),
                fmt_f64(r.ssim)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::file(path, e))
    }

    fn push_aggregates(&mut self) {
        let modes: Vec<CropMode> = CropMode::SUITE
            .into_iter()
            .filter(|m| self.rows.iter().any(|r| r.crop == *m))
            .collect();
        let mut agg = Vec::new();
        for mode in modes {
            let planes = Plane::ALL.iter().map(|p| p.name()).chain(["all"]);
            for plane in planes {
                let sel: Vec<&EvalRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.crop == mode && (plane == "all" || r.plane == plane))
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let n = sel.len() as f64;
                agg.push(EvalRow {
                    split: self.split,
                    plane: plane.to_string(),
                    slice_index: -1,
                    crop: mode,
                    psnr_db: sel.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                    ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
                });
            }
        }
        self.rows.extend(agg);
    }
}

/// Per-slice metrics of one prediction against its target.
fn score(split: Split, spec: &SliceSpec, mode: CropMode, pred: &[f32], target: &[f32]) -> Result<EvalRow> {
    let (r, c) = spec.out_res;
    Ok(EvalRow {
        split,
        plane: spec.plane.name().to_string(),
        slice_index: spec.index as i64,
        crop: mode,
        psnr_db: metrics::psnr(pred, target, 1.0)?,
        ssim: metrics::ssim(pred, target, r, c, 1.0)?,
    })
}

/// Scores arbitrary predictions (one per spec) against the ground truth of
/// `sample`. Used to evaluate ground truth against itself and by
/// [`evaluate`].
pub fn score_predictions(split: Split, sample: &Sample, specs: &[(SliceSpec, CropMode)], preds: &[Vec<f32>], out_res: (usize, usize)) -> Result<Vec<EvalRow>> {
    if specs.len() != preds.len() {
        return Err(Error::param("one prediction per slice required"));
    }
    specs
        .iter()
        .zip(preds)
        .map(|((spec, mode), p)| {
            let spec = SliceSpec { out_res, ..*spec };
            let t = crate::volume::extract_slice(&sample.volume, &spec, (2, 2), EVAL_CROP_MIN)?;
            score(split, &spec, *mode, p, &t.image)
        })
        .collect()
}

/// Evaluates `model` on `samples`: full-frame slices and, with the crop
/// suite, centered half and quarter windows of the same slices.
pub fn evaluate(model: &Model<f32>, rig: &BiplanarRig, samples: &[Sample], split: Split, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.batch == 0 {
        return Err(Error::param("batch must be >= 1"));
    }
    let cfg = model.config();
    let modes: &[CropMode] = if opts.crop_suite { &CropMode::SUITE } else { &CropMode::SUITE[..1] };
    let mut jobs: Vec<(usize, Vec<(SliceSpec, CropMode)>)> = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let base = match opts.slices_per_volume {
            Some(n) => spaced_slices(s, n),
            None => spaced_slices(s, 0),
        };
        for &mode in modes {
            let specs: Vec<(SliceSpec, CropMode)> = base
                .iter()
                .map(|sp| {
                    let native = s.volume.geometry().slice_shape(sp.plane);
                    let crop = mode.window(native);
                    (SliceSpec { crop, out_res: cfg.out_res, ..*sp }, mode)
                })
                .collect();
            for chunk in specs.chunks(opts.batch) {
                jobs.push((si, chunk.to_vec()));
            }
        }
    }
    let results = exec::map(opts.exec, jobs.len(), |j| -> Result<Vec<EvalRow>> {
        let (si, specs) = &jobs[j];
        let sample = &samples[*si];
        let only: Vec<SliceSpec> = specs.iter().map(|(s, _)| *s).collect();
        let batch = prepare_batch::<f32>(cfg, rig, sample, &only, EVAL_CROP_MIN)?;
        let mut g = Graph::with_exec(Exec::Sequential);
        let p = model.params().bind(&mut g, false);
        let res = cfg.input_res;
        let pa = g.constant(crate::autodiff::Tensor::new(&[1, 1, res, res], sample.pa.clone())?);
        let lat = g.constant(crate::autodiff::Tensor::new(&[1, 1, res, res], sample.lat.clone())?);
        let pred = model.forward_graph(&mut g, &p, pa, lat, &batch.inputs)?;
        let px = cfg.out_res.0 * cfg.out_res.1;
        let pv = g.value(pred).data();
        specs
            .iter()
            .enumerate()
            .map(|(i, (spec, mode))| score(split, spec, *mode, &pv[i * px..(i + 1) * px], &batch.targets.data()[i * px..(i + 1) * px]))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let mut report = EvalReport {
        split,
        config_digest: cfg.digest(),
        rows,
    };
    report.push_aggregates();
    Ok(report)
}

/// Report of ground truth scored against itself, for pipeline checks.
pub fn self_report(samples: &[Sample], split: Split, slices_per_volume: Option<usize>, out_res: (usize, usize)) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for s in samples {
        let specs: Vec<(SliceSpec, CropMode)> = spaced_slices(s, slices_per_volume.unwrap_or(0))
            .into_iter()
            .map(|sp| (SliceSpec { out_res, ..sp }, CropMode::Full))
            .collect();
        let truth = specs
            .iter()
            .map(|(sp, _)| crate::volume::extract_slice(&s.volume, sp, (2, 2), EVAL_CROP_MIN).map(|e| e.image))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(score_predictions(split, s, &specs, &truth, out_res)?);
    }
    let mut report = EvalReport {
        split,
        config_digest: String::new(),
        rows,
    };
    report.push_aggregates();
    Ok(report)
}
