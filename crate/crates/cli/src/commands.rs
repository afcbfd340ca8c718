//! Subcommand configs and their drivers.
//!
//! Every command resolves a JSON config (file first, then flag overrides),
//! writes the resolved config next to its outputs and only then runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use biplanar_core::drr::{render_drr_with, DEFAULT_RES, DEFAULT_STEP};
use biplanar_core::geometry::{make_biplanar_rig, Projection, DEFAULT_FOCAL, DEFAULT_SOURCE_DIST};
use biplanar_core::model::{Model, SliceInputs};
use biplanar_core::rawio::{read_raw, write_png, write_png_panels, write_raw, RawHeader};
use biplanar_core::selftest;
use biplanar_core::train::{
    build_dataset, evaluate, psnr, ssim, train, CropMode, DatasetConfig, EvalOptions, Manifest, Split, TrainConfig,
    TrainOutputs,
};
use biplanar_core::volume::{extract_slice, generate_phantom, Crop, PhantomSpec, Plane, SliceSpec, Volume, VolumeGeometry};
use biplanar_core::Exec;

use crate::{AblateArgs, DatasetArgs, DrrArgs, EvalArgs, GradcheckArgs, PhantomArgs, ReconstructArgs, TrainArgs, TrainFlags};

/// Name of the resolved-config file written into every output directory.
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid config: {detail}")]
    Config { detail: String, schema: String },

    #[error(transparent)]
    Core(#[from] biplanar_core::Error),

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} gradient checks failed")]
    GradCheck { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            _ => 2,
        }
    }

    /// Default config of the failing command, printed after usage errors.
    pub fn schema(&self) -> Option<&str> {
        match self {
            CliError::Config { schema, .. } => Some(schema),
            _ => None,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn schema_of<C: Serialize + Default>() -> String {
    serde_json::to_string_pretty(&C::default()).expect("default config serializes")
}

fn config_error<C: Serialize + Default>(detail: impl Into<String>) -> CliError {
    CliError::Config {
        detail: detail.into(),
        schema: schema_of::<C>(),
    }
}

/// Reads `path` as a `C`, or returns the default config.
fn load_config<C: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| config_error::<C>(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error::<C>(format!("{}: {e}", path.display())))
}

fn required<C: Serialize + Default, T>(value: Option<T>, name: &str) -> Result<T> {
    value.ok_or_else(|| config_error::<C>(format!("`{name}` must be set in the config or with --{}", name.replace('_', "-"))))
}

fn parse_field<C: Serialize + Default, T: std::str::FromStr<Err = biplanar_core::Error>>(s: &str) -> Result<T> {
    s.parse().map_err(|e: biplanar_core::Error| config_error::<C>(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_resolved<C: Serialize>(dir: &Path, cfg: &C) -> Result<()> {
    create_dir(dir)?;
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_text(&dir.join(RESOLVED_CONFIG), &(json + "\n"))
}

fn pair<C: Serialize + Default>(v: Vec<usize>, what: &str) -> Result<(usize, usize)> {
    match v[..] {
        [a, b] => Ok((a, b)),
        _ => Err(config_error::<C>(format!("{what} takes two values"))),
    }
}

fn triple<C: Serialize + Default>(v: Vec<usize>, what: &str) -> Result<[usize; 3]> {
    match v[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(config_error::<C>(format!("{what} takes three values"))),
    }
}

// ---------------------------------------------------------------- phantom

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomCmd {
    pub out: PathBuf,
    pub count: usize,
    pub dims: [usize; 3],
    pub phantom: PhantomSpec,
}

impl Default for PhantomCmd {
    fn default() -> Self {
        PhantomCmd {
            out: PathBuf::from("phantoms"),
            count: 1,
            dims: [64, 64, 64],
            phantom: PhantomSpec::default(),
        }
    }
}

pub fn phantom(a: PhantomArgs) -> Result<()> {
    let mut cfg: PhantomCmd = load_config(a.config.as_deref())?;
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if let Some(v) = a.seed {
        cfg.phantom.seed = v;
    }
    if let Some(v) = a.count {
        cfg.count = v;
    }
    if let Some(v) = a.dims {
        cfg.dims = triple::<PhantomCmd>(v, "--dims")?;
    }
    if let Some(v) = a.organs {
        cfg.phantom.n_organs = v;
    }
    write_resolved(&cfg.out, &cfg)?;
    for i in 0..cfg.count as u64 {
        let spec = PhantomSpec {
            seed: cfg.phantom.seed + i,
            ..cfg.phantom
        };
        let vol = generate_phantom(&spec, cfg.dims)?;
        let stem = format!("phantom_{}", spec.seed);
        vol.save(&cfg.out.join(format!("{stem}.raw")))?;
        let (rows, cols, mid) = vol.native_slice(Plane::Axial, cfg.dims[0] / 2)?;
        write_png(&cfg.out.join(format!("{stem}_axial.png")), rows, cols, &mid)?;
        println!("{}", cfg.out.join(format!("{stem}.raw")).display());
    }
    Ok(())
}

// ---------------------------------------------------------------- drr

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrrCmd {
    pub volume: Option<PathBuf>,
    pub out: PathBuf,
    pub source_dist: f64,
    pub focal: f64,
    pub res: (usize, usize),
    pub step: f64,
}

impl Default for DrrCmd {
    fn default() -> Self {
        DrrCmd {
            volume: None,
            out: PathBuf::from("drr"),
            source_dist: DEFAULT_SOURCE_DIST,
            focal: DEFAULT_FOCAL,
            res: DEFAULT_RES,
            step: DEFAULT_STEP,
        }
    }
}

pub fn drr(a: DrrArgs, exec: Exec) -> Result<()> {
    let mut cfg: DrrCmd = load_config(a.config.as_deref())?;
    if a.volume.is_some() {
        cfg.volume = a.volume;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if let Some(v) = a.source_dist {
        cfg.source_dist = v;
    }
    if let Some(v) = a.focal {
        cfg.focal = v;
    }
    if let Some(v) = a.res {
        cfg.res = pair::<DrrCmd>(v, "--res")?;
    }
    if let Some(v) = a.step {
        cfg.step = v;
    }
    let path = required::<DrrCmd, _>(cfg.volume.clone(), "volume")?;
    let vol = Volume::load(&path)?;
    let rig = make_biplanar_rig(cfg.source_dist, cfg.focal)?;
    write_resolved(&cfg.out, &cfg)?;
    for pose in [&rig.pa, &rig.lat] {
        let img = render_drr_with(&vol, pose, cfg.res, cfg.step, exec)?;
        let name = img.view().name().to_lowercase();
        img.save_raw(&cfg.out.join(format!("{name}.raw")))?;
        img.save_png(&cfg.out.join(format!("{name}.png")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- dataset

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetCmd {
    pub out: PathBuf,
    pub dataset: DatasetConfig,
}

impl Default for DatasetCmd {
    fn default() -> Self {
        DatasetCmd {
            out: PathBuf::from("dataset"),
            dataset: DatasetConfig::default(),
        }
    }
}

pub fn dataset(a: DatasetArgs) -> Result<()> {
    let mut cfg: DatasetCmd = load_config(a.config.as_deref())?;
    let d = &mut cfg.dataset;
    if let Some(v) = a.n_train {
        d.n_train = v;
    }
    if let Some(v) = a.n_val {
        d.n_val = v;
    }
    if let Some(v) = a.n_test {
        d.n_test = v;
    }
    if let Some(v) = a.dims {
        d.vol_dims = triple::<DatasetCmd>(v, "--dims")?;
    }
    if let Some(v) = a.res {
        d.drr_res = pair::<DatasetCmd>(v, "--res")?;
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    write_resolved(&cfg.out, &cfg)?;
    let m = build_dataset(&cfg.dataset, &cfg.out)?;
    for split in Split::ALL {
        println!("{}: {} volumes, {} slices", split.name(), m.split(split).count(), m.slice_count(split));
    }
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmd {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl Default for TrainCmd {
    fn default() -> Self {
        TrainCmd {
            data: None,
            out: PathBuf::from("run"),
            train: TrainConfig::default(),
        }
    }
}

fn apply_train_flags(t: &mut TrainConfig, f: &TrainFlags, exec: Exec) {
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.lr {
        t.adam.lr = v;
    }
    if let Some(v) = f.batch {
        t.batch = v;
    }
    if let Some(v) = f.p_part {
        t.p_part = v;
    }
    if let Some(v) = f.seed {
        t.seed = v;
    }
    if let Some(v) = f.perceptual {
        t.loss.perceptual = v;
    }
    if let Some(v) = f.slices_per_volume {
        t.slices_per_volume = (v > 0).then_some(v);
    }
    t.exec = exec;
}

fn check_train<C: Serialize + Default>(t: &TrainConfig) -> Result<()> {
    t.validate().map_err(|e| config_error::<C>(e.to_string()))
}

pub fn train_cmd(a: TrainArgs, exec: Exec) -> Result<()> {
    let mut cfg: TrainCmd = load_config(a.config.as_deref())?;
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    apply_train_flags(&mut cfg.train, &a.flags, exec);
    if let Some(p) = &a.projection {
        cfg.train.model.projection = parse_field::<TrainCmd, Projection>(p)?;
    }
    if a.no_pe {
        cfg.train.model.use_pe = false;
    }
    if a.no_global {
        cfg.train.model.use_global = false;
    }
    if a.no_attention {
        cfg.train.model.use_attention = false;
    }
    check_train::<TrainCmd>(&cfg.train)?;
    let data = required::<TrainCmd, _>(cfg.data.clone(), "data")?;
    let m = Manifest::load(&data)?;
    let tr = m.load_split(&data, Split::Train)?;
    let va = m.load_split(&data, Split::Val)?;
    write_resolved(&cfg.out, &cfg)?;
    let outputs = TrainOutputs { dir: cfg.out.clone() };
    let start = Instant::now();
    let res = train(&tr, &va, &m.rig, &cfg.train, Some(&outputs))?;
    for e in &res.history {
        println!("epoch {} train {:.5} val {:.5} psnr {:.3}", e.epoch, e.train_loss, e.val_loss, e.val_psnr);
    }
    println!("trained in {:.1?}; checkpoint {}", start.elapsed(), outputs.final_checkpoint().display());
    Ok(())
}

// ---------------------------------------------------------------- reconstruct

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructCmd {
    pub checkpoint: Option<PathBuf>,
    pub pa: Option<PathBuf>,
    pub lat: Option<PathBuf>,
    pub plane: Plane,
    pub index: usize,
    pub crop: Option<Crop>,
    /// Ground truth; when absent the slice geometry comes from `dims`.
    pub volume: Option<PathBuf>,
    pub dims: [usize; 3],
    pub source_dist: f64,
    pub focal: f64,
    /// Smallest accepted window side.
    pub crop_min: (usize, usize),
    pub out: PathBuf,
}

impl Default for ReconstructCmd {
    fn default() -> Self {
        ReconstructCmd {
            checkpoint: None,
            pa: None,
            lat: None,
            plane: Plane::Axial,
            index: 32,
            crop: None,
            volume: None,
            dims: [64, 64, 64],
            source_dist: DEFAULT_SOURCE_DIST,
            focal: DEFAULT_FOCAL,
            crop_min: (2, 2),
            out: PathBuf::from("recon"),
        }
    }
}

fn parse_crop(s: &str) -> Result<Crop> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| config_error::<ReconstructCmd>(format!("--crop `{s}`: {e}")))?;
    match v[..] {
        [row0, col0, rows, cols] => Ok(Crop { row0, col0, rows, cols }),
        _ => Err(config_error::<ReconstructCmd>(format!("--crop `{s}` must be ROW0,COL0,ROWS,COLS"))),
    }
}

#[derive(Serialize)]
struct SliceScore {
    psnr_db: f64,
    ssim: f64,
}

pub fn reconstruct(a: ReconstructArgs, exec: Exec) -> Result<()> {
    let mut cfg: ReconstructCmd = load_config(a.config.as_deref())?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if a.pa.is_some() {
        cfg.pa = a.pa;
    }
    if a.lat.is_some() {
        cfg.lat = a.lat;
    }
    if let Some(p) = &a.plane {
        cfg.plane = parse_field::<ReconstructCmd, Plane>(p)?;
    }
    if let Some(v) = a.index {
        cfg.index = v;
    }
    if let Some(c) = &a.crop {
        cfg.crop = Some(parse_crop(c)?);
    }
    if a.volume.is_some() {
        cfg.volume = a.volume;
    }
    if let Some(v) = a.dims {
        cfg.dims = triple::<ReconstructCmd>(v, "--dims")?;
    }
    if let Some(v) = a.source_dist {
        cfg.source_dist = v;
    }
    if let Some(v) = a.focal {
        cfg.focal = v;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    let ckpt = required::<ReconstructCmd, _>(cfg.checkpoint.clone(), "checkpoint")?;
    let pa_path = required::<ReconstructCmd, _>(cfg.pa.clone(), "pa")?;
    let lat_path = required::<ReconstructCmd, _>(cfg.lat.clone(), "lat")?;

    let model = Model::<f32>::load(&ckpt)?;
    let (_, pa) = read_raw(&pa_path)?;
    let (_, lat) = read_raw(&lat_path)?;
    let truth = cfg.volume.as_deref().map(Volume::load).transpose()?;
    let geom = match &truth {
        Some(v) => v.geometry().clone(),
        None => VolumeGeometry::new(cfg.dims, [1.0; 3], [0.0; 3])?,
    };
    let rig = make_biplanar_rig(cfg.source_dist, cfg.focal)?;
    let mcfg = model.config();
    let mut spec = SliceSpec::new(cfg.plane, cfg.index, mcfg.out_res);
    spec.crop = cfg.crop;
    let inputs = SliceInputs::for_specs(mcfg, &rig, &geom, &[spec], cfg.crop_min)?;
    write_resolved(&cfg.out, &cfg)?;

    let start = Instant::now();
    let pred = model.predict(&pa, &lat, &inputs, exec)?.remove(0);
    let elapsed = start.elapsed();
    let (rows, cols) = mcfg.out_res;
    write_raw(&cfg.out.join("pred.raw"), &RawHeader::image(rows, cols), &pred)?;
    write_png(&cfg.out.join("pred.png"), rows, cols, &pred)?;
    if let Some(vol) = &truth {
        let gt = extract_slice(vol, &spec, mcfg.feature_res, cfg.crop_min)?.image;
        let err: Vec<f32> = pred.iter().zip(&gt).map(|(p, t)| (p - t).abs()).collect();
        write_raw(&cfg.out.join("truth.raw"), &RawHeader::image(rows, cols), &gt)?;
        write_png_panels(&cfg.out.join("panel.png"), rows, cols, &[&pred, &gt, &err])?;
        let score = SliceScore {
            psnr_db: psnr(&pred, &gt, 1.0)?,
            ssim: ssim(&pred, &gt, rows, cols, 1.0)?,
        };
        println!("psnr {:.3} dB, ssim {:.4}", score.psnr_db, score.ssim);
        let json = serde_json::to_string_pretty(&score).expect("score serializes");
        write_text(&cfg.out.join("metrics.json"), &(json + "\n"))?;
    }
    println!("reconstructed {} slice {} in {elapsed:.1?}", cfg.plane.name(), cfg.index);
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCmd {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Split,
    /// Evenly spaced slices per volume; `None` evaluates all.
    pub slices_per_volume: Option<usize>,
    pub crop_suite: bool,
    pub batch: usize,
    pub out: PathBuf,
}

impl Default for EvalCmd {
    fn default() -> Self {
        EvalCmd {
            checkpoint: None,
            data: None,
            split: Split::Test,
            slices_per_volume: None,
            crop_suite: false,
            batch: 16,
            out: PathBuf::from("eval.csv"),
        }
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn eval(a: EvalArgs, exec: Exec) -> Result<()> {
    let mut cfg: EvalCmd = load_config(a.config.as_deref())?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if let Some(s) = &a.split {
        cfg.split = parse_field::<EvalCmd, Split>(s)?;
    }
    if let Some(v) = a.slices_per_volume {
        cfg.slices_per_volume = (v > 0).then_some(v);
    }
    if a.crop_suite {
        cfg.crop_suite = true;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    let ckpt = required::<EvalCmd, _>(cfg.checkpoint.clone(), "checkpoint")?;
    let data = required::<EvalCmd, _>(cfg.data.clone(), "data")?;
    let model = Model::<f32>::load(&ckpt)?;
    let m = Manifest::load(&data)?;
    let samples = m.load_split(&data, cfg.split)?;
    write_resolved(&parent_dir(&cfg.out), &cfg)?;
    let opts = EvalOptions {
        slices_per_volume: cfg.slices_per_volume,
        crop_suite: cfg.crop_suite,
        batch: cfg.batch,
        exec,
    };
    let rep = evaluate(&model, &m.rig, &samples, cfg.split, &opts)?;
    rep.write_csv(&cfg.out)?;
    let modes: &[CropMode] = if cfg.crop_suite { &CropMode::SUITE } else { &[CropMode::Full] };
    for &mode in modes {
        for plane in ["axial", "coronal", "sagittal", "all"] {
            if let Some(r) = rep.aggregate(plane, mode) {
                println!("{:<5} {:<8} psnr {:.3} ssim {:.4}", mode.name(), plane, r.psnr_db, r.ssim);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- ablate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateCmd {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Base settings shared by every grid cell.
    pub train: TrainConfig,
    /// Evenly spaced test slices per volume; `None` evaluates all.
    pub eval_slices_per_volume: Option<usize>,
}

impl Default for AblateCmd {
    fn default() -> Self {
        AblateCmd {
            data: None,
            out: PathBuf::from("ablation"),
            train: TrainConfig::default(),
            eval_slices_per_volume: None,
        }
    }
}

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "projection,pe,global,test_psnr_db,test_ssim,final_train_loss,seconds";

pub fn ablate(a: AblateArgs, exec: Exec) -> Result<()> {
    let mut cfg: AblateCmd = load_config(a.config.as_deref())?;
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    apply_train_flags(&mut cfg.train, &a.flags, exec);
    if let Some(v) = a.eval_slices_per_volume {
        cfg.eval_slices_per_volume = (v > 0).then_some(v);
    }
    check_train::<AblateCmd>(&cfg.train)?;
    let data = required::<AblateCmd, _>(cfg.data.clone(), "data")?;
    let m = Manifest::load(&data)?;
    let tr = m.load_split(&data, Split::Train)?;
    let va = m.load_split(&data, Split::Val)?;
    let te = m.load_split(&data, Split::Test)?;
    write_resolved(&cfg.out, &cfg)?;

    let opts = EvalOptions {
        slices_per_volume: cfg.eval_slices_per_volume,
        exec,
        ..Default::default()
    };
    let mut csv = format!("{ABLATION_HEADER}\n");
    for projection in [Projection::Orthogonal, Projection::Perspective] {
        for use_pe in [false, true] {
            for use_global in [false, true] {
                let mut t = cfg.train.clone();
                t.model.projection = projection;
                t.model.use_pe = use_pe;
                t.model.use_global = use_global;
                let tag = format!("{}_pe{}_global{}", projection.name(), u8::from(use_pe), u8::from(use_global));
                let outputs = TrainOutputs { dir: cfg.out.join(&tag) };
                let start = Instant::now();
                let res = train(&tr, &va, &m.rig, &t, Some(&outputs))?;
                let rep = evaluate(&res.model, &m.rig, &te, Split::Test, &opts)?;
                rep.write_csv(&outputs.dir.join("eval.csv"))?;
                let all = rep
                    .aggregate("all", CropMode::Full)
                    .ok_or_else(|| biplanar_core::Error::Data("empty test split".into()))?;
                let last = res.history.last().map_or(f64::NAN, |e| e.train_loss);
                let secs = start.elapsed().as_secs_f64();
                println!("{tag}: psnr {:.3} ssim {:.4} ({secs:.0} s)", all.psnr_db, all.ssim);
                csv.push_str(&format!(
                    "{},{use_pe},{use_global},{},{},{last},{secs:.3}\n",
                    projection.name(),
                    all.psnr_db,
                    all.ssim
                ));
                // keep partial results if a later cell fails
                write_text(&cfg.out.join(ABLATION_CSV), &csv)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if !(a.tol > 0.0) || a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1 and --tol > 0".into()));
    }
    let start = Instant::now();
    let rows = selftest::run(0..a.seeds, a.tol)?;
    let mut worst: Vec<(&str, f64, bool)> = Vec::new();
    for r in &rows {
        match worst.iter_mut().find(|w| w.0 == r.name) {
            Some(w) => {
                w.1 = w.1.max(r.max_rel_error);
                w.2 &= r.passed;
            }
            None => worst.push((r.name, r.max_rel_error, r.passed)),
        }
    }
    for (name, err, ok) in &worst {
        println!("{:<18} max rel error {err:.3e}  {}", name, if *ok { "ok" } else { "FAIL" });
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} checks over {} seeds in {:.1?}", rows.len(), a.seeds, start.elapsed());
    if failed > 0 {
        return Err(CliError::GradCheck {
            failed,
            total: rows.len(),
        });
    }
    Ok(())
}
