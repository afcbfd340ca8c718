//! Slice reconstruction network.
//!
//! A shared CNN encoder turns each radiograph into a coarse local feature map
//! and a pooled global vector. For every point of the target slice grid the
//! local maps of both views are read at the point's detector projection; the
//! decoder sees, per point, both local vectors, both global vectors and a
//! sinusoidal encoding of the point's world position.

mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::ModelConfig;

use crate::autodiff::nn::{group_count, leaky_gain, Bound, Conv2dLayer, GroupNormLayer, SelfAttention};
use crate::autodiff::{checkpoint, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{BiplanarRig, Projection, View};
use crate::resample::{FeatureMap, SamplePlan};
use crate::volume::{slice_grid, CoordinateGrid, SliceSpec, VolumeGeometry};

/// Sinusoidal encoding of a point: the raw coordinates followed, for each
/// frequency `2^k * pi` with `k < freqs`, by the sines then the cosines of
/// the three coordinates. Length `6 * freqs + 3`.
pub fn positional_encoding(x: [f64; 3], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * freqs + 3);
    out.extend_from_slice(&x);
    for k in 0..freqs {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(x.iter().map(|&c| (w * c).sin()));
        out.extend(x.iter().map(|&c| (w * c).cos()));
    }
    out
}

/// Encodings of every grid point, channel-major `[6L+3, rows, cols]`.
pub fn encode_grid(grid: &CoordinateGrid, freqs: usize) -> Vec<f64> {
    let n = grid.len();
    let ch = 6 * freqs + 3;
    let mut out = vec![0.0; ch * n];
    for (i, &x) in grid.points.iter().enumerate() {
        for (c, v) in positional_encoding(x, freqs).into_iter().enumerate() {
            out[c * n + i] = v;
        }
    }
    out
}

/// Encoder output for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub local: FeatureMap,
    pub global_vec: Vec<f64>,
}

/// Graph handles of an encoded view: local `[1,C_l,H_l,W_l]`, global `[1,C_g]`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedView {
    pub local: Var,
    pub global: Var,
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv2dLayer,
    norm: GroupNormLayer,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv = Conv2dLayer::new(
            store,
            &format!("{name}.conv"),
            cin,
            cout,
            kernel,
            stride,
            kernel / 2,
            leaky_gain(cfg.leaky_slope),
            rng,
        );
        let norm = GroupNormLayer::new(store, &format!("{name}.norm"), cout, group_count(cout, cfg.max_groups))?;
        Ok(Block { conv, norm })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, slope: f64) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.leaky_relu(y, slope))
    }
}

/// Everything geometric a batch of slices needs: one sampling plan per view
/// (one group per slice) and, optionally, the positional encodings.
#[derive(Clone, Debug)]
pub struct SliceInputs {
    pub batch: usize,
    pub plans: [Arc<SamplePlan>; 2],
    /// `[batch, 6L+3, H_f, W_f]`.
    pub encoding: Option<Tensor<f64>>,
}

impl SliceInputs {
    pub fn new(cfg: &ModelConfig, rig: &BiplanarRig, grids: &[CoordinateGrid]) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::param("empty slice batch"));
        }
        for gr in grids {
            if (gr.rows, gr.cols) != cfg.feature_res {
                return Err(Error::param(format!(
                    "grid {}x{} does not match feature_res {:?}",
                    gr.rows, gr.cols, cfg.feature_res
                )));
            }
        }
        let src = (cfg.local_res, cfg.local_res);
        let plan = |view: View| -> Result<Arc<SamplePlan>> {
            let pose = rig.pose(view);
            let per: Vec<SamplePlan> = grids
                .iter()
                .map(|gr| match cfg.projection {
                    Projection::Perspective => SamplePlan::perspective(pose, gr, src, cfg.padding),
                    Projection::Orthogonal => SamplePlan::orthogonal(view, gr, src, cfg.padding),
                })
                .collect::<Result<_>>()?;
            Ok(Arc::new(SamplePlan::stack(&per)?))
        };
        let plans = [plan(View::Pa)?, plan(View::Lat)?];
        let encoding = if cfg.use_pe {
            let mut data = Vec::with_capacity(grids.len() * cfg.pe_channels() * grids[0].len());
            for gr in grids {
                data.extend(encode_grid(gr, cfg.pe_freqs));
            }
            Some(Tensor::new(&[grids.len(), cfg.pe_channels(), cfg.feature_res.0, cfg.feature_res.1], data)?)
        } else {
            None
        };
        Ok(SliceInputs {
            batch: grids.len(),
            plans,
            encoding,
        })
    }

    /// Builds the coordinate grids of `specs` and then the inputs.
    pub fn for_specs(
        cfg: &ModelConfig,
        rig: &BiplanarRig,
        geom: &VolumeGeometry,
        specs: &[SliceSpec],
        crop_min: (usize, usize),
    ) -> Result<Self> {
        let grids = specs
            .iter()
            .map(|s| slice_grid(geom, s, cfg.feature_res, crop_min))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cfg, rig, &grids)
    }
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub config_digest: String,
    pub format_version: u32,
}

/// Path of the JSON sidecar of checkpoint `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Vec<Block>,
    global_head: Block,
    stem: Block,
    attention: Option<SelfAttention>,
    upsample: Vec<Block>,
    head: Conv2dLayer,
}

impl<T: Real> Model<T> {
    /// Freshly initialized network; initialization depends only on
    /// `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let mut encoder = Vec::new();
        let mut cin = 1;
        let widths: Vec<usize> = config.encoder_widths.iter().copied().chain([config.c_local]).collect();
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(Block::new(&mut store, &format!("encoder.{i}"), cin, w, 3, 2, &config, &mut rng)?);
            cin = w;
        }
        let global_head = Block::new(&mut store, "encoder.global", cin, config.c_global, 3, 2, &config, &mut rng)?;
        let dw = &config.decoder_widths;
        let stem = Block::new(&mut store, "decoder.stem", config.decoder_in_channels(), dw[0], 1, 1, &config, &mut rng)?;
        let attention = config
            .use_attention
            .then(|| SelfAttention::new(&mut store, "decoder.attention", dw[0], &mut rng));
        let mut upsample = Vec::new();
        for i in 1..dw.len() {
            upsample.push(Block::new(&mut store, &format!("decoder.up{i}"), dw[i - 1], dw[i], 3, 1, &config, &mut rng)?);
        }
        let head = Conv2dLayer::new(&mut store, "decoder.head", dw[dw.len() - 1], 1, 1, 1, 0, 1.0, &mut rng);
        Ok(Model {
            config,
            params: store,
            encoder,
            global_head,
            stem,
            attention,
            upsample,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same network at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            global_head: self.global_head.clone(),
            stem: self.stem.clone(),
            attention: self.attention.clone(),
            upsample: self.upsample.clone(),
            head: self.head.clone(),
        }
    }

    /// Encodes an image node `[1,1,H,W]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<EncodedView> {
        let r = self.config.input_res;
        if g.shape(image) != [1, 1, r, r] {
            return Err(Error::param(format!(
                "encoder expects a [1, 1, {r}, {r}] image, got {:?}",
                g.shape(image)
            )));
        }
        let slope = self.config.leaky_slope;
        let mut x = image;
        for b in &self.encoder {
            x = b.forward(g, p, x, slope)?;
        }
        let local = x;
        let pooled = self.global_head.forward(g, p, local, slope)?;
        let global = g.spatial_mean(pooled)?;
        Ok(EncodedView { local, global })
    }

    /// Decodes the concatenated per-point inputs `[B, C_in, H_f, W_f]`
    /// into `[B, 1, H_out, W_out]` in `[0, 1]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Var> {
        let expect = self.config.decoder_in_channels();
        let got = g.shape(input).get(1).copied().unwrap_or(0);
        if got != expect {
            return Err(Error::param(format!(
                "decoder expects {expect} input channels, got {got}"
            )));
        }
        let slope = self.config.leaky_slope;
        let mut x = self.stem.forward(g, p, input, slope)?;
        if let Some(att) = &self.attention {
            x = att.forward(g, p, x)?.output;
        }
        for b in &self.upsample {
            x = g.nearest_upsample(x, 2)?;
            x = b.forward(g, p, x, slope)?;
        }
        let y = self.head.forward(g, p, x)?;
        Ok(g.sigmoid(y))
    }

    /// Full pipeline on graph nodes: both images `[1,1,H,W]` to
    /// predictions `[B,1,H_out,W_out]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, pa: Var, lat: Var, inputs: &SliceInputs) -> Result<Var> {
        let (fr, fc) = self.config.feature_res;
        let b = inputs.batch;
        let ep = self.encode_graph(g, p, pa)?;
        let el = self.encode_graph(g, p, lat)?;
        let mut parts = vec![
            g.resample(ep.local, inputs.plans[0].clone())?,
            g.resample(el.local, inputs.plans[1].clone())?,
        ];
        if self.config.use_global {
            parts.push(g.replicate(ep.global, b, fr, fc)?);
            parts.push(g.replicate(el.global, b, fr, fc)?);
        }
        if self.config.use_pe {
            let enc = inputs
                .encoding
                .as_ref()
                .ok_or_else(|| Error::param("positional encoding enabled but not provided"))?;
            parts.push(g.constant(enc.cast()));
        }
        let input = g.concat_channels(&parts)?;
        self.decode_graph(g, p, input)
    }

    fn image_tensor(&self, image: &[f32]) -> Result<Tensor<T>> {
        let r = self.config.input_res;
        if image.len() != r * r {
            return Err(Error::param(format!(
                "image has {} pixels, encoder expects {r}x{r}",
                image.len()
            )));
        }
        Ok(Tensor::new(&[1, 1, r, r], image.iter().map(|&v| T::of(v as f64)).collect())?)
    }

    /// Encodes one `input_res x input_res` image.
    pub fn encode(&self, image: &[f32]) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(self.image_tensor(image)?);
        let e = self.encode_graph(&mut g, &p, x)?;
        let l = self.config.local_res;
        let local = FeatureMap::new(
            self.config.c_local,
            l,
            l,
            g.value(e.local).data().iter().map(|v| v.f64()).collect(),
        )?;
        Ok(EncoderOutput {
            local,
            global_vec: g.value(e.global).data().iter().map(|v| v.f64()).collect(),
        })
    }

    /// Predicts the slices described by `inputs`; one row-major
    /// `H_out x W_out` image per slice.
    pub fn predict(&self, pa: &[f32], lat: &[f32], inputs: &SliceInputs, exec: Exec) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::with_exec(exec);
        let p = self.params.bind(&mut g, false);
        let a = g.constant(self.image_tensor(pa)?);
        let b = g.constant(self.image_tensor(lat)?);
        let y = self.forward_graph(&mut g, &p, a, b, inputs)?;
        let n = self.config.out_res.0 * self.config.out_res.1;
        Ok(g.value(y).data().chunks(n).map(|c| c.iter().map(|v| v.f64() as f32).collect()).collect())
    }

    /// Convenience wrapper building the slice inputs from specs.
    pub fn forward(
        &self,
        pa: &[f32],
        lat: &[f32],
        rig: &BiplanarRig,
        geom: &VolumeGeometry,
        specs: &[SliceSpec],
        crop_min: (usize, usize),
    ) -> Result<Vec<Vec<f32>>> {
        let inputs = SliceInputs::for_specs(&self.config, rig, geom, specs, crop_min)?;
        self.predict(pa, lat, &inputs, Exec::default())
    }

    /// Writes the parameters and a JSON sidecar with the config and digest.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            config_digest: self.config.digest(),
            format_version: checkpoint::VERSION,
        };
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&meta)?;
        std::fs::write(&side, json).map_err(|e| Error::file(&side, e))
    }

    /// Reads a checkpoint and its sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::file(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.config.digest() != meta.config_digest {
            return Err(Error::Versioning(format!(
                "{}: config digest {} does not match its config ({})",
                side.display(),
                meta.config_digest,
                meta.config.digest()
            )));
        }
        let mut model = Model::new(meta.config)?;
        model.params.assign(&checkpoint::load(path)?)?;
        Ok(model)
    }

    /// As [`load`](Self::load), additionally requiring a given config digest.
    pub fn load_expecting(path: &Path, digest: &str) -> Result<Self> {
        let model = Self::load(path)?;
        if model.config.digest() != digest {
            return Err(Error::Versioning(format!(
                "checkpoint config digest {} differs from expected {digest}",
                model.config.digest()
            )));
        }
        Ok(model)
    }
}
