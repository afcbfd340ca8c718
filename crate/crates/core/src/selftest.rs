//! Gradient self-test: one randomized finite-difference case per
//! differentiable op, the attention block, and the miniature network with its
//! training objective. Used by the test suite and the command-line
//! `gradcheck`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{Bound, SelfAttention};
use crate::autodiff::{grad_check, Graph, ParamStore, Tensor, Var, DEFAULT_STEP};
use crate::error::Result;
use crate::geometry::BiplanarRig;
use crate::model::{Model, ModelConfig, SliceInputs};
use crate::resample::{Padding, SamplePlan};
use crate::train::{loss_total, FeatureNet, LossWeights};
use crate::volume::{Crop, Plane, SliceSpec, VolumeGeometry};

/// Maximum relative error accepted at 64-bit precision.
pub const TOLERANCE: f64 = 1e-4;

pub type ScalarFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A scalar function of some tensors, for gradient checking.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: ScalarFn,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform values kept at least `gap` away from zero, so a finite-difference
/// step never straddles the leaky ReLU kink.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(shape, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -0.5 } else { 0.5 };
        }
    }
    t
}

/// Contracts `y` with a fixed random tensor so every output element carries
/// a distinct weight in the scalar.
fn contract(g: &mut Graph<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = g.constant(uniform(g.shape(y), rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn contracted(name: &'static str, inputs: Vec<Tensor<f64>>, seed: u64, op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        f: Box::new(move |g, v| {
            let y = op(g, v)?;
            let mut r = rng(seed ^ 0xC0DE);
            contract(g, y, &mut r)
        }),
    }
}

/// One randomized case per differentiable op.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut cases = Vec::new();

    // conv2d
    {
        let n = r.random_range(1..=2);
        let cin = r.random_range(1..=3);
        let cout = r.random_range(1..=3);
        let k = r.random_range(1..=3);
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        let h = r.random_range(k.max(3)..=6);
        let w = r.random_range(k.max(3)..=6);
        let with_bias = r.random_bool(0.7);
        let mut inputs = vec![uniform(&[n, cin, h, w], &mut r), uniform(&[cout, cin, k, k], &mut r)];
        if with_bias {
            inputs.push(uniform(&[cout], &mut r));
        }
        cases.push(contracted("conv2d", inputs, seed, move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)));
    }
    // group_norm
    {
        let groups = r.random_range(1..=3);
        let c = groups * r.random_range(1..=2);
        let shape = [r.random_range(1..=2), c, r.random_range(2..=4), r.random_range(2..=4)];
        let inputs = vec![uniform(&shape, &mut r), uniform(&[c], &mut r), uniform(&[c], &mut r)];
        cases.push(contracted("group_norm", inputs, seed, move |g, v| g.group_norm(v[0], groups, v[1], v[2])));
    }
    // leaky_relu
    {
        let inputs = vec![away_from_zero(&[2, 3, 4], 1e-3, &mut r)];
        cases.push(contracted("leaky_relu", inputs, seed, |g, v| Ok(g.leaky_relu(v[0], 0.2))));
    }
    // sigmoid
    {
        let inputs = vec![Tensor::uniform(&[3, 5], -4.0, 4.0, &mut r)];
        cases.push(contracted("sigmoid", inputs, seed, |g, v| Ok(g.sigmoid(v[0]))));
    }
    // nearest_upsample
    {
        let f = r.random_range(1..=3);
        let inputs = vec![uniform(&[2, 2, r.random_range(1..=3), r.random_range(1..=3)], &mut r)];
        cases.push(contracted("nearest_upsample", inputs, seed, move |g, v| g.nearest_upsample(v[0], f)));
    }
    // concat_channels
    {
        let (n, h, w) = (r.random_range(1..=2), 3, 2);
        let inputs = (0..3).map(|_| uniform(&[n, r.random_range(1..=3), h, w], &mut r)).collect();
        cases.push(contracted("concat_channels", inputs, seed, |g, v| g.concat_channels(v)));
    }
    // bmm, all transpose combinations
    {
        let (b, m, k, n) = (2, r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
        let ta = r.random_bool(0.5);
        let tb = r.random_bool(0.5);
        let sa = if ta { [b, k, m] } else { [b, m, k] };
        let sb = if tb { [b, n, k] } else { [b, k, n] };
        let inputs = vec![uniform(&sa, &mut r), uniform(&sb, &mut r)];
        cases.push(contracted("bmm", inputs, seed, move |g, v| g.bmm(v[0], v[1], ta, tb)));
    }
    // softmax_rows
    {
        let inputs = vec![Tensor::uniform(&[2, 3, 5], -3.0, 3.0, &mut r)];
        cases.push(contracted("softmax_rows", inputs, seed, |g, v| g.softmax_rows(v[0])));
    }
    // elementwise arithmetic and reshape
    {
        let inputs = vec![uniform(&[2, 6], &mut r), uniform(&[2, 6], &mut r)];
        cases.push(contracted("elementwise", inputs, seed, |g, v| {
            let p = g.mul(v[0], v[1])?;
            let d = g.sub(p, v[0])?;
            let s = g.add(d, v[1])?;
            let s = g.scale(s, -1.7);
            g.reshape(s, &[3, 4])
        }));
    }
    // mean and mse
    {
        let inputs = vec![uniform(&[4, 3], &mut r), uniform(&[4, 3], &mut r)];
        cases.push(GradCase {
            name: "mean_mse",
            inputs,
            f: Box::new(|g, v| {
                let m = g.mean(v[0]);
                let e = g.mse(v[0], v[1])?;
                g.add(m, e)
            }),
        });
    }
    // spatial_mean
    {
        let inputs = vec![uniform(&[2, 3, r.random_range(1..=4), r.random_range(1..=4)], &mut r)];
        cases.push(contracted("spatial_mean", inputs, seed, |g, v| g.spatial_mean(v[0])));
    }
    // replicate, shared and per-item
    {
        let batch = r.random_range(1..=3);
        let shared = r.random_bool(0.5);
        let s = if shared { 1 } else { batch };
        let inputs = vec![uniform(&[s, 3], &mut r)];
        cases.push(contracted("replicate", inputs, seed, move |g, v| g.replicate(v[0], batch, 2, 3)));
    }
    // resample through a random plan, including clamped and zero-padded taps
    {
        let (h, w, c) = (r.random_range(2..=5), r.random_range(2..=5), r.random_range(1..=3));
        let groups = r.random_range(1..=2);
        let padding = if r.random_bool(0.5) { Padding::Border } else { Padding::Zeros };
        let plans: Vec<SamplePlan> = (0..groups)
            .map(|_| {
                let pts: Vec<[f64; 2]> = (0..6).map(|_| [r.random_range(-1.3..1.3), r.random_range(-1.3..1.3)]).collect();
                SamplePlan::from_points(&pts, (2, 3), (h, w), padding).unwrap()
            })
            .collect();
        let plan = Arc::new(SamplePlan::stack(&plans).unwrap());
        let inputs = vec![uniform(&[1, c, h, w], &mut r)];
        cases.push(contracted("resample", inputs, seed, move |g, v| g.resample(v[0], plan.clone())));
    }
    cases.push(attention_case(seed));
    cases
}

/// Self-attention with its projection weights as inputs.
pub fn attention_case(seed: u64) -> GradCase {
    let mut r = rng(seed ^ 0xA77);
    let c = r.random_range(1..=3);
    let mut store = ParamStore::<f64>::new();
    let att = SelfAttention::new(&mut store, "att", c, &mut r);
    // Non-zero biases so their gradients are exercised too.
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = uniform(&shape, &mut r);
    }
    let mut inputs = vec![uniform(&[r.random_range(1..=2), c, r.random_range(1..=3), r.random_range(2..=3)], &mut r)];
    inputs.extend(store.values().iter().cloned());
    contracted("self_attention", inputs, seed, move |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        Ok(att.forward(g, &p, v[0])?.output)
    })
}

/// Miniature model + full loss, with every network parameter as an input.
pub fn pipeline_case(seed: u64) -> GradCase {
    let mut r = rng(seed ^ 0x919E);
    let cfg = ModelConfig {
        init_seed: seed,
        ..ModelConfig::miniature()
    };
    let model = Model::<f64>::new(cfg.clone()).unwrap();
    let mut params = model.params().clone();
    // Randomize norm scales/shifts and biases away from their trivial init.
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        if name.ends_with("bias") || name.ends_with("beta") || name.ends_with("gamma") {
            let shape = params.get(id).shape().to_vec();
            let t = Tensor::uniform(&shape, 0.2, 1.0, &mut r);
            *params.get_mut(id) = t;
        }
    }
    let geom = VolumeGeometry::new([16, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
    let plane = Plane::ALL[r.random_range(0..3)];
    let mut specs = vec![SliceSpec::new(plane, r.random_range(0..16), cfg.out_res)];
    specs.push(SliceSpec::new(Plane::Axial, 7, cfg.out_res).with_crop(Crop {
        row0: 2,
        col0: 5,
        rows: 9,
        cols: 8,
    }));
    let inputs_geo = SliceInputs::for_specs(&cfg, &BiplanarRig::default(), &geom, &specs, (4, 4)).unwrap();
    let res = cfg.input_res;
    let pa = Tensor::uniform(&[1, 1, res, res], 0.0, 1.0, &mut r);
    let lat = Tensor::uniform(&[1, 1, res, res], 0.0, 1.0, &mut r);
    let target = Tensor::uniform(&[specs.len(), 1, cfg.out_res.0, cfg.out_res.1], 0.0, 1.0, &mut r);
    let net = FeatureNet::<f64>::new();
    GradCase {
        name: "model_forward_loss",
        inputs: params.values().to_vec(),
        f: Box::new(move |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let a = g.constant(pa.clone());
            let b = g.constant(lat.clone());
            let y = model.forward_graph(g, &p, a, b, &inputs_geo)?;
            let t = g.constant(target.clone());
            let np = net.bind(g);
            Ok(loss_total(g, &net, &np, y, t, LossWeights::default())?.total)
        }),
    }
}

/// Outcome of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Runs every op case and the network case for each seed.
pub fn run(seeds: impl IntoIterator<Item = u64>, tol: f64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut cases = op_cases(seed);
        cases.push(pipeline_case(seed));
        for case in cases {
            let r = grad_check(&case.f, &case.inputs, DEFAULT_STEP, tol)?;
            out.push(CaseResult {
                name: case.name,
                seed,
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                passed: r.passed,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes_every_case() {
        let rows = run([11], TOLERANCE).unwrap();
        assert_eq!(rows.len(), op_cases(11).len() + 1);
        assert!(rows.iter().all(|r| r.passed && r.checked > 0), "{rows:?}");
    }
}
