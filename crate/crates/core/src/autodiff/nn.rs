//! Parameter storage and the layers built on the tape.

use rand::Rng;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

/// Graph handles of every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles supplied by the caller, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Adds every parameter to `g` as a leaf; `trainable` controls whether
    /// gradients flow into them.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(self.values.iter().map(|v| g.leaf(v.clone(), trainable)).collect())
    }

    /// Same parameters at another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces values from `(name, tensor)` records; names, order and shapes
    /// must match exactly.
    pub fn assign<U: Real>(&mut self, records: &[(String, Tensor<U>)]) -> Result<()> {
        if records.len() != self.values.len() {
            return Err(Error::Versioning(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.values.len()
            )));
        }
        for (i, (name, t)) in records.iter().enumerate() {
            if *name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::Versioning(format!(
                    "tensor {i}: checkpoint has {name} {:?}, model expects {} {:?}",
                    t.shape(),
                    self.names[i],
                    self.values[i].shape()
                )));
            }
        }
        for (dst, (_, t)) in self.values.iter_mut().zip(records) {
            *dst = t.cast();
        }
        Ok(())
    }
}

/// Gain of a leaky ReLU with negative slope `a`.
pub fn leaky_gain(a: f64) -> f64 {
    (2.0 / (1.0 + a * a)).sqrt()
}

/// Kaiming-uniform init: `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let b = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

/// 2D convolution with square kernel.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[cout, cin, kernel, kernel], fan_in, gain, rng),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2dLayer {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.pad)
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNormLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::param(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(GroupNormLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.group_norm(x, self.groups, p.var(self.gamma), p.var(self.beta))
    }
}

/// Largest number of positions attention is allowed to mix.
pub const MAX_ATTENTION_POSITIONS: usize = 4096;

/// Single-head self-attention over the spatial positions of `[N,C,H,W]`
/// with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Conv2dLayer,
    pub key: Conv2dLayer,
    pub value: Conv2dLayer,
    pub channels: usize,
}

/// Result of [`SelfAttention::forward`].
pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic `[N, HW, HW]` weights; row `i` mixes values into
    /// position `i`.
    pub weights: Var,
}

impl SelfAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mut proj = |part: &str| Conv2dLayer::new(store, &format!("{name}.{part}"), channels, channels, 1, 1, 0, 1.0, rng);
        let query = proj("query");
        let key = proj("key");
        let value = proj("value");
        SelfAttention {
            query,
            key,
            value,
            channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<AttentionOutput> {
        let shape = g.shape(x).to_vec();
        let [n, c, h, w] = match shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::param(format!("attention expects [N,C,H,W], got {shape:?}"))),
        };
        if c != self.channels {
            return Err(Error::param(format!(
                "attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        if hw > MAX_ATTENTION_POSITIONS {
            return Err(Error::param(format!(
                "attention over {hw} positions exceeds {MAX_ATTENTION_POSITIONS}"
            )));
        }
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let q = g.reshape(q, &[n, c, hw])?;
        let k = g.reshape(k, &[n, c, hw])?;
        let v = g.reshape(v, &[n, c, hw])?;
        let scores = g.bmm(q, k, true, false)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let weights = g.softmax_rows(scores)?;
        let mixed = g.bmm(v, weights, false, true)?;
        let mixed = g.reshape(mixed, &[n, c, h, w])?;
        let output = g.add(x, mixed)?;
        Ok(AttentionOutput { output, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_count_picks_largest_divisor() {
        assert_eq!(group_count(32, 8), 8);
        assert_eq!(group_count(12, 8), 6);
        assert_eq!(group_count(7, 8), 7);
        assert_eq!(group_count(11, 8), 1);
        assert_eq!(group_count(3, 8), 3);
    }

    #[test]
    fn kaiming_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = kaiming_uniform(&[16, 4, 3, 3], 36, leaky_gain(0.2), &mut rng);
        let b = leaky_gain(0.2) * (3.0f64 / 36.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        assert!(t.data().iter().any(|v| v.abs() > 0.5 * b));
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let att = SelfAttention::new(&mut store, "att", 4, &mut rng);
        *store.get_mut(att.value.weight) = Tensor::zeros(&[4, 4, 1, 1]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let x = g.constant(Tensor::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng));
        let out = att.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(out.output), g.value(x));
        for row in g.value(out.weights).data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_rejects_large_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let att = SelfAttention::new(&mut store, "att", 1, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 1, 65, 64]));
        assert!(att.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn assign_checks_layout() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::zeros(&[2]));
        let ok = vec![("a".to_string(), Tensor::<f32>::full(&[2], 1.5))];
        s.assign(&ok).unwrap();
        assert_eq!(s.values()[0].data(), &[1.5, 1.5]);
        let bad = vec![("a".to_string(), Tensor::<f32>::zeros(&[3]))];
        assert!(matches!(s.assign(&bad), Err(Error::Versioning(_))));
    }
}
