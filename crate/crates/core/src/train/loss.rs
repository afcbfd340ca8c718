//! Reconstruction objective: pixel MSE plus a feature-space distance under a
//! frozen, randomly initialized conv stack.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{leaky_gain, Bound, Conv2dLayer};
use crate::autodiff::{Graph, ParamStore, Real, Var};
use crate::error::{Error, Result};

/// Seed of the frozen feature network. Fixed so every run compares images
/// in the same feature space.
pub const FEATURE_NET_SEED: u64 = 0x5EED_F00D;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rec: 1.0, perceptual: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.rec >= 0.0 && self.perceptual >= 0.0) {
            return Err(Error::param("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Three stride-2 conv + leaky ReLU blocks (1 -> 8 -> 16 -> 32 channels)
/// whose weights never change.
#[derive(Clone, Debug)]
pub struct FeatureNet<T: Real> {
    params: ParamStore<T>,
    layers: Vec<Conv2dLayer>,
}

const FEATURE_SLOPE: f64 = 0.2;

impl<T: Real> FeatureNet<T> {
    pub fn new() -> Self {
        Self::with_seed(FEATURE_NET_SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = [1, 8, 16, 32];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2dLayer::new(&mut params, &format!("features.{i}"), w[0], w[1], 3, 2, 1, leaky_gain(FEATURE_SLOPE), &mut rng))
            .collect();
        FeatureNet { params, layers }
    }

    /// Binds the frozen weights into `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, false)
    }

    /// Activations of every block for images `[B,1,H,W]`.
    pub fn activations(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let y = layer.forward(g, p, h)?;
            h = g.leaky_relu(y, FEATURE_SLOPE);
            out.push(h);
        }
        Ok(out)
    }
}

impl<T: Real> Default for FeatureNet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Loss nodes of one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rec: Var,
    pub perceptual: Option<Var>,
}

/// `rec * MSE(pred, target) + perceptual * mean_k MSE(phi_k(pred), phi_k(target))`.
/// The feature term is skipped entirely when its weight is zero.
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    net: &FeatureNet<T>,
    net_params: &Bound,
    pred: Var,
    target: Var,
    weights: LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    if g.shape(pred) != g.shape(target) {
        return Err(Error::param(format!(
            "prediction {:?} and target {:?} differ in shape",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let rec = g.mse(pred, target)?;
    let mut total = g.scale(rec, weights.rec);
    let mut perceptual = None;
    if weights.perceptual > 0.0 {
        let fp = net.activations(g, net_params, pred)?;
        let ft = net.activations(g, net_params, target)?;
        let mut acc: Option<Var> = None;
        for (a, b) in fp.iter().zip(&ft) {
            let d = g.mse(*a, *b)?;
            acc = Some(match acc {
                Some(s) => g.add(s, d)?,
                None => d,
            });
        }
        let acc = acc.expect("feature net has layers");
        let p = g.scale(acc, 1.0 / fp.len() as f64);
        let weighted = g.scale(p, weights.perceptual);
        total = g.add(total, weighted)?;
        perceptual = Some(p);
    }
    Ok(LossTerms { total, rec, perceptual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn identical_images_zero_loss() {
        let net = FeatureNet::<f64>::new();
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let img = Tensor::from_f64(&[1, 1, 8, 8], &(0..64).map(|i| (i as f64 * 0.1).sin()).collect::<Vec<_>>()).unwrap();
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let l = loss_total(&mut g, &net, &p, a, b, LossWeights::default()).unwrap();
        assert_eq!(g.value(l.total).item(), 0.0);
    }

    #[test]
    fn hand_computed_mse() {
        let net = FeatureNet::<f64>::new();
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let a = g.constant(Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 0.0]).unwrap());
        let w = LossWeights { rec: 1.0, perceptual: 0.0 };
        let l = loss_total(&mut g, &net, &p, a, b, w).unwrap();
        assert_eq!(g.value(l.total).item(), 0.5);
        assert!(l.perceptual.is_none());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = FeatureNet::<f64>::new();
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let a = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 1, 4, 2]));
        assert!(loss_total(&mut g, &net, &p, a, b, LossWeights::default()).is_err());
        let bad = LossWeights { rec: -1.0, perceptual: 0.0 };
        assert!(loss_total(&mut g, &net, &p, a, a, bad).is_err());
    }

    #[test]
    fn feature_net_is_fixed() {
        let a = FeatureNet::<f32>::new();
        let b = FeatureNet::<f32>::new();
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x, y);
        }
    }
}
