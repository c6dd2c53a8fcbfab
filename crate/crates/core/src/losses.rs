//! Training objectives: weighted cross-entropy, weighted pixel loss,
//! feature-space perceptual distance, adversarial terms and the residual edit
//! that feeds the image discriminator.

use ndarray::{Array3, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sqgan_autodiff::ops::softplus_scalar;
use sqgan_autodiff::{Array, ConvGeometry, Tape, Var};

use crate::error::{Error, Result};
use crate::semantic_map::{weight_map, SemanticMap, WeightKind};

/// Multipliers of the adversarial, codebook and commitment terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gan: f64,
    pub vq: f64,
    pub commit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gan: 1.0,
            vq: 1.0,
            commit: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gan", self.gan), ("vq", self.vq), ("commit", self.commit)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name}={v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// `-Σ w_{s(h,w)} ln p_{s(h,w)}(h,w)` over all pixels, natural log. `probs`
/// is `n_c × H × W` with a probability distribution per pixel.
pub fn weighted_ce(s: &SemanticMap, probs: &Array3<f64>) -> Result<f64> {
    if probs.dim() != s.onehot().dim() {
        return Err(Error::Shape(format!(
            "scores {:?} vs map {:?}",
            probs.dim(),
            s.onehot().dim()
        )));
    }
    for lane in probs.lanes(Axis(0)) {
        let total: f64 = lane.sum();
        if lane.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!(
                "pixel distribution sums to {total}"
            )));
        }
    }
    let w = weight_map(s, WeightKind::Wce);
    let labels = s.labels();
    let (h, wd) = labels.dims();
    let mut loss = 0.0;
    for i in 0..h {
        for j in 0..wd {
            let weight = w[[i, j]];
            if weight != 0.0 {
                loss -= weight * probs[[labels.get(i, j) as usize, i, j]].ln();
            }
        }
    }
    Ok(loss)
}

/// Differentiable weighted cross-entropy from logits `[B, n_c, H, W]`.
/// `onehot` has the same shape and `weights` is `[B, 1, H, W]`. Summed over
/// pixels and divided by `norm`.
pub fn weighted_ce_logits<'t>(logits: Var<'t>, onehot: &Array, weights: &Array, norm: f64) -> Var<'t> {
    let tape = logits.tape();
    let target = tape.constant(onehot * weights);
    logits.log_softmax(1).mul(target).sum().scale(-1.0 / norm)
}

/// `(1/(H W)) Σ w ||x - x̂||²` for one `3 × H × W` image pair.
pub fn weighted_l2(x: &Array3<f64>, x_hat: &Array3<f64>, s: &SemanticMap) -> Result<f64> {
    if x.dim() != x_hat.dim() || (x.dim().1, x.dim().2) != s.dims() {
        return Err(Error::Shape("image and map sizes differ".into()));
    }
    let w = weight_map(s, WeightKind::L2);
    let (_, h, wd) = x.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..wd {
            let weight = w[[i, j]];
            if weight != 0.0 {
                let d: f64 = (0..x.dim().0).map(|c| (x[[c, i, j]] - x_hat[[c, i, j]]).powi(2)).sum();
                total += weight * d;
            }
        }
    }
    Ok(total / (h * wd) as f64)
}

/// Differentiable weighted L2 over a batch `[B, 3, H, W]`, averaged over
/// the batch. `weights` is `[B, 1, H, W]`.
pub fn weighted_l2_var<'t>(x: &Array, x_hat: Var<'t>, weights: &Array) -> Var<'t> {
    let s = x_hat.shape();
    let norm = (s[0] * s[2] * s[3]) as f64;
    let tape = x_hat.tape();
    x_hat
        .sub(tape.constant(x.clone()))
        .square()
        .mul(tape.constant(weights.clone()))
        .sum()
        .scale(1.0 / norm)
}

/// `x̂ + w_rel ⊙ (x − x̂)` with the per-pixel weight broadcast over channels.
pub fn residual_edit(x: &Array3<f64>, x_hat: &Array3<f64>, s: &SemanticMap) -> Result<Array3<f64>> {
    if x.dim() != x_hat.dim() || (x.dim().1, x.dim().2) != s.dims() {
        return Err(Error::Shape("image and map sizes differ".into()));
    }
    let w = weight_map(s, WeightKind::Rel);
    let mut out = x_hat.clone();
    for ((c, i, j), v) in out.indexed_iter_mut() {
        *v += w[[i, j]] * (x[[c, i, j]] - x_hat[[c, i, j]]);
    }
    Ok(out)
}

/// Batch form; `w_rel` is `[B, 1, H, W]`. The gradient reaches `x_hat`
/// scaled by `1 - w_rel`.
pub fn residual_edit_var<'t>(x: &Array, x_hat: Var<'t>, w_rel: &Array) -> Var<'t> {
    let tape = x_hat.tape();
    let w = tape.constant(w_rel.clone());
    let residual = tape.constant(x.clone()).sub(x_hat);
    x_hat.add(w.mul(residual))
}

/// `(L_disc, L_gen)`: the discriminator minimizes
/// `-ln σ(d_real) - ln(1 - σ(d_fake))`, the generator the non-saturating
/// `-ln σ(d_fake)`.
pub fn adversarial_terms(d_real: f64, d_fake: f64) -> (f64, f64) {
    (
        softplus_scalar(-d_real) + softplus_scalar(d_fake),
        softplus_scalar(-d_fake),
    )
}

/// Discriminator loss over `[B, 1]` logits, averaged over the batch.
pub fn discriminator_loss<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Var<'t> {
    d_real.neg().softplus().mean().add(d_fake.softplus().mean())
}

/// Non-saturating generator loss over `[B, 1]` logits.
pub fn generator_loss(d_fake: Var<'_>) -> Var<'_> {
    d_fake.neg().softplus().mean()
}

/// Fixed random convolutional feature extractor: four 3x3 layers with leaky
/// ReLU, the last three of stride 2.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    weights: Vec<Array>,
    layer_weights: Vec<f64>,
}

const FEATURE_WIDTHS: [usize; 4] = [8, 16, 32, 32];

impl FeatureNet {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = 3;
        let weights = FEATURE_WIDTHS
            .iter()
            .map(|&w| {
                let fan_in = prev * 9;
                let bound = (6.0 / fan_in as f64).sqrt();
                let a = Array::from_shape_simple_fn(IxDyn(&[w, prev, 3, 3]), || rng.gen_range(-bound..bound));
                prev = w;
                a
            })
            .collect();
        Self {
            weights,
            layer_weights: vec![1.0; FEATURE_WIDTHS.len()],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Total channels across layers.
    pub fn feature_dim(&self) -> usize {
        self.weights.iter().map(|w| w.shape()[0]).sum()
    }

    /// Activations after every layer for a `[B, 3, H, W]` batch.
    pub fn features<'t>(&self, x: Var<'t>) -> Vec<Var<'t>> {
        let tape = x.tape();
        let mut h = x;
        let mut out = Vec::with_capacity(self.weights.len());
        for (i, w) in self.weights.iter().enumerate() {
            let g = ConvGeometry {
                kernel: 3,
                stride: if i == 0 { 1 } else { 2 },
                pad: 1,
            };
            h = h.conv2d(tape.constant(w.clone()), g).leaky_relu(0.2);
            out.push(h);
        }
        out
    }

    /// Per-sample perceptual distance, averaged over the batch:
    /// `Σ_l (1/(H_l W_l)) Σ ||w_l (φ_l(x) − φ_l(x̂))||²`.
    pub fn distance<'t>(&self, x: Var<'t>, x_hat: Var<'t>) -> Var<'t> {
        let batch = x.shape()[0] as f64;
        let fx = self.features(x);
        let fy = self.features(x_hat);
        let mut total: Option<Var<'t>> = None;
        for ((a, b), &wl) in fx.into_iter().zip(fy).zip(&self.layer_weights) {
            let s = a.shape();
            let term = a.sub(b).scale(wl).square().sum().scale(1.0 / (s[2] * s[3]) as f64 / batch);
            total = Some(match total {
                Some(t) => t.add(term),
                None => term,
            });
        }
        total.expect("feature net has layers")
    }

    /// Globally pooled activations of every layer for one image, the
    /// embedding used for distribution distances.
    pub fn embedding(&self, image: &Array3<f64>) -> Vec<f64> {
        let tape = Tape::new();
        let x = tape.constant(image.clone().insert_axis(Axis(0)).into_dyn());
        self.features(x)
            .into_iter()
            .flat_map(|f| {
                let v = f.value();
                let c = v.shape()[1];
                let hw = (v.shape()[2] * v.shape()[3]) as f64;
                (0..c)
                    .map(|ch| v.index_axis(Axis(1), ch).sum() / hw)
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Perceptual distance between two single images.
pub fn perceptual(x: &Array3<f64>, x_hat: &Array3<f64>, net: &FeatureNet) -> Result<f64> {
    if x.dim() != x_hat.dim() || x.dim().0 != 3 {
        return Err(Error::Shape(format!("images {:?} and {:?}", x.dim(), x_hat.dim())));
    }
    let tape = Tape::new();
    let a = tape.constant(x.clone().insert_axis(Axis(0)).into_dyn());
    let b = tape.constant(x_hat.clone().insert_axis(Axis(0)).into_dyn());
    Ok(net.distance(a, b).scalar())
}
