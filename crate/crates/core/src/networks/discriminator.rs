use rand::Rng;
use sqgan_autodiff::{Binding, ConvGeometry, ParamStore, Var};

use super::blocks::{BatchNorm, Conv, LEAKY_SLOPE};

/// Patch discriminator: three strided conv, batch-norm, leaky ReLU blocks
/// and a final conv to one channel, averaged to one logit per sample.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: Vec<(Conv, BatchNorm)>,
    pub head: Conv,
}

impl Discriminator {
    pub fn new(name: &str, cin: usize, width: usize, rng: &mut impl Rng) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let down = ConvGeometry {
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let mut layers = Vec::new();
        let mut prev = cin;
        for i in 0..3 {
            let out = width << i;
            let conv = Conv::new(&mut store, &format!("{name}.conv{i}"), prev, out, down, false, rng);
            let bn = BatchNorm::new(&mut store, &format!("{name}.bn{i}"), out);
            layers.push((conv, bn));
            prev = out;
        }
        let head = Conv::same(&mut store, &format!("{name}.head"), prev, 1, 3, rng);
        (Self { layers, head }, store)
    }

    /// Patch logits `[B, 1, H/8, W/8]`.
    pub fn patches<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (conv, bn) in &self.layers {
            h = bn.forward(p, conv.forward(p, h)).leaky_relu(LEAKY_SLOPE);
        }
        self.head.forward(p, h)
    }

    /// One logit per sample, `[B, 1]`.
    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let patches = self.patches(p, x);
        let s = patches.shape();
        patches
            .reshape(&[s[0], s[1] * s[2] * s[3]])
            .mean_axis_keep(1)
    }
}
