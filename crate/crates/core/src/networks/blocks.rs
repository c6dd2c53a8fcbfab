//! Layers shared by the encoders, decoders, mask scorers and discriminators.

use ndarray::{Array2, Array3, IxDyn};
use rand::Rng;
use sqgan_autodiff::{Array, Binding, ConvGeometry, ParamId, ParamStore, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual default for
/// convolution and linear layers.
fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geometry.kernel;
        let fan_in = cin * k * k;
        let weight = store.add(format!("{name}.w"), uniform(&[cout, cin, k, k], fan_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.b"), uniform(&[1, cout, 1, 1], fan_in, rng)));
        Self {
            weight,
            bias,
            geometry,
        }
    }

    pub fn same(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, cin, cout, ConvGeometry::same(kernel), true, rng)
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let y = x.conv2d(p.var(self.weight), self.geometry);
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => y,
        }
    }

    /// Zeroes weight and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).fill(0.0);
        }
    }
}

/// Affine map on the last axis of `[T, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.w"), uniform(&[din, dout], din, rng)),
            bias: store.add(format!("{name}.b"), uniform(&[1, dout], din, rng)),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.matmul(p.var(self.weight)).add(p.var(self.bias))
    }
}

/// Group normalization of NCHW without affine parameters.
pub fn group_standardize(x: Var<'_>, groups: usize) -> Var<'_> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    assert!(c % groups == 0, "{c} channels not divisible into {groups} groups");
    let per = x.value().len() / (n * groups);
    x.reshape(&[n * groups, per])
        .standardize_rows(NORM_EPS)
        .reshape(&shape)
}

/// Group count used for `channels`: the largest divisor not above `max_groups`.
pub fn groups_for(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, max_groups: usize) -> Self {
        Self {
            groups: groups_for(channels, max_groups),
            gamma: store.add(format!("{name}.gamma"), Array::ones(IxDyn(&[1, channels, 1, 1]))),
            beta: store.add(format!("{name}.beta"), Array::zeros(IxDyn(&[1, channels, 1, 1]))),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        group_standardize(x, self.groups)
            .mul(p.var(self.gamma))
            .add(p.var(self.beta))
    }
}

/// Batch normalization with batch statistics and an affine map.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array::ones(IxDyn(&[1, channels, 1, 1]))),
            beta: store.add(format!("{name}.beta"), Array::zeros(IxDyn(&[1, channels, 1, 1]))),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        x.permute(&[1, 0, 2, 3])
            .reshape(&[c, n * h * w])
            .standardize_rows(NORM_EPS)
            .reshape(&[c, n, h, w])
            .permute(&[1, 0, 2, 3])
            .mul(p.var(self.gamma))
            .add(p.var(self.beta))
    }
}

/// Spatially adaptive denormalization: parameter-free group normalization,
/// then a per-pixel scale and bias predicted from the segmentation map.
#[derive(Clone, Debug)]
pub struct Spade {
    pub groups: usize,
    pub shared: Conv,
    pub gamma: Conv,
    pub beta: Conv,
}

impl Spade {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        num_classes: usize,
        hidden: usize,
        max_groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            groups: groups_for(channels, max_groups),
            shared: Conv::same(store, &format!("{name}.shared"), num_classes, hidden, 3, rng),
            gamma: Conv::same(store, &format!("{name}.gamma"), hidden, channels, 3, rng),
            beta: Conv::same(store, &format!("{name}.beta"), hidden, channels, 3, rng),
        }
    }

    /// `seg` is the segmentation volume at any resolution that is an integer
    /// multiple of the feature resolution.
    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>, seg: Var<'t>) -> Var<'t> {
        let seg = resize_to(seg, x.shape()[2]);
        let h = self.shared.forward(p, seg).relu();
        let gamma = self.gamma.forward(p, h);
        let beta = self.beta.forward(p, h);
        group_standardize(x, self.groups)
            .mul(gamma.add_scalar(1.0))
            .add(beta)
    }

    pub fn zero_projection(&self, store: &mut ParamStore) {
        self.gamma.zero(store);
        self.beta.zero(store);
    }
}

/// Average-pools `seg` down to `height` rows.
pub fn resize_to(seg: Var<'_>, height: usize) -> Var<'_> {
    let sh = seg.shape()[2];
    assert!(sh % height == 0, "cannot resize {sh} rows to {height}");
    match sh / height {
        1 => seg,
        f => seg.avg_pool(f),
    }
}

#[derive(Clone, Debug)]
pub enum Norm {
    Group(GroupNorm),
    Spade(Spade),
}

impl Norm {
    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>, seg: Option<Var<'t>>) -> Var<'t> {
        match self {
            Norm::Group(n) => n.forward(p, x),
            Norm::Spade(n) => n.forward(p, x, seg.expect("SPADE normalization needs a segmentation map")),
        }
    }
}

/// How a block builds its normalization layers.
#[derive(Clone, Copy, Debug)]
pub enum NormKind {
    Group,
    Spade { num_classes: usize, hidden: usize },
}

impl NormKind {
    pub fn build(
        self,
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        max_groups: usize,
        rng: &mut impl Rng,
    ) -> Norm {
        match self {
            NormKind::Group => Norm::Group(GroupNorm::new(store, name, channels, max_groups)),
            NormKind::Spade {
                num_classes,
                hidden,
            } => Norm::Spade(Spade::new(store, name, channels, num_classes, hidden, max_groups, rng)),
        }
    }
}

/// Pre-activation residual block: norm, leaky ReLU, 3x3 conv, twice, plus a
/// 1x1 projection on the skip path when the width changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv,
    pub norm2: Norm,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        norm: NormKind,
        max_groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: norm.build(store, &format!("{name}.norm1"), cin, max_groups, rng),
            conv1: Conv::same(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            norm2: norm.build(store, &format!("{name}.norm2"), cout, max_groups, rng),
            conv2: Conv::same(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            skip: (cin != cout).then(|| {
                Conv::new(
                    store,
                    &format!("{name}.skip"),
                    cin,
                    cout,
                    ConvGeometry::same(1),
                    false,
                    rng,
                )
            }),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>, seg: Option<Var<'t>>) -> Var<'t> {
        let h = self.norm1.forward(p, x, seg).leaky_relu(LEAKY_SLOPE);
        let h = self.conv1.forward(p, h);
        let h = self.norm2.forward(p, h, seg).leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(p, h);
        let skip = match &self.skip {
            Some(s) => s.forward(p, x),
            None => x,
        };
        skip.add(h)
    }
}

/// Per-row layer normalization with affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array::ones(IxDyn(&[1, dim]))),
            beta: store.add(format!("{name}.beta"), Array::zeros(IxDyn(&[1, dim]))),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.standardize_rows(NORM_EPS)
            .mul(p.var(self.gamma))
            .add(p.var(self.beta))
    }
}

/// Multi-head scaled dot-product self-attention over `[B, T, D]` tokens.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "{dim} channels not divisible into {heads} heads");
        Self {
            heads,
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
        }
    }

    /// `bias` is added to the `[B, T, T]` attention logits, e.g. `-inf` to
    /// forbid a query-key pair.
    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>, bias: Option<&Array3<f64>>) -> Var<'t> {
        let shape = x.shape();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let nh = self.heads;
        let dh = d / nh;
        let rows = x.reshape(&[b * t, d]);
        let split = |v: Var<'t>| {
            v.reshape(&[b, t, nh, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * nh, t, dh])
        };
        let q = split(self.query.forward(p, rows));
        let k = split(self.key.forward(p, rows));
        let v = split(self.value.forward(p, rows));
        let mut logits = q.matmul(k.transpose_last()).scale(1.0 / (dh as f64).sqrt());
        if let Some(bias) = bias {
            assert_eq!(bias.dim(), (b, t, t), "attention bias shape");
            let mut full = Array3::<f64>::zeros((b * nh, t, t));
            for i in 0..b * nh {
                full.index_axis_mut(ndarray::Axis(0), i)
                    .assign(&bias.index_axis(ndarray::Axis(0), i / nh));
            }
            logits = logits.add(x.tape().constant(full.into_dyn()));
        }
        let heads = logits.softmax(2).matmul(v);
        let merged = heads
            .reshape(&[b, nh, t, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * t, d]);
        self.out.forward(p, merged).reshape(&[b, t, d])
    }
}

/// Pre-norm transformer layer: attention and a two-layer MLP, each residual.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>, bias: Option<&Array3<f64>>) -> Var<'t> {
        let shape = x.shape();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.norm1.forward(p, x.reshape(&[b * t, d])).reshape(&[b, t, d]);
        let x = x.add(self.attn.forward(p, h, bias));
        let rows = x.reshape(&[b * t, d]);
        let h = self.norm2.forward(p, rows);
        let h = self.fc2.forward(p, self.fc1.forward(p, h).leaky_relu(LEAKY_SLOPE));
        rows.add(h).reshape(&[b, t, d])
    }
}

/// `[B, C, H, W]` to `[B, H*W, C]` tokens, row-major positions.
pub fn to_tokens(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.permute(&[0, 2, 3, 1]).reshape(&[s[0], s[2] * s[3], s[1]])
}

pub fn from_tokens(x: Var<'_>, height: usize, width: usize) -> Var<'_> {
    let s = x.shape();
    x.reshape(&[s[0], height, width, s[2]]).permute(&[0, 3, 1, 2])
}

/// Fixed 2-D sinusoidal position code, `[H*W, C]`: the first half of the
/// channels encode the row, the second half the column.
pub fn positional_encoding(height: usize, width: usize, channels: usize) -> Array2<f64> {
    let half = channels / 2;
    let mut pe = Array2::zeros((height * width, channels));
    let code = |pos: usize, i: usize, n: usize| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / n.max(1) as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    for r in 0..height {
        for c in 0..width {
            let k = r * width + c;
            for i in 0..half {
                pe[[k, i]] = code(r, i, half);
            }
            for i in half..channels {
                pe[[k, i]] = code(c, i - half, channels - half);
            }
        }
    }
    pe
}
