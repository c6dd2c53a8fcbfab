use ndarray::{Array, Array2, Array3, Axis, IxDyn};
use rand::Rng;
use sqgan_autodiff::{Binding, ParamId, ParamStore, Var};

use super::blocks::{
    from_tokens, positional_encoding, to_tokens, Conv, GroupNorm, Norm, NormKind, ResBlock,
    TransformerLayer, LEAKY_SLOPE,
};
use super::{MaskModule, ModelConfig};
use crate::error::{Error, Result};
use crate::latent::{init_codebook, nearest_codeword, Codebook, IndexGrid};
use crate::samm::{select_topn, MaskSelection, Scorer};

/// Four stages of residual blocks and 2x average pooling, a 1x1 projection
/// to `C` channels, then token self-attention.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv_in: Conv,
    pub stages: Vec<Vec<ResBlock>>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv,
    pub attn: TransformerLayer,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.widths;
        let conv_in = Conv::same(store, &format!("{name}.conv_in"), cin, w[0], 3, rng);
        let mut stages = Vec::new();
        let mut prev = w[0];
        for (i, &width) in w.iter().enumerate() {
            let blocks = (0..cfg.res_blocks)
                .map(|j| {
                    let b = ResBlock::new(
                        store,
                        &format!("{name}.stage{i}.block{j}"),
                        prev,
                        width,
                        NormKind::Group,
                        cfg.max_groups,
                        rng,
                    );
                    prev = width;
                    b
                })
                .collect();
            stages.push(blocks);
        }
        let c = cfg.latent_channels;
        Self {
            conv_in,
            stages,
            norm_out: GroupNorm::new(store, &format!("{name}.norm_out"), prev, cfg.max_groups),
            conv_out: Conv::same(store, &format!("{name}.conv_out"), prev, c, 1, rng),
            attn: TransformerLayer::new(store, &format!("{name}.attn"), c, cfg.heads, 2 * c, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let mut h = self.conv_in.forward(p, x);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(p, h, None);
            }
            h = h.avg_pool(2);
        }
        let h = self.norm_out.forward(p, h).leaky_relu(LEAKY_SLOPE);
        let h = self.conv_out.forward(p, h);
        let (lh, lw) = (h.shape()[2], h.shape()[3]);
        from_tokens(self.attn.forward(p, to_tokens(h), None), lh, lw)
    }
}

/// Token self-attention, a 1x1 projection, then four stages of residual
/// blocks and 2x nearest upsampling. Returns pre-activation outputs.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub attn: TransformerLayer,
    pub conv_in: Conv,
    pub stages: Vec<Vec<ResBlock>>,
    pub norm_out: Norm,
    pub conv_out: Conv,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cout: usize,
        norm: NormKind,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let w = cfg.widths;
        let c = cfg.latent_channels;
        let attn = TransformerLayer::new(store, &format!("{name}.attn"), c, cfg.heads, 2 * c, rng);
        let conv_in = Conv::same(store, &format!("{name}.conv_in"), c, w[3], 1, rng);
        let mut stages = Vec::new();
        let mut prev = w[3];
        for i in (0..4).rev() {
            let blocks = (0..cfg.res_blocks)
                .map(|j| {
                    let b = ResBlock::new(
                        store,
                        &format!("{name}.stage{i}.block{j}"),
                        prev,
                        w[i],
                        norm,
                        cfg.max_groups,
                        rng,
                    );
                    prev = w[i];
                    b
                })
                .collect();
            stages.push(blocks);
        }
        Self {
            attn,
            conv_in,
            stages,
            norm_out: norm.build(store, &format!("{name}.norm_out"), prev, cfg.max_groups, rng),
            conv_out: Conv::same(store, &format!("{name}.conv_out"), prev, cout, 3, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, z: Var<'t>, seg: Option<Var<'t>>) -> Var<'t> {
        let (lh, lw) = (z.shape()[2], z.shape()[3]);
        let h = from_tokens(self.attn.forward(p, to_tokens(z), None), lh, lw);
        let mut h = self.conv_in.forward(p, h);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(p, h, seg);
            }
            h = h.upsample_nearest(2);
        }
        let h = self.norm_out.forward(p, h, seg).leaky_relu(LEAKY_SLOPE);
        self.conv_out.forward(p, h)
    }
}

/// Adaptive de-masking: transformer layers in which every query may attend
/// only to positions that carry a real codeword. Real positions therefore
/// never see placeholder inputs, while placeholders gather from real ones.
#[derive(Clone, Debug)]
pub struct Adm {
    pub layers: Vec<TransformerLayer>,
    pub position: Array2<f64>,
}

impl Adm {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.latent_channels;
        let (h, w) = cfg.latent_dims();
        Self {
            layers: (0..cfg.adm_layers)
                .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), c, cfg.heads, 2 * c, rng))
                .collect(),
            position: positional_encoding(h, w, c),
        }
    }

    /// `tokens` is `[B, K, C]`; `real[b][k]` marks positions holding codewords.
    pub fn forward<'t>(&self, p: &Binding<'t, '_>, tokens: Var<'t>, real: &[Vec<bool>]) -> Var<'t> {
        let shape = tokens.shape();
        let (b, k) = (shape[0], shape[1]);
        assert_eq!(real.len(), b, "one selection per sample");
        let mut bias = Array3::<f64>::zeros((b, k, k));
        for (i, flags) in real.iter().enumerate() {
            for (j, &keep) in flags.iter().enumerate() {
                if !keep {
                    bias.slice_mut(ndarray::s![i, .., j]).fill(f64::NEG_INFINITY);
                }
            }
        }
        let pe = tokens
            .tape()
            .constant(self.position.clone().insert_axis(Axis(0)).into_dyn());
        let mut h = tokens.add(pe);
        for layer in &self.layers {
            h = layer.forward(p, h, Some(&bias));
        }
        h
    }
}

/// A pipeline's codebook `[J, C]` and placeholder codeword `[1, C]`.
#[derive(Clone, Copy, Debug)]
pub struct VqParams {
    pub codebook: ParamId,
    pub placeholder: ParamId,
}

impl VqParams {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (book, ph) = init_codebook(cfg.codebook_size, cfg.latent_channels, rng);
        let c = cfg.latent_channels;
        Self {
            codebook: store.add(format!("{name}.codebook"), book.into_dyn()),
            placeholder: store.add(
                format!("{name}.placeholder"),
                ph.into_shape_with_order(IxDyn(&[1, c])).unwrap(),
            ),
        }
    }

    pub fn codebook(&self, store: &ParamStore) -> Codebook {
        let book = store
            .get(self.codebook)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let ph = store.get(self.placeholder).iter().copied().collect();
        Codebook::new(book, ph).expect("codebook parameters are consistent")
    }
}

/// Everything produced between the encoder and the decoder.
pub struct MaskedLatent<'t> {
    /// De-masked latent `[B, C, h, w]`, the decoder input.
    pub latent: Var<'t>,
    /// Relevance scores `[B, 1, h, w]`.
    pub scores: Var<'t>,
    /// Score-scaled tokens `[B*K, C]`, zero at discarded positions.
    pub scaled: Var<'t>,
    /// Assembled tokens `[B*K, C]` before de-masking.
    pub assembled: Var<'t>,
    pub vq_loss: Var<'t>,
    pub commit_loss: Var<'t>,
    pub selections: Vec<MaskSelection>,
    pub indices: Vec<IndexGrid>,
}

fn mask_columns(selections: &[Vec<bool>]) -> (Array<f64, IxDyn>, Array<f64, IxDyn>) {
    let flat: Vec<f64> = selections
        .iter()
        .flatten()
        .map(|&s| if s { 1.0 } else { 0.0 })
        .collect();
    let n = flat.len();
    let keep = Array::from_shape_vec(IxDyn(&[n, 1]), flat).unwrap();
    let drop = keep.mapv(|v| 1.0 - v);
    (keep, drop)
}

/// Score, select, scale, quantize with a straight-through gradient, fill in
/// placeholders and de-mask.
fn mask_quantize<'t>(
    p: &Binding<'t, '_>,
    vq: &VqParams,
    adm: &Adm,
    z: Var<'t>,
    scores: Var<'t>,
    fractions: &[f64],
) -> Result<MaskedLatent<'t>> {
    let shape = z.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let k = h * w;
    if fractions.len() != b {
        return Err(Error::Shape(format!("{} masking fractions for a batch of {b}", fractions.len())));
    }
    let score_values = scores.value();
    let score_values = score_values.as_standard_layout();
    let score_values = score_values.as_slice().unwrap();
    let selections = (0..b)
        .map(|i| select_topn(&score_values[i * k..(i + 1) * k], fractions[i]))
        .collect::<Result<Vec<_>>>()?;
    let flags: Vec<Vec<bool>> = selections.iter().map(MaskSelection::flags).collect();
    let (keep, drop) = mask_columns(&flags);
    let keep_c = z.tape().constant(keep.clone());
    let drop_c = z.tape().constant(drop);

    let tokens = to_tokens(z).reshape(&[b * k, c]);
    let scaled = tokens.mul(scores.reshape(&[b * k, 1])).mul(keep_c);

    let store = p.store();
    let book = store
        .get(vq.codebook)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let scaled_v = scaled.value();
    let scaled_v = scaled_v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut rows = vec![0usize; b * k];
    let mut indices = Vec::with_capacity(b);
    let mut total = 0;
    for (i, f) in flags.iter().enumerate() {
        let mut grid = vec![IndexGrid::DISCARDED; k];
        for (j, &keep) in f.iter().enumerate() {
            if keep {
                let r = nearest_codeword(book, scaled_v.row(i * k + j));
                rows[i * k + j] = r;
                grid[j] = r as i32;
                total += 1;
            }
        }
        indices.push(IndexGrid::new(h, w, grid)?);
    }
    if !scaled_v.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("scaled latent"));
    }

    let quantized = p.var(vq.codebook).gather_rows(&rows);
    let (vq_loss, commit_loss) = crate::latent::vq_commit_terms(scaled, quantized, keep_c, total);
    let forward_value = &*quantized.value() * &keep;
    let assembled = scaled
        .straight_through(forward_value)
        .add(p.var(vq.placeholder).mul(drop_c));
    let latent = adm.forward(p, assembled.reshape(&[b, k, c]), &flags);
    Ok(MaskedLatent {
        latent: from_tokens(latent, h, w),
        scores,
        scaled,
        assembled,
        vq_loss,
        commit_loss,
        selections,
        indices,
    })
}

/// Rebuilds the de-masked latent from transmitted indices; numerically
/// identical to the training-time path for the same indices.
fn demask_indices<'t>(
    p: &Binding<'t, '_>,
    vq: &VqParams,
    adm: &Adm,
    indices: &[IndexGrid],
    channels: usize,
) -> Result<Var<'t>> {
    let (h, w) = indices.first().map(IndexGrid::dims).unwrap_or((0, 0));
    let k = h * w;
    let size = p.store().get(vq.codebook).shape()[0];
    let mut rows = Vec::with_capacity(indices.len() * k);
    let mut flags = Vec::with_capacity(indices.len());
    for grid in indices {
        if grid.dims() != (h, w) {
            return Err(Error::Shape("index grids of different sizes".into()));
        }
        grid.check_range(size)?;
        if grid.count_selected() == 0 {
            return Err(Error::Shape("index grid without any codeword".into()));
        }
        rows.extend(grid.indices().iter().map(|&i| i.max(0) as usize));
        flags.push(grid.indices().iter().map(|&i| i >= 0).collect::<Vec<_>>());
    }
    let b = indices.len();
    let (keep, drop) = mask_columns(&flags);
    let tape = p.tape();
    let assembled = p
        .var(vq.codebook)
        .gather_rows(&rows)
        .mul(tape.constant(keep))
        .add(p.var(vq.placeholder).mul(tape.constant(drop)));
    let latent = adm.forward(p, assembled.reshape(&[b, k, channels]), &flags);
    Ok(from_tokens(latent, h, w))
}

fn build_scorer(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Scorer {
    match cfg.mask_module {
        MaskModule::Samm => Scorer::samm(
            store,
            name,
            cfg.latent_channels,
            cfg.scorer_hidden,
            cfg.num_classes,
            cfg.spade_hidden,
            cfg.max_groups,
            rng,
        ),
        MaskModule::Amm => Scorer::amm(store, name, cfg.latent_channels, cfg.scorer_hidden, cfg.max_groups, rng),
    }
}

/// Segmentation pipeline `G_s`: encoder, mask scorer, codebook, de-masking
/// and the segmentation decoder.
#[derive(Clone, Debug)]
pub struct SemanticGenerator {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub scorer: Scorer,
    pub vq: VqParams,
    pub adm: Adm,
    pub decoder: Decoder,
}

impl SemanticGenerator {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let nc = cfg.num_classes;
        let g = Self {
            config: cfg.clone(),
            encoder: Encoder::new(s, "gs.enc", nc, cfg, rng),
            scorer: build_scorer(s, "gs.samm", cfg, rng),
            vq: VqParams::new(s, "gs.vq", cfg, rng),
            adm: Adm::new(s, "gs.adm", cfg, rng),
            decoder: Decoder::new(s, "gs.dec", nc, NormKind::Group, cfg, rng),
        };
        Ok((g, store))
    }

    /// `[B, n_c, H, W]` one-hot maps to `[B, C, H/16, W/16]` latents.
    pub fn encode<'t>(&self, p: &Binding<'t, '_>, s: Var<'t>) -> Var<'t> {
        self.encoder.forward(p, s)
    }

    pub fn score<'t>(&self, p: &Binding<'t, '_>, z: Var<'t>, s: Var<'t>) -> Var<'t> {
        self.scorer.forward(p, z, s)
    }

    pub fn mask<'t>(&self, p: &Binding<'t, '_>, z: Var<'t>, s: Var<'t>, fractions: &[f64]) -> Result<MaskedLatent<'t>> {
        let scores = self.score(p, z, s);
        mask_quantize(p, &self.vq, &self.adm, z, scores, fractions)
    }

    pub fn demask<'t>(&self, p: &Binding<'t, '_>, indices: &[IndexGrid]) -> Result<Var<'t>> {
        demask_indices(p, &self.vq, &self.adm, indices, self.config.latent_channels)
    }

    /// Class logits `[B, n_c, H, W]`.
    pub fn decode<'t>(&self, p: &Binding<'t, '_>, latent: Var<'t>) -> Var<'t> {
        self.decoder.forward(p, latent, None)
    }

    pub fn forward<'t>(
        &self,
        p: &Binding<'t, '_>,
        s: Var<'t>,
        fractions: &[f64],
    ) -> Result<(Var<'t>, MaskedLatent<'t>)> {
        let z = self.encode(p, s);
        let masked = self.mask(p, z, s, fractions)?;
        Ok((self.decode(p, masked.latent), masked))
    }
}

/// Image pipeline `G_x`: SemPE and InputNet embeddings, encoder, mask scorer,
/// codebook, de-masking and the SPADE-conditioned image decoder.
#[derive(Clone, Debug)]
pub struct ImageGenerator {
    pub config: ModelConfig,
    pub sempe1: Conv,
    pub sempe2: Conv,
    pub input_net: Conv,
    pub encoder: Encoder,
    pub scorer: Scorer,
    pub vq: VqParams,
    pub adm: Adm,
    pub decoder: Decoder,
}

impl ImageGenerator {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (nc, e) = (cfg.num_classes, cfg.embed_channels);
        let spade = NormKind::Spade {
            num_classes: nc,
            hidden: cfg.spade_hidden,
        };
        let g = Self {
            config: cfg.clone(),
            sempe1: Conv::same(s, "gx.sempe1", nc, e, 3, rng),
            sempe2: Conv::same(s, "gx.sempe2", e, e, 3, rng),
            input_net: Conv::same(s, "gx.input", 3, e, 3, rng),
            encoder: Encoder::new(s, "gx.enc", e, cfg, rng),
            scorer: build_scorer(s, "gx.samm", cfg, rng),
            vq: VqParams::new(s, "gx.vq", cfg, rng),
            adm: Adm::new(s, "gx.adm", cfg, rng),
            decoder: Decoder::new(s, "gx.dec", 3, spade, cfg, rng),
        };
        Ok((g, store))
    }

    pub fn sempe<'t>(&self, p: &Binding<'t, '_>, s: Var<'t>) -> Var<'t> {
        let h = self.sempe1.forward(p, s).leaky_relu(LEAKY_SLOPE);
        self.sempe2.forward(p, h)
    }

    pub fn input_embedding<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.input_net.forward(p, x)
    }

    /// `InputNet(x) + SemPE(s)` through the encoder.
    pub fn encode<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>, s: Var<'t>) -> Var<'t> {
        let h = self.input_embedding(p, x).add(self.sempe(p, s));
        self.encoder.forward(p, h)
    }

    pub fn score<'t>(&self, p: &Binding<'t, '_>, z: Var<'t>, s: Var<'t>) -> Var<'t> {
        self.scorer.forward(p, z, s)
    }

    pub fn mask<'t>(&self, p: &Binding<'t, '_>, z: Var<'t>, s: Var<'t>, fractions: &[f64]) -> Result<MaskedLatent<'t>> {
        let scores = self.score(p, z, s);
        mask_quantize(p, &self.vq, &self.adm, z, scores, fractions)
    }

    pub fn demask<'t>(&self, p: &Binding<'t, '_>, indices: &[IndexGrid]) -> Result<Var<'t>> {
        demask_indices(p, &self.vq, &self.adm, indices, self.config.latent_channels)
    }

    /// Image `[B, 3, H, W]` in `[0, 1]`, conditioned on `seg` at every
    /// normalization layer.
    pub fn decode<'t>(&self, p: &Binding<'t, '_>, latent: Var<'t>, seg: Var<'t>) -> Var<'t> {
        self.decoder.forward(p, latent, Some(seg)).sigmoid()
    }

    /// `s` conditions the encoder and scorer, `s_cond` the decoder.
    pub fn forward<'t>(
        &self,
        p: &Binding<'t, '_>,
        x: Var<'t>,
        s: Var<'t>,
        s_cond: Var<'t>,
        fractions: &[f64],
    ) -> Result<(Var<'t>, MaskedLatent<'t>)> {
        let z = self.encode(p, x, s);
        let masked = self.mask(p, z, s, fractions)?;
        Ok((self.decode(p, masked.latent, s_cond), masked))
    }
}
