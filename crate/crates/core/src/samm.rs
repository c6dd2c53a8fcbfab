//! Relevance scoring and top-N selection of latent vectors.

use rand::Rng;
use sqgan_autodiff::{Binding, ParamStore, Var};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::networks::blocks::{group_standardize, groups_for, Conv, Spade, LEAKY_SLOPE};

/// Scores for every latent position and the positions kept.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSelection {
    scores: Vec<f64>,
    selected: Vec<usize>,
    fraction: f64,
}

impl MaskSelection {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Kept positions in increasing order.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    /// Number of latent positions `K`.
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.scores.len()];
        for &k in &self.selected {
            f[k] = true;
        }
        f
    }
}

/// `max(1, floor(m K))`.
pub fn selection_count(fraction: f64, positions: usize) -> usize {
    ((fraction * positions as f64).floor() as usize).clamp(1, positions.max(1))
}

/// Keeps the `max(1, floor(m K))` highest scores; equal scores prefer the
/// lower position.
pub fn select_topn(scores: &[f64], fraction: f64) -> Result<MaskSelection> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::MaskFraction(fraction));
    }
    if scores.is_empty() {
        return Err(Error::Shape("no latent positions to select from".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("relevance scores"));
    }
    let n = selection_count(fraction, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected = order[..n].to_vec();
    selected.sort_unstable();
    Ok(MaskSelection {
        scores: scores.to_vec(),
        selected,
        fraction,
    })
}

/// `alpha_k z_k` at selected positions, zero elsewhere.
pub fn scale_selected(z: &LatentGrid, sel: &MaskSelection) -> Result<LatentGrid> {
    if sel.len() != z.len() {
        return Err(Error::Shape(format!(
            "selection over {} positions for a grid of {}",
            sel.len(),
            z.len()
        )));
    }
    let (h, w) = z.dims();
    let mut out = LatentGrid::zeros(z.channels(), h, w);
    for &k in &sel.selected {
        let v = z.vector(k).mapv(|x| x * sel.scores[k]);
        out.set_vector(k, v.view());
    }
    Ok(out)
}

/// Normalization inside a scorer block.
#[derive(Clone, Debug)]
pub enum ScorerNorm {
    /// Conditioned on the segmentation map.
    Spade(Spade),
    /// Parameter-free normalization of the unconditioned baseline.
    Plain { groups: usize },
}

impl ScorerNorm {
    fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>, seg: Var<'t>) -> Var<'t> {
        match self {
            ScorerNorm::Spade(s) => s.forward(p, x, seg),
            ScorerNorm::Plain { groups } => group_standardize(x, *groups),
        }
    }
}

/// Relevance scorer: two blocks of conv, normalization and leaky ReLU
/// narrowing `C -> hidden -> 1`, then a sigmoid.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub conv1: Conv,
    pub norm1: ScorerNorm,
    pub conv2: Conv,
    pub norm2: ScorerNorm,
}

impl Scorer {
    /// Semantic-conditioned scorer.
    pub fn samm(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        num_classes: usize,
        spade_hidden: usize,
        max_groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv::same(store, &format!("{name}.conv1"), channels, hidden, 3, rng);
        let conv2 = Conv::same(store, &format!("{name}.conv2"), hidden, 1, 3, rng);
        let norm1 = ScorerNorm::Spade(Spade::new(
            store,
            &format!("{name}.norm1"),
            hidden,
            num_classes,
            spade_hidden,
            max_groups,
            rng,
        ));
        let norm2 = ScorerNorm::Spade(Spade::new(
            store,
            &format!("{name}.norm2"),
            1,
            num_classes,
            spade_hidden,
            max_groups,
            rng,
        ));
        Self {
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }

    /// Unconditioned baseline with the same trunk.
    pub fn amm(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        max_groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv::same(store, &format!("{name}.conv1"), channels, hidden, 3, rng),
            norm1: ScorerNorm::Plain {
                groups: groups_for(hidden, max_groups),
            },
            conv2: Conv::same(store, &format!("{name}.conv2"), hidden, 1, 3, rng),
            norm2: ScorerNorm::Plain { groups: 1 },
        }
    }

    /// `z` is `[B, C, h, w]`, `seg` the one-hot map at any multiple of that
    /// resolution. Returns `[B, 1, h, w]` scores in `[0, 1]`.
    pub fn forward<'t>(&self, p: &Binding<'t, '_>, z: Var<'t>, seg: Var<'t>) -> Var<'t> {
        let h = self.conv1.forward(p, z);
        let h = self.norm1.forward(p, h, seg).leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(p, h);
        self.norm2.forward(p, h, seg).leaky_relu(LEAKY_SLOPE).sigmoid()
    }
}
