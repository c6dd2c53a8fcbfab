//! Codebooks, latent grids, nearest-codeword quantization and latent
//! reassembly with the placeholder codeword.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;
use sqgan_autodiff::Var;

use crate::error::{Error, Result};
use crate::samm::MaskSelection;

/// `C × H16 × W16` latent volume. Position `k` is `(k / W16, k % W16)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    values: Array3<f64>,
}

impl LatentGrid {
    pub fn new(values: Array3<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(Array3::zeros((channels, height, width)))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }

    /// Number of latent vectors.
    pub fn len(&self) -> usize {
        let (h, w) = self.dims();
        h * w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, k: usize) -> ArrayView1<'_, f64> {
        let w = self.dims().1;
        self.values.slice(ndarray::s![.., k / w, k % w])
    }

    pub fn set_vector(&mut self, k: usize, v: ArrayView1<'_, f64>) {
        let w = self.dims().1;
        self.values.slice_mut(ndarray::s![.., k / w, k % w]).assign(&v);
    }

    /// Row `k` holds latent vector `k`.
    pub fn tokens(&self) -> Array2<f64> {
        let (c, h, w) = self.values.dim();
        let mut t = Array2::zeros((h * w, c));
        for k in 0..h * w {
            t.row_mut(k).assign(&self.vector(k));
        }
        t
    }

    pub fn from_tokens(tokens: &Array2<f64>, height: usize, width: usize) -> Self {
        let mut g = Self::zeros(tokens.ncols(), height, width);
        for k in 0..height * width {
            g.set_vector(k, tokens.row(k));
        }
        g
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Grid of codeword indices, `-1` marking discarded positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexGrid {
    height: usize,
    width: usize,
    indices: Vec<i32>,
}

impl IndexGrid {
    pub const DISCARDED: i32 = -1;

    pub fn new(height: usize, width: usize, indices: Vec<i32>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::Shape(format!(
                "{} indices for a {height}x{width} grid",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i < -1) {
            return Err(Error::IndexOutOfRange {
                index: bad as i64,
                size: 0,
            });
        }
        Ok(Self {
            height,
            width,
            indices,
        })
    }

    pub fn discarded(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            indices: vec![Self::DISCARDED; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[i32] {
        &self.indices
    }

    /// Number of positions holding a codeword.
    pub fn count_selected(&self) -> usize {
        self.indices.iter().filter(|&&i| i >= 0).count()
    }

    pub fn check_range(&self, codebook_size: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= codebook_size as i32) {
            Some(&bad) => Err(Error::IndexOutOfRange {
                index: bad as i64,
                size: codebook_size,
            }),
            None => Ok(()),
        }
    }
}

/// `J` codewords of dimension `C` plus the placeholder codeword.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    codewords: Array2<f64>,
    placeholder: Array1<f64>,
}

impl Codebook {
    pub fn new(codewords: Array2<f64>, placeholder: Array1<f64>) -> Result<Self> {
        if codewords.nrows() < 2 {
            return Err(Error::Shape(format!(
                "codebook needs at least 2 codewords, got {}",
                codewords.nrows()
            )));
        }
        if placeholder.len() != codewords.ncols() {
            return Err(Error::Shape(format!(
                "placeholder of length {} for {}-dimensional codewords",
                placeholder.len(),
                codewords.ncols()
            )));
        }
        if !codewords.iter().chain(placeholder.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("codebook"));
        }
        Ok(Self {
            codewords,
            placeholder,
        })
    }

    /// Codewords and placeholder uniform in `[-1/J, 1/J]`.
    pub fn random(size: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let (codewords, placeholder) = init_codebook(size, dim, rng);
        Self::new(codewords, placeholder)
    }

    pub fn size(&self) -> usize {
        self.codewords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.ncols()
    }

    pub fn codewords(&self) -> &Array2<f64> {
        &self.codewords
    }

    pub fn placeholder(&self) -> &Array1<f64> {
        &self.placeholder
    }

    /// Index of the closest codeword in squared L2; ties go to the lower index.
    pub fn nearest(&self, v: ArrayView1<'_, f64>) -> usize {
        nearest_codeword(self.codewords.view(), v)
    }
}

/// Row of `codewords` closest to `v` in squared L2, lowest index on ties.
pub fn nearest_codeword(codewords: ArrayView2<'_, f64>, v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, cw) in codewords.rows().into_iter().enumerate() {
        let d: f64 = cw.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

pub(crate) fn init_codebook(size: usize, dim: usize, rng: &mut impl Rng) -> (Array2<f64>, Array1<f64>) {
    let bound = 1.0 / size as f64;
    let codewords = Array2::from_shape_simple_fn((size, dim), || rng.gen_range(-bound..=bound));
    let placeholder = Array1::from_shape_simple_fn(dim, || rng.gen_range(-bound..=bound));
    (codewords, placeholder)
}

/// Nearest-codeword indices for the selected positions of the score-scaled
/// grid; the returned grid holds the chosen codewords there and zeros elsewhere.
pub fn quantize(
    scaled: &LatentGrid,
    mask: &MaskSelection,
    book: &Codebook,
) -> Result<(IndexGrid, LatentGrid)> {
    if scaled.channels() != book.dim() {
        return Err(Error::Shape(format!(
            "latent has {} channels, codebook {}",
            scaled.channels(),
            book.dim()
        )));
    }
    if mask.len() != scaled.len() {
        return Err(Error::Shape(format!(
            "mask over {} positions for a grid of {}",
            mask.len(),
            scaled.len()
        )));
    }
    if !scaled.is_finite() {
        return Err(Error::NonFinite("latent grid"));
    }
    let (h, w) = scaled.dims();
    let mut indices = vec![IndexGrid::DISCARDED; h * w];
    let mut quantized = LatentGrid::zeros(scaled.channels(), h, w);
    for &k in mask.selected() {
        let j = book.nearest(scaled.vector(k));
        indices[k] = j as i32;
        quantized.set_vector(k, book.codewords.row(j));
    }
    Ok((IndexGrid::new(h, w, indices)?, quantized))
}

/// Mean over selected vectors of the squared distance between score-scaled
/// latents and their codewords. Both terms share this value; they differ only
/// in where the gradient goes (see [`vq_commit_terms`]).
pub fn vq_commit_losses(
    scaled: &LatentGrid,
    quantized: &LatentGrid,
    mask: &MaskSelection,
) -> Result<(f64, f64)> {
    if scaled.values.dim() != quantized.values.dim() {
        return Err(Error::Shape("scaled and quantized grids differ".into()));
    }
    let n = mask.selected().len().max(1) as f64;
    let total: f64 = mask
        .selected()
        .iter()
        .map(|&k| {
            scaled
                .vector(k)
                .iter()
                .zip(quantized.vector(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok((total / n, total / n))
}

/// Differentiable VQ and commitment terms. `scaled` and `quantized` are
/// `[T, C]` token rows and `mask` is a `[T, 1]` 0/1 constant. The VQ term
/// stops the gradient into the encoder, the commitment term into the codebook.
pub fn vq_commit_terms<'t>(
    scaled: Var<'t>,
    quantized: Var<'t>,
    mask: Var<'t>,
    selected: usize,
) -> (Var<'t>, Var<'t>) {
    let n = 1.0 / selected.max(1) as f64;
    let vq = scaled
        .detach()
        .sub(quantized)
        .square()
        .mul(mask)
        .sum()
        .scale(n);
    let commit = scaled
        .sub(quantized.detach())
        .square()
        .mul(mask)
        .sum()
        .scale(n);
    (vq, commit)
}

/// Codeword at each non-negative index, placeholder at each `-1`.
pub fn assemble_latent(indices: &IndexGrid, book: &Codebook) -> Result<LatentGrid> {
    indices.check_range(book.size())?;
    let (h, w) = indices.dims();
    let mut grid = LatentGrid::zeros(book.dim(), h, w);
    for (k, &i) in indices.indices().iter().enumerate() {
        if i < 0 {
            grid.set_vector(k, book.placeholder.view());
        } else {
            grid.set_vector(k, book.codewords.row(i as usize));
        }
    }
    Ok(grid)
}
