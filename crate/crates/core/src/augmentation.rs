//! Copy-paste of small relevant objects between images of a mini-batch,
//! plus crop, rotation and color jitter.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::semantic_map::{ClassTable, LabelMap};

/// Classes harvested for pasting.
pub const PASTE_CLASSES: [&str; 2] = ["traffic sign", "traffic light"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub paste: bool,
    /// Upper end of the uniform number of pastes per image.
    pub max_pastes: usize,
    /// Placement attempts per patch.
    pub attempts: usize,
    /// Smallest crop side relative to the image.
    pub min_crop: f64,
    pub max_rotation_deg: f64,
    /// Brightness and contrast factors are drawn from `1 ± jitter`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            paste: true,
            max_pastes: 25,
            attempts: 50,
            min_crop: 0.8,
            max_rotation_deg: 5.0,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_crop > 0.0 && self.min_crop <= 1.0) {
            return Err(Error::Config(format!("min_crop {} not in (0, 1]", self.min_crop)));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg < 90.0) {
            return Err(Error::Config(format!("max_rotation_deg {} not in [0, 90)", self.max_rotation_deg)));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} not in [0, 1)", self.jitter)));
        }
        Ok(())
    }
}

/// One connected object cut out of a batch image.
#[derive(Clone, Debug, PartialEq)]
pub struct PastePatch {
    /// `3 × h × w` crop of the bounding box.
    pub pixels: Array3<f64>,
    /// Object pixels within the bounding box.
    pub mask: Array2<bool>,
    pub class_id: u8,
    /// Position of the source image in the batch.
    pub source: usize,
}

impl PastePatch {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn paste_class_ids(table: &ClassTable) -> Vec<u8> {
    PASTE_CLASSES
        .iter()
        .filter_map(|n| table.id_of(n))
        .map(|id| id as u8)
        .collect()
}

/// One patch per 4-connected component of each class in `classes`, scanned
/// image by image in raster order.
pub fn harvest(batch: &[(&Image, &LabelMap)], classes: &[u8]) -> Vec<PastePatch> {
    let mut patches = Vec::new();
    for (source, (x, labels)) in batch.iter().enumerate() {
        let (h, w) = labels.dims();
        let mut seen = vec![false; h * w];
        for start in 0..h * w {
            let class = labels.labels()[start];
            if seen[start] || !classes.contains(&class) {
                continue;
            }
            let mut component = vec![start];
            seen[start] = true;
            let mut head = 0;
            while head < component.len() {
                let p = component[head];
                head += 1;
                let (i, j) = (p / w, p % w);
                let neighbours = [
                    (i > 0).then(|| p - w),
                    (i + 1 < h).then(|| p + w),
                    (j > 0).then(|| p - 1),
                    (j + 1 < w).then(|| p + 1),
                ];
                for q in neighbours.into_iter().flatten() {
                    if !seen[q] && labels.labels()[q] == class {
                        seen[q] = true;
                        component.push(q);
                    }
                }
            }
            let rows = component.iter().map(|p| p / w);
            let cols = component.iter().map(|p| p % w);
            let (top, bottom) = (rows.clone().min().unwrap(), rows.max().unwrap());
            let (left, right) = (cols.clone().min().unwrap(), cols.max().unwrap());
            let (ph, pw) = (bottom - top + 1, right - left + 1);
            let mut mask = Array2::from_elem((ph, pw), false);
            for p in &component {
                mask[[p / w - top, p % w - left]] = true;
            }
            let pixels = Array3::from_shape_fn((3, ph, pw), |(c, i, j)| x[[c, top + i, left + j]]);
            patches.push(PastePatch {
                pixels,
                mask,
                class_id: class,
                source,
            });
        }
    }
    patches
}

/// Pastes `n ~ U{0..=max_pastes}` patches, each drawn uniformly from
/// `patches`, at positions whose footprint avoids every relevant-class
/// pixel. Patches that find no site within `attempts` tries are skipped.
/// Returns the edited pair and the number of patches placed.
pub fn paste(
    x: &Image,
    labels: &LabelMap,
    patches: &[PastePatch],
    table: &ClassTable,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Image, LabelMap, usize) {
    let mut x = x.clone();
    let mut labels = labels.clone();
    let n = rng.gen_range(0..=cfg.max_pastes);
    if patches.is_empty() {
        return (x, labels, 0);
    }
    let relevant = table.relevant_mask();
    let is_relevant = |c: u8| relevant.get(c as usize).copied().unwrap_or(false);
    let (h, w) = labels.dims();
    let mut placed = 0;
    for _ in 0..n {
        let patch = &patches[rng.gen_range(0..patches.len())];
        let (ph, pw) = patch.mask.dim();
        if ph > h || pw > w {
            continue;
        }
        for _ in 0..cfg.attempts {
            let top = rng.gen_range(0..=h - ph);
            let left = rng.gen_range(0..=w - pw);
            let free = patch
                .mask
                .indexed_iter()
                .all(|((i, j), &m)| !m || !is_relevant(labels.get(top + i, left + j)));
            if free {
                for ((i, j), &m) in patch.mask.indexed_iter() {
                    if m {
                        labels.set(top + i, left + j, patch.class_id);
                        for c in 0..3 {
                            x[[c, top + i, left + j]] = patch.pixels[[c, i, j]];
                        }
                    }
                }
                placed += 1;
                break;
            }
        }
    }
    (x, labels, placed)
}

/// Random crop (rescaled back to full size) and small rotation as one
/// inverse warp: bilinear for the image, nearest for labels, edges
/// replicated.
pub fn crop_rotate(x: &Image, labels: &LabelMap, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Image, LabelMap) {
    let (h, w) = labels.dims();
    let scale = rng.gen_range(cfg.min_crop..=1.0);
    let max_dy = (1.0 - scale) * h as f64 / 2.0;
    let max_dx = (1.0 - scale) * w as f64 / 2.0;
    let dy = rng.gen_range(-max_dy..=max_dy);
    let dx = rng.gen_range(-max_dx..=max_dx);
    let angle = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
    let (sin, cos) = angle.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let source = |i: usize, j: usize| {
        let (u, v) = (i as f64 - cy, j as f64 - cx);
        let sy = cy + dy + scale * (cos * u - sin * v);
        let sx = cx + dx + scale * (sin * u + cos * v);
        (sy.clamp(0.0, h as f64 - 1.0), sx.clamp(0.0, w as f64 - 1.0))
    };
    let out_labels = LabelMap::from_fn(h, w, |i, j| {
        let (sy, sx) = source(i, j);
        labels.get(sy.round() as usize, sx.round() as usize)
    });
    let mut out = Array3::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let (sy, sx) = source(i, j);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for c in 0..3 {
                let top = x[[c, y0, x0]] * (1.0 - fx) + x[[c, y0, x1]] * fx;
                let bottom = x[[c, y1, x0]] * (1.0 - fx) + x[[c, y1, x1]] * fx;
                out[[c, i, j]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    (out, out_labels)
}

/// Brightness and contrast jitter, clamped to `[0, 1]`.
pub fn color_jitter(x: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    let brightness = rng.gen_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
    let contrast = rng.gen_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
    let mean = x.mean().unwrap_or(0.0);
    x.mapv(|v| ((v - mean) * contrast + mean) * brightness).mapv(|v| v.clamp(0.0, 1.0))
}

/// Standard augmentations on every sample, then pasting of objects
/// harvested from the other images of the batch.
pub fn augment_batch(
    batch: &[(Image, LabelMap)],
    table: &ClassTable,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Vec<(Image, LabelMap)> {
    if !cfg.enabled {
        return batch.to_vec();
    }
    let warped: Vec<(Image, LabelMap)> = batch
        .iter()
        .map(|(x, s)| {
            let (x, s) = crop_rotate(x, s, cfg, rng);
            (color_jitter(&x, cfg, rng), s)
        })
        .collect();
    if !cfg.paste {
        return warped;
    }
    let refs: Vec<(&Image, &LabelMap)> = warped.iter().map(|(x, s)| (x, s)).collect();
    let patches = harvest(&refs, &paste_class_ids(table));
    warped
        .iter()
        .enumerate()
        .map(|(i, (x, s))| {
            let others: Vec<PastePatch> = patches.iter().filter(|p| p.source != i).cloned().collect();
            let (x, s, _) = paste(x, s, &others, table, cfg, rng);
            (x, s)
        })
        .collect()
}
