//! Images, paired datasets, batching and a synthetic street-scene generator.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqgan_autodiff::Array;

use crate::error::{Error, Result};
use crate::semantic_map::{encode_onehot, weight_map, ClassTable, LabelMap, SemanticMap, WeightKind};

/// RGB image `3 × H × W` with values in `[0, 1]`.
pub type Image = Array3<f64>;

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    }))
}

pub fn to_rgb8(x: &Image) -> image::RgbImage {
    let (_, h, w) = x.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |j, i| {
        let px = |c: usize| (x[[c, i as usize, j as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn write_image(x: &Image, path: &Path) -> Result<()> {
    to_rgb8(x)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Rounds through 8-bit storage, as a PNG round trip would.
pub fn quantize_8bit(x: &Image) -> Image {
    x.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub labels: LabelMap,
}

/// Image and label pairs stored as `NAME.png` and `NAME_labels.png`.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads every pair in `dir`, sorted by name.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
                continue;
            };
            if let Some(stem) = file.strip_suffix(".png") {
                if !stem.ends_with("_labels") {
                    names.push(stem.to_string());
                }
            }
        }
        names.sort();
        let samples = names
            .into_iter()
            .map(|name| {
                let image = read_image(&dir.join(format!("{name}.png")))?;
                let labels = LabelMap::read_png(&dir.join(format!("{name}_labels.png")))?;
                if labels.dims() != (image.dim().1, image.dim().2) {
                    return Err(Error::Shape(format!("{name}: image and labels differ in size")));
                }
                Ok(Sample { name, image, labels })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for s in &self.samples {
            let img = dir.join(format!("{}.png", s.name));
            let lab = dir.join(format!("{}_labels.png", s.name));
            write_image(&s.image, &img)?;
            s.labels.write_png(&lab)?;
            written.push(img);
        }
        Ok(written)
    }

    pub fn validate(&self, table: &ClassTable) -> Result<()> {
        for s in &self.samples {
            s.labels.validate(table)?;
        }
        Ok(())
    }
}

/// `[B, 3, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Array {
    let views: Vec<_> = images.into_iter().map(|x| x.view()).collect();
    ndarray::stack(Axis(0), &views).expect("images of one size").into_dyn()
}

/// `[B, n_c, H, W]` one-hot volumes.
pub fn stack_onehot<'a>(maps: impl IntoIterator<Item = &'a SemanticMap>) -> Array {
    let views: Vec<_> = maps.into_iter().map(|m| m.onehot().view()).collect();
    ndarray::stack(Axis(0), &views).expect("maps of one size").into_dyn()
}

/// `[B, 1, H, W]` per-pixel weights.
pub fn stack_weights<'a>(maps: impl IntoIterator<Item = &'a SemanticMap>, kind: WeightKind) -> Array {
    let grids: Vec<_> = maps.into_iter().map(|m| weight_map(m, kind)).collect();
    let views: Vec<_> = grids.iter().map(|g| g.view().insert_axis(Axis(0))).collect();
    ndarray::stack(Axis(0), &views).expect("maps of one size").into_dyn()
}

/// Splits a `[B, 3, H, W]` batch back into images.
pub fn unstack_images(batch: &Array) -> Vec<Image> {
    let b4: Array4<f64> = batch.clone().into_dimensionality().expect("NCHW batch");
    b4.outer_iter().map(|v| v.to_owned()).collect()
}

/// Per-sample argmax labels of `[B, n_c, H, W]` scores.
pub fn argmax_labels(scores: &Array) -> Result<Vec<LabelMap>> {
    let b4: Array4<f64> = scores.clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?;
    b4.outer_iter()
        .map(|v| crate::semantic_map::decode_argmax(&v.to_owned()))
        .collect()
}

/// Procedural street scenes with the 19 Cityscapes classes: sky, buildings,
/// vegetation, road with sidewalks, cars, people, poles carrying signs and
/// lights.
pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> (Image, LabelMap) {
    let table = ClassTable::cityscapes();
    let id = |n: &str| table.id_of(n).expect("cityscapes class") as u8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let mut labels = LabelMap::filled(height, width, id("sky"));

    let horizon = (hf * rng.gen_range(0.35..0.5)) as usize;
    let fill = |l: &mut LabelMap, r0: usize, r1: usize, c0: usize, c1: usize, class: u8| {
        for r in r0.min(height)..r1.min(height) {
            for c in c0.min(width)..c1.min(width) {
                l.set(r, c, class);
            }
        }
    };

    // Buildings and vegetation above the horizon.
    let mut c = 0;
    while c < width {
        let bw = rng.gen_range(width / 10..width / 4).max(2);
        let top = (horizon as f64 * rng.gen_range(0.1..0.8)) as usize;
        let class = match rng.gen_range(0..10) {
            0..=5 => id("building"),
            6 | 7 => id("vegetation"),
            8 => id("wall"),
            _ => id("fence"),
        };
        fill(&mut labels, top, horizon, c, c + bw, class);
        c += bw;
    }
    // Road, sidewalks and terrain strips below the horizon.
    fill(&mut labels, horizon, height, 0, width, id("road"));
    for r in horizon..height {
        let t = (r - horizon) as f64 / (hf - horizon as f64).max(1.0);
        let walk = ((0.1 + 0.15 * t) * wf) as usize;
        fill(&mut labels, r, r + 1, 0, walk, id("sidewalk"));
        fill(&mut labels, r, r + 1, width.saturating_sub(walk), width, id("sidewalk"));
    }
    if rng.gen_bool(0.5) {
        fill(&mut labels, horizon, horizon + height / 32 + 1, 0, width / 6, id("terrain"));
    }
    // Vehicles on the road.
    for _ in 0..rng.gen_range(1..4) {
        let vh = rng.gen_range(height / 10..height / 5).max(2);
        let vw = rng.gen_range(width / 12..width / 6).max(3);
        let r0 = rng.gen_range(horizon..height.saturating_sub(vh).max(horizon + 1));
        let c0 = rng.gen_range(width / 5..(4 * width / 5).saturating_sub(vw).max(width / 5 + 1));
        let class = match rng.gen_range(0..10) {
            0..=6 => id("car"),
            7 => id("truck"),
            8 => id("bus"),
            _ => id("motorcycle"),
        };
        fill(&mut labels, r0, r0 + vh, c0, c0 + vw, class);
    }
    // People on the sidewalks.
    for _ in 0..rng.gen_range(0..3) {
        let ph = (height / 6).max(6);
        let pw = (width / 32).max(3);
        let left = rng.gen_bool(0.5);
        let c0 = if left {
            rng.gen_range(0..width / 10 + 1)
        } else {
            width - width / 10 - 1 + rng.gen_range(0..width / 10 + 1).min(width / 10)
        };
        let r0 = rng.gen_range(horizon..height.saturating_sub(ph).max(horizon + 1));
        let class = if rng.gen_bool(0.8) { id("person") } else { id("rider") };
        fill(&mut labels, r0, r0 + ph, c0, c0 + pw, class);
        if class == id("rider") {
            fill(&mut labels, r0 + ph, r0 + ph + ph / 3, c0, c0 + 2 * pw, id("bicycle"));
        }
    }
    // Poles with signs and lights.
    for _ in 0..rng.gen_range(1..3) {
        let c0 = rng.gen_range(0..width.saturating_sub(2).max(1));
        let top = (horizon as f64 * rng.gen_range(0.3..0.8)) as usize;
        let bottom = (horizon + height / 8).min(height);
        let pole = (width / 64).max(2);
        fill(&mut labels, top, bottom, c0, c0 + pole, id("pole"));
        let sz = (height / 10).max(6);
        let class = if rng.gen_bool(0.5) { id("traffic sign") } else { id("traffic light") };
        let (sh, sw) = if class == id("traffic light") { (sz + sz / 2, sz / 2 + 1) } else { (sz, sz) };
        fill(&mut labels, top, top + sh, c0.saturating_sub(sw / 2), c0 + sw - sw / 2, class);
    }
    if rng.gen_bool(0.3) {
        let c0 = rng.gen_range(0..width / 2);
        fill(&mut labels, horizon.saturating_sub(height / 16 + 1), horizon, c0, c0 + width / 3, id("train"));
    }

    let shade: Vec<[f64; 3]> = table
        .classes()
        .iter()
        .map(|c| {
            let j: f64 = rng.gen_range(-0.08..0.08);
            [0, 1, 2].map(|k| (c.color[k] as f64 / 255.0 + j).clamp(0.0, 1.0))
        })
        .collect();
    let mut img = Array3::zeros((3, height, width));
    for r in 0..height {
        for c in 0..width {
            let cls = labels.get(r, c) as usize;
            let texture = 0.04 * (((r * 7 + c * 3) % 5) as f64 / 4.0 - 0.5);
            let noise: f64 = rng.gen_range(-0.02..0.02);
            let vertical = if cls == id("sky") as usize { 0.15 * (r as f64 / hf) } else { 0.0 };
            for k in 0..3 {
                img[[k, r, c]] = (shade[cls][k] + texture + noise + vertical).clamp(0.0, 1.0);
            }
        }
    }
    (quantize_8bit(&img), labels)
}

/// `count` synthetic scenes named `scene_000`, `scene_001`, ...
pub fn synthetic_dataset(count: usize, height: usize, width: usize, seed: u64) -> Dataset {
    let samples = (0..count)
        .map(|i| {
            let (image, labels) = synthetic_scene(height, width, seed.wrapping_add(i as u64 * 7919));
            Sample {
                name: format!("scene_{i:03}"),
                image,
                labels,
            }
        })
        .collect();
    Dataset { samples }
}

/// One-hot maps for every sample.
pub fn onehot_maps(data: &Dataset, table: &Arc<ClassTable>) -> Result<Vec<SemanticMap>> {
    data.samples
        .iter()
        .map(|s| encode_onehot(&s.labels, Arc::clone(table)))
        .collect()
}

/// Copies a `[3, H, W]` crop out of an image.
pub fn crop(x: &Image, top: usize, left: usize, height: usize, width: usize) -> Image {
    x.slice(s![.., top..top + height, left..left + width]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_scene_is_deterministic_and_valid() {
        let (a, la) = synthetic_scene(64, 128, 5);
        let (b, lb) = synthetic_scene(64, 128, 5);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        la.validate(&ClassTable::cityscapes()).unwrap();
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let classes: std::collections::HashSet<u8> = la.labels().iter().copied().collect();
        assert!(classes.len() >= 5, "{classes:?}");
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = synthetic_dataset(2, 32, 48, 1);
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.samples[1].labels, d.samples[1].labels);
        assert!(back.samples[0]
            .image
            .iter()
            .zip(d.samples[0].image.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
