//! Segmentation maps: class tables, label grids, one-hot volumes and their
//! comparison metrics.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Which per-class weight column to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    /// Weighted cross-entropy on the segmentation pipeline.
    Wce,
    /// Weighted pixel loss on the image pipeline.
    L2,
    /// Share of the residual added back before the image discriminator.
    Rel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub is_relevant: bool,
    pub w_wce: f64,
    pub w_l2: f64,
    pub w_rel: f64,
    pub color: [u8; 3],
}

impl ClassInfo {
    pub fn weight(&self, kind: WeightKind) -> f64 {
        match kind {
            WeightKind::Wce => self.w_wce,
            WeightKind::L2 => self.w_l2,
            WeightKind::Rel => self.w_rel,
        }
    }
}

/// Per-class names, relevance flags and loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTable {
    classes: Vec<ClassInfo>,
}

const CITYSCAPES: [(&str, [u8; 3]); 19] = [
    ("road", [128, 64, 128]),
    ("sidewalk", [244, 35, 232]),
    ("building", [70, 70, 70]),
    ("wall", [102, 102, 156]),
    ("fence", [190, 153, 153]),
    ("pole", [153, 153, 153]),
    ("traffic light", [250, 170, 30]),
    ("traffic sign", [220, 220, 0]),
    ("vegetation", [107, 142, 35]),
    ("terrain", [152, 251, 152]),
    ("sky", [70, 130, 180]),
    ("person", [220, 20, 60]),
    ("rider", [255, 0, 0]),
    ("car", [0, 0, 142]),
    ("truck", [0, 0, 70]),
    ("bus", [0, 60, 100]),
    ("train", [0, 80, 100]),
    ("motorcycle", [0, 0, 230]),
    ("bicycle", [119, 11, 32]),
];

impl ClassTable {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() || classes.len() > 256 {
            return Err(Error::InvalidTable(format!(
                "{} classes, expected 1..=256",
                classes.len()
            )));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidTable(format!(
                    "class ids must be contiguous from 0; found {} at position {i}",
                    c.id
                )));
            }
            for (what, w) in [("w_wce", c.w_wce), ("w_l2", c.w_l2), ("w_rel", c.w_rel)] {
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::InvalidTable(format!(
                        "{what}={w} for class {} not in [0,1]",
                        c.name
                    )));
                }
            }
        }
        Ok(Self { classes })
    }

    /// The 19 Cityscapes evaluation classes with the driving-task weights:
    /// signs and lights are fully weighted, people and riders nearly so, sky
    /// and vegetation are discounted, and the residual edit targets sky,
    /// vegetation and road.
    pub fn cityscapes() -> Self {
        let classes = CITYSCAPES
            .iter()
            .enumerate()
            .map(|(id, &(name, color))| {
                let (w_wce, w_l2, relevant) = match name {
                    "traffic sign" | "traffic light" => (1.0, 1.0, true),
                    "person" | "rider" => (0.85, 0.55, true),
                    "sky" | "vegetation" => (0.20, 0.0, false),
                    _ => (0.50, 0.15, false),
                };
                let w_rel = match name {
                    "sky" => 0.90,
                    "vegetation" => 0.80,
                    "road" => 0.40,
                    _ => 0.0,
                };
                ClassInfo {
                    id,
                    name: name.to_string(),
                    is_relevant: relevant,
                    w_wce,
                    w_l2,
                    w_rel,
                    color,
                }
            })
            .collect();
        Self::new(classes).expect("built-in table is valid")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ClassInfo> {
        self.classes.get(id)
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Weight column indexed by class id.
    pub fn weights(&self, kind: WeightKind) -> Vec<f64> {
        self.classes.iter().map(|c| c.weight(kind)).collect()
    }

    pub fn relevant_mask(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.is_relevant).collect()
    }

    /// A copy with one weight column replaced.
    pub fn with_weights(&self, kind: WeightKind, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::InvalidTable(format!(
                "{} weights for {} classes",
                weights.len(),
                self.len()
            )));
        }
        let mut classes = self.classes.clone();
        for (c, &w) in classes.iter_mut().zip(weights) {
            match kind {
                WeightKind::Wce => c.w_wce = w,
                WeightKind::L2 => c.w_l2 = w,
                WeightKind::Rel => c.w_rel = w,
            }
        }
        Self::new(classes)
    }
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::cityscapes()
    }
}

/// Compact per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                labels.push(f(h, w));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.labels[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, class: u8) {
        self.labels[h * self.width + w] = class;
    }

    pub fn validate(&self, table: &ClassTable) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= table.len()) {
            Some(&bad) => Err(Error::InvalidClass {
                id: bad as usize,
                num_classes: table.len(),
            }),
            None => Ok(()),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Reads an 8-bit grayscale PNG whose pixel values are class ids.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(img)
    }

    /// Decodes an in-memory label PNG.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(
            |source| Error::Image {
                path: "<memory>".into(),
                source,
            },
        )?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: image::DynamicImage) -> Result<Self> {
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::Shape(format!(
                    "label PNG must be 8-bit single channel, got {:?}",
                    other.color()
                )))
            }
        };
        let (w, h) = gray.dimensions();
        Self::new(h as usize, w as usize, gray.into_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.labels.clone(),
        )
        .expect("label buffer size");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Writes an RGB visualization using the table's class colors.
    pub fn write_color_png(&self, table: &ClassTable, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            let color = table
                .get(self.labels[i] as usize)
                .map(|c| c.color)
                .unwrap_or([0, 0, 0]);
            *px = image::Rgb(color);
        }
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// One-hot class volume `[n_c, H, W]` with its class table.
#[derive(Clone, Debug)]
pub struct SemanticMap {
    onehot: Array3<f64>,
    table: Arc<ClassTable>,
}

impl PartialEq for SemanticMap {
    fn eq(&self, other: &Self) -> bool {
        self.onehot == other.onehot && self.table == other.table
    }
}

impl SemanticMap {
    /// Wraps a volume after checking that every pixel column is one-hot.
    pub fn from_onehot(onehot: Array3<f64>, table: Arc<ClassTable>) -> Result<Self> {
        if onehot.dim().0 != table.len() {
            return Err(Error::Shape(format!(
                "{} channels for a {}-class table",
                onehot.dim().0,
                table.len()
            )));
        }
        let map = Self { onehot, table };
        map.validate()?;
        Ok(map)
    }

    pub fn onehot(&self) -> &Array3<f64> {
        &self.onehot
    }

    pub fn table(&self) -> &Arc<ClassTable> {
        &self.table
    }

    pub fn num_classes(&self) -> usize {
        self.onehot.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.onehot.dim();
        (h, w)
    }

    /// Every column holds exactly one 1 and zeros elsewhere.
    pub fn validate(&self) -> Result<()> {
        for lane in self.onehot.lanes(Axis(0)) {
            let mut ones = 0;
            for &v in lane {
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::InvalidDistribution(format!(
                        "one-hot entry {v} is neither 0 nor 1"
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::InvalidDistribution(format!(
                    "pixel column with {ones} active classes"
                )));
            }
        }
        Ok(())
    }

    /// The codec needs both dimensions to be multiples of 16.
    pub fn check_codec_dims(&self) -> Result<()> {
        let (h, w) = self.dims();
        check_codec_dims(h, w)
    }

    pub fn labels(&self) -> LabelMap {
        decode_argmax(&self.onehot).expect("one-hot volumes are finite")
    }
}

pub fn check_codec_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        Err(Error::NotMultipleOf16 { height, width })
    } else {
        Ok(())
    }
}

pub fn encode_onehot(labels: &LabelMap, table: Arc<ClassTable>) -> Result<SemanticMap> {
    labels.validate(&table)?;
    let (h, w) = labels.dims();
    let mut onehot = Array3::<f64>::zeros((table.len(), h, w));
    for (i, &l) in labels.labels().iter().enumerate() {
        onehot[[l as usize, i / w, i % w]] = 1.0;
    }
    Ok(SemanticMap { onehot, table })
}

/// Per-pixel argmax over the class axis; ties go to the lowest class id.
pub fn decode_argmax(scores: &Array3<f64>) -> Result<LabelMap> {
    let (nc, h, w) = scores.dim();
    if nc == 0 || nc > 256 {
        return Err(Error::Shape(format!("{nc} classes")));
    }
    let mut labels = vec![0u8; h * w];
    for hh in 0..h {
        for ww in 0..w {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..nc {
                let v = scores[[c, hh, ww]];
                if v.is_nan() {
                    return Err(Error::NonFinite("class scores"));
                }
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            labels[hh * w + ww] = best as u8;
        }
    }
    LabelMap::new(h, w, labels)
}

/// Mean intersection-over-union over the classes present in either map.
/// Two maps with no pixels at all score 1.
pub fn compute_miou(truth: &LabelMap, pred: &LabelMap) -> Result<f64> {
    let (inter, union) = iou_counts(truth, pred)?;
    Ok(miou_from_counts(&inter, &union))
}

/// Per-class intersection and union pixel counts, indexed by class id.
pub fn iou_counts(truth: &LabelMap, pred: &LabelMap) -> Result<(Vec<u64>, Vec<u64>)> {
    if truth.dims() != pred.dims() {
        return Err(Error::Shape(format!(
            "label maps {:?} vs {:?}",
            truth.dims(),
            pred.dims()
        )));
    }
    let mut inter = vec![0u64; 256];
    let mut union = vec![0u64; 256];
    for (&a, &b) in truth.labels().iter().zip(pred.labels()) {
        if a == b {
            inter[a as usize] += 1;
            union[a as usize] += 1;
        } else {
            union[a as usize] += 1;
            union[b as usize] += 1;
        }
    }
    Ok((inter, union))
}

pub fn miou_from_counts(inter: &[u64], union: &[u64]) -> f64 {
    let (sum, present) = inter
        .iter()
        .zip(union)
        .filter(|(_, &u)| u > 0)
        .fold((0.0, 0usize), |(s, n), (&i, &u)| {
            (s + i as f64 / u as f64, n + 1)
        });
    if present == 0 {
        1.0
    } else {
        sum / present as f64
    }
}

/// Pixel grid of the selected weight column, looked up through each pixel's class.
pub fn weight_map(s: &SemanticMap, kind: WeightKind) -> Array2<f64> {
    let weights = s.table.weights(kind);
    let labels = s.labels();
    let (h, w) = labels.dims();
    Array2::from_shape_fn((h, w), |(i, j)| weights[labels.get(i, j) as usize])
}

/// Same lookup starting from labels.
pub fn weight_map_from_labels(labels: &LabelMap, table: &ClassTable, kind: WeightKind) -> Array2<f64> {
    let weights = table.weights(kind);
    let (h, w) = labels.dims();
    Array2::from_shape_fn((h, w), |(i, j)| weights[labels.get(i, j) as usize])
}
