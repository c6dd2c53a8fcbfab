//! Inference: image and map to bitstream and back.

use ndarray::{Array3, Axis};
use sqgan_autodiff::{Array, Binding, Tape};

use crate::bitstream::{deserialize, payload_bits, serialize, BitstreamHeader, PayloadMode};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::latent::{IndexGrid, LatentGrid};
use crate::model::Model;
use crate::rate::RateReport;
use crate::semantic_map::{decode_argmax, LabelMap, SemanticMap};

/// Environment variable naming the directory searched for relative
/// checkpoint paths.
pub const CKPT_DIR_ENV: &str = "SQGAN_CKPT_DIR";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodeOptions {
    pub m_x: f64,
    pub m_s: f64,
    pub mode: PayloadMode,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub header: BitstreamHeader,
    pub ix: IndexGrid,
    pub is: IndexGrid,
    pub rate: RateReport,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: Image,
    pub labels: LabelMap,
    /// Per-pixel class probabilities `n_c × H × W`.
    pub probabilities: Array3<f64>,
    pub header: BitstreamHeader,
    pub ix: IndexGrid,
    pub is: IndexGrid,
}

fn batch1(x: &Array3<f64>) -> Array {
    x.clone().insert_axis(Axis(0)).into_dyn()
}

fn single(x: &Array) -> Array3<f64> {
    x.index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("CHW tensor")
}

impl Model {
    fn check_inputs(&self, x: Option<&Image>, s: &SemanticMap) -> Result<()> {
        s.validate()?;
        let dims = (self.config.height, self.config.width);
        if s.dims() != dims || s.num_classes() != self.config.num_classes {
            return Err(Error::Shape(format!(
                "map {:?} with {} classes, model expects {dims:?} with {}",
                s.dims(),
                s.num_classes(),
                self.config.num_classes
            )));
        }
        if let Some(x) = x {
            if x.dim() != (3, dims.0, dims.1) {
                return Err(Error::Shape(format!("image {:?}, model expects 3x{}x{}", x.dim(), dims.0, dims.1)));
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("image"));
            }
        }
        Ok(())
    }

    /// Segmentation-pipeline latent `C × h × w`.
    pub fn encode_semantic(&self, s: &SemanticMap) -> Result<LatentGrid> {
        self.check_inputs(None, s)?;
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &self.gs_params);
        let z = self.gs.encode(&p, tape.constant(batch1(s.onehot())));
        Ok(LatentGrid::new(single(&z.value())))
    }

    /// Image-pipeline latent `C × h × w`.
    pub fn encode_image(&self, x: &Image, s: &SemanticMap) -> Result<LatentGrid> {
        self.check_inputs(Some(x), s)?;
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &self.gx_params);
        let z = self.gx.encode(&p, tape.constant(batch1(x)), tape.constant(batch1(s.onehot())));
        Ok(LatentGrid::new(single(&z.value())))
    }

    /// Transmitted segmentation indices for masking fraction `m_s`.
    pub fn semantic_indices(&self, s: &SemanticMap, m_s: f64) -> Result<IndexGrid> {
        self.check_inputs(None, s)?;
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &self.gs_params);
        let seg = tape.constant(batch1(s.onehot()));
        let z = self.gs.encode(&p, seg);
        let mut masked = self.gs.mask(&p, z, seg, &[m_s])?;
        Ok(masked.indices.remove(0))
    }

    /// Transmitted image indices for masking fraction `m_x`.
    pub fn image_indices(&self, x: &Image, s: &SemanticMap, m_x: f64) -> Result<IndexGrid> {
        self.check_inputs(Some(x), s)?;
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &self.gx_params);
        let seg = tape.constant(batch1(s.onehot()));
        let z = self.gx.encode(&p, tape.constant(batch1(x)), seg);
        let mut masked = self.gx.mask(&p, z, seg, &[m_x])?;
        Ok(masked.indices.remove(0))
    }

    /// Class probabilities and argmax labels from segmentation indices.
    pub fn decode_semantic(&self, is: &IndexGrid) -> Result<(Array3<f64>, LabelMap)> {
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &self.gs_params);
        let latent = self.gs.demask(&p, std::slice::from_ref(is))?;
        let probs = single(&self.gs.decode(&p, latent).softmax(1).value());
        let labels = decode_argmax(&probs)?;
        Ok((probs, labels))
    }

    /// Image from image indices, conditioned on an `n_c × H × W` volume.
    pub fn decode_image(&self, ix: &IndexGrid, condition: &Array3<f64>) -> Result<Image> {
        let expected = (self.config.num_classes, self.config.height, self.config.width);
        if condition.dim() != expected {
            return Err(Error::Shape(format!("condition {:?}, model expects {expected:?}", condition.dim())));
        }
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &self.gx_params);
        let latent = self.gx.demask(&p, std::slice::from_ref(ix))?;
        let x = self.gx.decode(&p, latent, tape.constant(batch1(condition)));
        Ok(single(&x.value()))
    }

    /// Discriminator logit of the image discriminator for one image.
    pub fn discriminate_image(&self, x: &Image) -> f64 {
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &self.dx_params);
        self.dx.forward(&p, tape.constant(batch1(x))).scalar()
    }
}

pub fn encode(model: &Model, x: &Image, s: &SemanticMap, opts: &EncodeOptions) -> Result<Encoded> {
    let is = model.semantic_indices(s, opts.m_s)?;
    let ix = model.image_indices(x, s, opts.m_x)?;
    let cfg = &model.config;
    let header = BitstreamHeader {
        height: cfg.height as u16,
        width: cfg.width as u16,
        log2_codebook: cfg.log2_codebook(),
        mode: opts.mode,
        n_x: ix.count_selected() as u32,
        n_s: is.count_selected() as u32,
    };
    let bytes = serialize(&ix, &is, &header)?;
    let rate = RateReport::new(
        opts.m_x,
        opts.m_s,
        cfg.codebook_size,
        cfg.height,
        cfg.width,
        payload_bits(&bytes),
    )?;
    Ok(Encoded {
        bytes,
        header,
        ix,
        is,
        rate,
    })
}

/// Decodes the segmentation map first, then the image conditioned on it.
pub fn decode(model: &Model, bytes: &[u8]) -> Result<Decoded> {
    let (ix, is, header) = deserialize(bytes)?;
    let cfg = &model.config;
    if (header.height as usize, header.width as usize) != (cfg.height, cfg.width)
        || header.codebook_size() != cfg.codebook_size
    {
        return Err(Error::Shape(format!(
            "stream is {}x{} with J={}, model is {}x{} with J={}",
            header.height,
            header.width,
            header.codebook_size(),
            cfg.height,
            cfg.width,
            cfg.codebook_size
        )));
    }
    let (probabilities, labels) = model.decode_semantic(&is)?;
    let condition = onehot_volume(&labels, cfg.num_classes)?;
    let image = model.decode_image(&ix, &condition)?;
    Ok(Decoded {
        image,
        labels,
        probabilities,
        header,
        ix,
        is,
    })
}

/// `n_c × H × W` one-hot volume of a label map.
pub fn onehot_volume(labels: &LabelMap, num_classes: usize) -> Result<Array3<f64>> {
    let (h, w) = labels.dims();
    let mut out = Array3::zeros((num_classes, h, w));
    for i in 0..h {
        for j in 0..w {
            let c = labels.get(i, j) as usize;
            if c >= num_classes {
                return Err(Error::InvalidClass { id: c, num_classes });
            }
            out[[c, i, j]] = 1.0;
        }
    }
    Ok(out)
}

/// Resolves a checkpoint path: relative paths that do not exist are looked
/// up in `$SQGAN_CKPT_DIR`.
pub fn resolve_checkpoint(path: &std::path::Path) -> std::path::PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(CKPT_DIR_ENV) {
            return std::path::Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}
