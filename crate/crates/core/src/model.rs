//! The four trained networks with their parameters, and the checkpoint
//! container.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic        4 bytes  "SQCK"
//! version      u32      1
//! stages       u8       bit 0: stage s, bit 1: stage x, bit 2: fine-tuning
//! config_len   u32
//! config       config_len bytes, UTF-8 TOML of the model configuration
//! count        u32      number of tensors
//! tensor × count:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   rank       u8
//!   dims       u32 × rank
//!   data       f64 × prod(dims), row-major
//! ```
//!
//! Tensor names carry the owning network as prefix (`gs.`, `gx.`, `ds.`,
//! `dx.`). Each pipeline's codebook is the `[J, C]` tensor
//! `g?.vq.codebook` and its placeholder the `[1, C]` tensor
//! `g?.vq.placeholder`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sqgan_autodiff::{Array, ParamStore};

use crate::error::{Error, Result};
use crate::networks::{Discriminator, ImageGenerator, ModelConfig, SemanticGenerator};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which training stages have completed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stages {
    pub semantic: bool,
    pub image: bool,
    pub finetune: bool,
}

impl Stages {
    fn to_bits(self) -> u8 {
        self.semantic as u8 | (self.image as u8) << 1 | (self.finetune as u8) << 2
    }

    fn from_bits(bits: u8) -> Result<Self> {
        if bits & !0b111 != 0 {
            return Err(Error::Checkpoint(format!("unknown stage bits {bits:#04x}")));
        }
        Ok(Self {
            semantic: bits & 1 != 0,
            image: bits & 2 != 0,
            finetune: bits & 4 != 0,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub gs: SemanticGenerator,
    pub gs_params: ParamStore,
    pub gx: ImageGenerator,
    pub gx_params: ParamStore,
    pub ds: Discriminator,
    pub ds_params: ParamStore,
    pub dx: Discriminator,
    pub dx_params: ParamStore,
    pub stages: Stages,
}

impl Model {
    /// Freshly initialized networks; the same seed gives the same weights.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gs, gs_params) = SemanticGenerator::new(config, &mut rng)?;
        let (gx, gx_params) = ImageGenerator::new(config, &mut rng)?;
        let (ds, ds_params) = Discriminator::new("ds", config.num_classes, config.disc_width, &mut rng);
        let (dx, dx_params) = Discriminator::new("dx", 3, config.disc_width, &mut rng);
        Ok(Self {
            config: config.clone(),
            gs,
            gs_params,
            gx,
            gx_params,
            ds,
            ds_params,
            dx,
            dx_params,
            stages: Stages::default(),
        })
    }

    fn stores(&self) -> [&ParamStore; 4] {
        [&self.gs_params, &self.gx_params, &self.ds_params, &self.dx_params]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore; 4] {
        [
            &mut self.gs_params,
            &mut self.gx_params,
            &mut self.ds_params,
            &mut self.dx_params,
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.stages.to_bits());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        let count: usize = self.stores().iter().map(|s| s.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for store in self.stores() {
            for (name, value) in store.iter() {
                out.extend_from_slice(&(name.len() as u16).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.push(value.ndim() as u8);
                for &d in value.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in value.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:02x?}")));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let stages = Stages::from_bits(r.u8()?)?;
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config: ModelConfig = toml::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        check_size_limits(&config)?;

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut size = 1usize;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                size = size
                    .checked_mul(d)
                    .filter(|&s| s <= r.remaining() / 8)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name} larger than the file")))?;
                dims.push(d);
            }
            let data: Vec<f64> = r
                .take(size * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Array::from_shape_vec(dims, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((name, value));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }

        let mut model = Self::new(&config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.stages = stages;
        let expected: usize = model.stores().iter().map(|s| s.len()).sum();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors, the configuration needs {expected}",
                tensors.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, value) in tensors {
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            let slot = model
                .stores_mut()
                .into_iter()
                .find_map(|s| s.find(&name).map(|id| (s, id)));
            let Some((store, id)) = slot else {
                return Err(Error::Checkpoint(format!("unknown tensor {name}")));
            };
            if store.get(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            if !value.iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor {name} is not finite")));
            }
            store.set(id, value);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hash of a parameter store's names, shapes and exact values.
pub fn params_digest(store: &ParamStore) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (name, value) in store.iter() {
        name.hash(&mut h);
        value.shape().hash(&mut h);
        for v in value.iter() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Refuses configurations whose parameters could not fit in memory, before
/// any allocation.
fn check_size_limits(config: &ModelConfig) -> Result<()> {
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let widths = config.widths.iter().chain([
        &config.latent_channels,
        &config.embed_channels,
        &config.spade_hidden,
        &config.scorer_hidden,
        &config.disc_width,
    ]);
    let too_wide = widths.copied().max().unwrap_or(0) > 1024;
    let too_many_codewords = config.codebook_size.saturating_mul(config.latent_channels) > 1 << 22;
    if too_wide || too_many_codewords || config.res_blocks > 8 || config.adm_layers > 8 || config.height * config.width > 1 << 22 {
        return Err(Error::Checkpoint("configuration exceeds the supported model size".into()));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
