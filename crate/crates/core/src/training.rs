//! Three-stage training: the segmentation pipeline, the image pipeline on
//! true maps, then the image pipeline on reconstructed maps with the
//! segmentation pipeline frozen.

use std::ops::ControlFlow;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ndarray::Axis;
use sqgan_autodiff::{Adam, AdamConfig, Array, Binding, ParamId, ParamStore, Tape};

use crate::augmentation::{augment_batch, AugmentConfig};
use crate::data::{stack_images, stack_onehot, Dataset, Image};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, generator_loss, residual_edit_var, weighted_ce_logits, weighted_l2_var, FeatureNet,
    LossWeights,
};
use crate::model::Model;
use crate::networks::{MaskedLatent, ModelConfig};
use crate::semantic_map::{encode_onehot, ClassTable, LabelMap, WeightKind};

/// Seed of the fixed feature network behind the perceptual loss.
pub const PERCEPTUAL_SEED: u64 = 0x5eed_0001;

pub const DEFAULT_MASK_SET: [f64; 8] = [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.75, 1.0];
/// Weights of [`DEFAULT_MASK_SET`]; the mean fraction is 0.35.
pub const DEFAULT_MASK_WEIGHTS: [f64; 8] = [0.2, 0.15, 0.15, 0.15, 0.075, 0.125, 0.1, 0.05];

/// Every training knob, readable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    /// Epochs of the semantic, image and fine-tuning stages.
    pub epochs_stage: [usize; 3],
    /// Optional cap on optimizer steps per stage.
    pub max_steps: Option<usize>,
    pub mask_set: Vec<f64>,
    pub mask_weights: Vec<f64>,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub losses: LossWeights,
    pub perceptual_weight: f64,
    /// Codewords unused for this many steps are re-seeded from current
    /// selected vectors; 0 disables.
    pub codebook_restart: usize,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-4,
            batch: 8,
            epochs_stage: [200, 200, 100],
            max_steps: None,
            mask_set: DEFAULT_MASK_SET.to_vec(),
            mask_weights: DEFAULT_MASK_WEIGHTS.to_vec(),
            early_stop_patience: 10,
            losses: LossWeights::default(),
            perceptual_weight: 1.0,
            codebook_restart: 20,
            augment: AugmentConfig::default(),
            model: ModelConfig::paper(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.perceptual_weight.is_finite() && self.perceptual_weight >= 0.0) {
            return Err(Error::Config("perceptual_weight must be finite and >= 0".into()));
        }
        self.losses.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.mask_sampler().map(|_| ())
    }

    pub fn mask_sampler(&self) -> Result<MaskSampler> {
        MaskSampler::new(&self.mask_set, &self.mask_weights)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Discrete distribution over masking fractions.
#[derive(Clone, Debug)]
pub struct MaskSampler {
    fractions: Vec<f64>,
    cumulative: Vec<f64>,
}

impl MaskSampler {
    /// Fractions must lie in `[0.05, 1]` and the weighted mean within 0.01
    /// of 0.35.
    pub fn new(fractions: &[f64], weights: &[f64]) -> Result<Self> {
        if fractions.is_empty() || fractions.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} mask fractions with {} weights",
                fractions.len(),
                weights.len()
            )));
        }
        if let Some(&m) = fractions.iter().find(|m| !(0.05..=1.0).contains(*m)) {
            return Err(Error::MaskFraction(m));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("mask weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("mask weights sum to zero".into()));
        }
        let mean = fractions.iter().zip(weights).map(|(m, w)| m * w).sum::<f64>() / total;
        if (mean - 0.35).abs() > 0.01 {
            return Err(Error::Config(format!("mean masking fraction {mean:.4} is not 0.35 ± 0.01")));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(Self {
            fractions: fractions.to_vec(),
            cumulative,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.fractions[i.min(self.fractions.len() - 1)]
    }

    pub fn mean(&self) -> f64 {
        let mut prev = 0.0;
        self.fractions
            .iter()
            .zip(&self.cumulative)
            .map(|(m, &c)| {
                let p = c - prev;
                prev = c;
                m * p
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Semantic,
    Image,
    Finetune,
}

impl Stage {
    fn index(self) -> usize {
        self as usize
    }
}

/// Losses of one optimizer step; one row of the training-curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    /// Mean image-pipeline masking fraction of the batch (0 in the semantic stage).
    pub m_x: f64,
    /// Mean segmentation-pipeline masking fraction of the batch.
    pub m_s: f64,
    /// Weighted cross-entropy or weighted L2, per stage.
    pub reconstruction: f64,
    pub perceptual: f64,
    pub generator: f64,
    pub discriminator: f64,
    pub vq: f64,
    pub commit: f64,
    pub total: f64,
}

/// What a step fed its networks, for wiring probes.
pub struct StepProbe<'a> {
    pub losses: &'a StepLosses,
    /// Batch images `[B, 3, H, W]` after augmentation.
    pub images: &'a Array,
    /// Batch one-hot maps `[B, n_c, H, W]` after augmentation.
    pub onehot: &'a Array,
    /// Generator output: class probabilities or the reconstructed image.
    pub output: &'a Array,
    /// The fake input handed to the discriminator.
    pub disc_fake: &'a Array,
    /// Segmentation volume conditioning the image decoder.
    pub decoder_condition: Option<&'a Array>,
}

pub trait StepObserver {
    fn on_step(&mut self, _probe: &StepProbe<'_>) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_epoch(&mut self, _stage: Stage, _epoch: usize, _validation: Option<f64>) {}
}

impl StepObserver for () {}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub epochs: usize,
    pub stopped_early: bool,
    pub curve: Vec<StepLosses>,
    pub validation: Vec<f64>,
}

impl StageReport {
    pub fn last(&self) -> Option<&StepLosses> {
        self.curve.last()
    }
}

pub fn write_curves(path: &Path, rows: &[StepLosses]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Validation-objective tracker.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    /// `patience == 0` never stops.
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch's objective; true when training should stop.
    pub fn update(&mut self, objective: f64) -> bool {
        if objective < self.best {
            self.best = objective;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }
}

struct Batch {
    images: Array,
    onehot: Array,
    labels: Vec<LabelMap>,
}

impl Batch {
    fn weights(&self, table: &ClassTable, kind: WeightKind) -> Array {
        let per: Vec<f64> = table.weights(kind);
        let (b, h, w) = (self.labels.len(), self.labels[0].height(), self.labels[0].width());
        Array::from_shape_fn(ndarray::IxDyn(&[b, 1, h, w]), |ix| {
            per[self.labels[ix[0]].get(ix[2], ix[3]) as usize]
        })
    }
}

fn make_batch(pairs: Vec<(Image, LabelMap)>, table: &Arc<ClassTable>) -> Result<Batch> {
    let maps = pairs
        .iter()
        .map(|(_, s)| encode_onehot(s, table.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        images: stack_images(pairs.iter().map(|(x, _)| x)),
        onehot: stack_onehot(&maps),
        labels: pairs.into_iter().map(|(_, s)| s).collect(),
    })
}

/// Shuffled index chunks for one epoch; a trailing partial batch is kept.
fn epoch_batches(len: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// One-hot of the per-pixel argmax of `[B, n_c, H, W]` scores, lowest class
/// on ties.
pub fn onehot_argmax(scores: &Array) -> Array {
    let s = scores.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Array::zeros(scores.raw_dim());
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut best = 0;
                for k in 1..c {
                    if scores[[bi, k, i, j]] > scores[[bi, best, i, j]] {
                        best = k;
                    }
                }
                out[[bi, best, i, j]] = 1.0;
            }
        }
    }
    out
}

fn check_finite(step: usize, losses: &StepLosses) -> Result<()> {
    let fields = [
        ("reconstruction", losses.reconstruction),
        ("perceptual", losses.perceptual),
        ("generator", losses.generator),
        ("discriminator", losses.discriminator),
        ("vq", losses.vq),
        ("commit", losses.commit),
        ("total", losses.total),
    ];
    match fields.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(Error::Diverged {
            step,
            detail: format!("{name} loss is {v}"),
        }),
        None => Ok(()),
    }
}

/// Steps since each codeword was last selected.
struct CodebookUsage {
    idle: Vec<usize>,
}

impl CodebookUsage {
    /// Every codeword starts idle, so the first step seeds the whole
    /// codebook from data.
    fn new(size: usize, restart: usize) -> Self {
        Self {
            idle: vec![restart; size],
        }
    }

    /// Marks the codewords chosen in this step and replaces those idle for
    /// `restart` steps by a selected vector of the batch plus small noise.
    fn refresh(
        &mut self,
        store: &mut ParamStore,
        id: ParamId,
        masked: &MaskedLatent<'_>,
        restart: usize,
        rng: &mut impl Rng,
    ) {
        if restart == 0 {
            return;
        }
        for v in self.idle.iter_mut() {
            *v += 1;
        }
        let scaled = masked.scaled.value();
        let mut candidates = Vec::new();
        for (row, &index) in masked.indices.iter().flat_map(|g| g.indices()).enumerate() {
            if index >= 0 {
                self.idle[index as usize] = 0;
                candidates.push(row);
            }
        }
        if candidates.is_empty() || !self.idle.iter().any(|&v| v > restart) {
            return;
        }
        let mut book = store.get(id).clone();
        for (code, idle) in self.idle.iter_mut().enumerate() {
            if *idle > restart {
                let row = candidates[rng.gen_range(0..candidates.len())];
                let source = scaled.index_axis(Axis(0), row);
                let scale = 1e-3 * (source.iter().map(|v| v * v).sum::<f64>() / source.len() as f64).sqrt();
                let mut target = book.index_axis_mut(Axis(0), code);
                for (t, &v) in target.iter_mut().zip(source.iter()) {
                    *t = v + scale * rng.gen_range(-1.0..1.0);
                }
                *idle = 0;
            }
        }
        store.set(id, book);
    }
}

struct Runner<'a> {
    model: &'a mut Model,
    cfg: &'a TrainConfig,
    table: Arc<ClassTable>,
    sampler: MaskSampler,
    features: FeatureNet,
    rng: ChaCha8Rng,
    stage: Stage,
    usage: CodebookUsage,
}

struct Outputs {
    losses: StepLosses,
    output: Array,
    disc_fake: Array,
    condition: Option<Array>,
}

impl Runner<'_> {
    fn fractions(&mut self, b: usize) -> Vec<f64> {
        (0..b).map(|_| self.sampler.sample(&mut self.rng)).collect()
    }

    /// `ŝ` from the frozen segmentation pipeline.
    fn reconstructed_maps(&self, onehot: &Array, fractions: &[f64]) -> Result<Array> {
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &self.model.gs_params);
        let (logits, _) = self.model.gs.forward(&p, tape.constant(onehot.clone()), fractions)?;
        Ok(onehot_argmax(&logits.value()))
    }

    /// Generator objective without the adversarial term, at the mean
    /// masking fraction, over the whole dataset.
    fn validation(&mut self, data: &Dataset) -> Result<f64> {
        let m = self.sampler.mean();
        let mut total = 0.0;
        for chunk in data.samples.chunks(self.cfg.batch) {
            let pairs = chunk.iter().map(|s| (s.image.clone(), s.labels.clone())).collect();
            let batch = make_batch(pairs, &self.table)?;
            let b = batch.labels.len();
            let fr = vec![m; b];
            let tape = Tape::new();
            let lw = &self.cfg.losses;
            let value = match self.stage {
                Stage::Semantic => {
                    let p = Binding::frozen(&tape, &self.model.gs_params);
                    let (logits, masked) = self.model.gs.forward(&p, tape.constant(batch.onehot.clone()), &fr)?;
                    let shape = logits.shape();
                    let norm = shape[0] as f64;
                    let wce = weighted_ce_logits(logits, &batch.onehot, &batch.weights(&self.table, WeightKind::Wce), norm);
                    wce.scalar() + lw.vq * masked.vq_loss.scalar() + lw.commit * masked.commit_loss.scalar()
                }
                Stage::Image | Stage::Finetune => {
                    let cond = match self.stage {
                        Stage::Finetune => self.reconstructed_maps(&batch.onehot, &fr)?,
                        _ => batch.onehot.clone(),
                    };
                    let p = Binding::frozen(&tape, &self.model.gx_params);
                    let x = tape.constant(batch.images.clone());
                    let s = tape.constant(batch.onehot.clone());
                    let (x_hat, masked) = self.model.gx.forward(&p, x, s, tape.constant(cond), &fr)?;
                    let l2 = weighted_l2_var(&batch.images, x_hat, &batch.weights(&self.table, WeightKind::L2));
                    let perc = self.features.distance(x, x_hat);
                    l2.scalar()
                        + self.cfg.perceptual_weight * perc.scalar()
                        + lw.vq * masked.vq_loss.scalar()
                        + lw.commit * masked.commit_loss.scalar()
                }
            };
            total += value * b as f64;
        }
        Ok(total / data.len() as f64)
    }

    fn semantic_step(&mut self, batch: &Batch, g_opt: &mut Adam, d_opt: &mut Adam) -> Result<Outputs> {
        let b = batch.labels.len();
        let fr = self.fractions(b);
        let lw = self.cfg.losses.clone();
        let model = &mut *self.model;

        let tape = Tape::new();
        let p = Binding::new(&tape, &model.gs_params);
        let (logits, masked) = model.gs.forward(&p, tape.constant(batch.onehot.clone()), &fr)?;
        let shape = logits.shape();
        let norm = shape[0] as f64;
        let wce = weighted_ce_logits(logits, &batch.onehot, &batch.weights(&self.table, WeightKind::Wce), norm);
        let probs = logits.softmax(1);
        let dp = Binding::frozen(&tape, &model.ds_params);
        let gen = generator_loss(model.ds.forward(&dp, probs));
        let total = wce
            .add(gen.scale(lw.gan))
            .add(masked.vq_loss.scale(lw.vq))
            .add(masked.commit_loss.scale(lw.commit));
        let mut losses = StepLosses {
            stage: Stage::Semantic,
            epoch: 0,
            step: 0,
            m_x: 0.0,
            m_s: fr.iter().sum::<f64>() / b as f64,
            reconstruction: wce.scalar(),
            perceptual: 0.0,
            generator: gen.scalar(),
            discriminator: 0.0,
            vq: masked.vq_loss.scalar(),
            commit: masked.commit_loss.scalar(),
            total: total.scalar(),
        };
        let grads = total.scalar().is_finite().then(|| {
            let mut grads = tape.backward(total);
            p.collect(&mut grads)
        });
        let fake = (*probs.value()).clone();
        drop(p);
        drop(dp);
        if let Some(g) = grads {
            g_opt.step(&mut model.gs_params, g);
        }
        let book = model.gs.vq.codebook;
        self.usage
            .refresh(&mut model.gs_params, book, &masked, self.cfg.codebook_restart, &mut self.rng);

        losses.discriminator = discriminator_step(model, true, &batch.onehot, &fake, d_opt);
        Ok(Outputs {
            losses,
            output: fake.clone(),
            disc_fake: fake,
            condition: None,
        })
    }

    fn image_step(&mut self, batch: &Batch, g_opt: &mut Adam, d_opt: &mut Adam) -> Result<Outputs> {
        let b = batch.labels.len();
        let fr_x = self.fractions(b);
        let (fr_s, condition) = if self.stage == Stage::Finetune {
            let fr_s = self.fractions(b);
            let cond = self.reconstructed_maps(&batch.onehot, &fr_s)?;
            (fr_s, cond)
        } else {
            (Vec::new(), batch.onehot.clone())
        };
        let lw = self.cfg.losses.clone();
        let w_l2 = batch.weights(&self.table, WeightKind::L2);
        let w_rel = batch.weights(&self.table, WeightKind::Rel);
        let model = &mut *self.model;

        let tape = Tape::new();
        let p = Binding::new(&tape, &model.gx_params);
        let x = tape.constant(batch.images.clone());
        let s = tape.constant(batch.onehot.clone());
        let (x_hat, masked) = model.gx.forward(&p, x, s, tape.constant(condition.clone()), &fr_x)?;
        let l2 = weighted_l2_var(&batch.images, x_hat, &w_l2);
        let perc = self.features.distance(x, x_hat);
        let x_rel = residual_edit_var(&batch.images, x_hat, &w_rel);
        let dp = Binding::frozen(&tape, &model.dx_params);
        let gen = generator_loss(model.dx.forward(&dp, x_rel));
        let total = l2
            .add(perc.scale(self.cfg.perceptual_weight))
            .add(gen.scale(lw.gan))
            .add(masked.vq_loss.scale(lw.vq))
            .add(masked.commit_loss.scale(lw.commit));
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let mut losses = StepLosses {
            stage: self.stage,
            epoch: 0,
            step: 0,
            m_x: mean(&fr_x),
            m_s: mean(&fr_s),
            reconstruction: l2.scalar(),
            perceptual: perc.scalar(),
            generator: gen.scalar(),
            discriminator: 0.0,
            vq: masked.vq_loss.scalar(),
            commit: masked.commit_loss.scalar(),
            total: total.scalar(),
        };
        let grads = total.scalar().is_finite().then(|| {
            let mut grads = tape.backward(total);
            p.collect(&mut grads)
        });
        let output = (*x_hat.value()).clone();
        let fake = (*x_rel.value()).clone();
        drop(p);
        drop(dp);
        if let Some(g) = grads {
            g_opt.step(&mut model.gx_params, g);
        }
        let book = model.gx.vq.codebook;
        self.usage
            .refresh(&mut model.gx_params, book, &masked, self.cfg.codebook_restart, &mut self.rng);

        losses.discriminator = discriminator_step(model, false, &batch.images, &fake, d_opt);
        Ok(Outputs {
            losses,
            output,
            disc_fake: fake,
            condition: Some(condition),
        })
    }

    fn run(&mut self, data: &Dataset, validation: Option<&Dataset>, obs: &mut dyn StepObserver) -> Result<StageReport> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let epochs = self.cfg.epochs_stage[self.stage.index()];
        let mut g_opt = Adam::new(
            match self.stage {
                Stage::Semantic => &self.model.gs_params,
                _ => &self.model.gx_params,
            },
            self.cfg.adam(),
        );
        let mut d_opt = Adam::new(
            match self.stage {
                Stage::Semantic => &self.model.ds_params,
                _ => &self.model.dx_params,
            },
            self.cfg.adam(),
        );
        let mut report = StageReport {
            stage: self.stage,
            steps: 0,
            epochs: 0,
            stopped_early: false,
            curve: Vec::new(),
            validation: Vec::new(),
        };
        let mut stopper = EarlyStopping::new(self.cfg.early_stop_patience);
        let cap = self.cfg.max_steps.unwrap_or(usize::MAX);
        'epochs: for epoch in 0..epochs {
            for idx in epoch_batches(data.len(), self.cfg.batch, &mut self.rng) {
                if report.steps >= cap {
                    break 'epochs;
                }
                let pairs: Vec<(Image, LabelMap)> = idx
                    .iter()
                    .map(|&i| (data.samples[i].image.clone(), data.samples[i].labels.clone()))
                    .collect();
                let pairs = augment_batch(&pairs, &self.table, &self.cfg.augment, &mut self.rng);
                let batch = make_batch(pairs, &self.table)?;
                let mut out = match self.stage {
                    Stage::Semantic => self.semantic_step(&batch, &mut g_opt, &mut d_opt)?,
                    _ => self.image_step(&batch, &mut g_opt, &mut d_opt)?,
                };
                out.losses.epoch = epoch;
                out.losses.step = report.steps;
                check_finite(report.steps, &out.losses)?;
                report.steps += 1;
                let probe = StepProbe {
                    losses: &out.losses,
                    images: &batch.images,
                    onehot: &batch.onehot,
                    output: &out.output,
                    disc_fake: &out.disc_fake,
                    decoder_condition: out.condition.as_ref(),
                };
                let flow = obs.on_step(&probe);
                report.curve.push(out.losses);
                if flow.is_break() {
                    report.epochs = epoch + 1;
                    report.stopped_early = true;
                    break 'epochs;
                }
            }
            report.epochs = epoch + 1;
            let objective = if self.cfg.early_stop_patience > 0 {
                let v = self.validation(validation.unwrap_or(data))?;
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        step: report.steps,
                        detail: format!("validation objective is {v}"),
                    });
                }
                report.validation.push(v);
                Some(v)
            } else {
                None
            };
            obs.on_epoch(self.stage, epoch, objective);
            if objective.is_some_and(|v| stopper.update(v)) {
                report.stopped_early = true;
                break;
            }
        }
        Ok(report)
    }
}

/// One discriminator update on real versus detached fake inputs; returns
/// its loss.
fn discriminator_step(model: &mut Model, semantic: bool, real: &Array, fake: &Array, opt: &mut Adam) -> f64 {
    let (net, store) = if semantic {
        (&model.ds, &mut model.ds_params)
    } else {
        (&model.dx, &mut model.dx_params)
    };
    let tape = Tape::new();
    let p = Binding::new(&tape, store);
    let d_real = net.forward(&p, tape.constant(real.clone()));
    let d_fake = net.forward(&p, tape.constant(fake.clone()));
    let loss = discriminator_loss(d_real, d_fake);
    let value = loss.scalar();
    if value.is_finite() {
        let mut grads = tape.backward(loss);
        let g = p.collect(&mut grads);
        drop(p);
        opt.step(store, g);
    }
    value
}

fn runner<'a>(model: &'a mut Model, cfg: &'a TrainConfig, table: &ClassTable, stage: Stage) -> Result<Runner<'a>> {
    cfg.validate()?;
    if model.config != cfg.model {
        return Err(Error::Config("model and training configuration disagree".into()));
    }
    if table.len() != model.config.num_classes {
        return Err(Error::Config(format!(
            "class table has {} classes, the model {}",
            table.len(),
            model.config.num_classes
        )));
    }
    let stage_seed = cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stage.index() as u64 + 1));
    Ok(Runner {
        model,
        cfg,
        table: Arc::new(table.clone()),
        sampler: cfg.mask_sampler()?,
        features: FeatureNet::random(PERCEPTUAL_SEED),
        rng: ChaCha8Rng::seed_from_u64(stage_seed),
        stage,
        usage: CodebookUsage::new(cfg.model.codebook_size, cfg.codebook_restart),
    })
}

/// Trains the segmentation pipeline against its discriminator.
pub fn train_stage_s(
    model: &mut Model,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
    table: &ClassTable,
    obs: &mut dyn StepObserver,
) -> Result<StageReport> {
    data.validate(table)?;
    let report = runner(model, cfg, table, Stage::Semantic)?.run(data, validation, obs)?;
    model.stages.semantic = true;
    Ok(report)
}

/// Trains the image pipeline with decoders conditioned on the true maps.
pub fn train_stage_x(
    model: &mut Model,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
    table: &ClassTable,
    obs: &mut dyn StepObserver,
) -> Result<StageReport> {
    if !model.stages.semantic {
        return Err(Error::StageOrder("the image stage needs a trained segmentation pipeline".into()));
    }
    data.validate(table)?;
    let report = runner(model, cfg, table, Stage::Image)?.run(data, validation, obs)?;
    model.stages.image = true;
    Ok(report)
}

/// Fine-tunes the image pipeline on reconstructed maps; the segmentation
/// pipeline is never updated.
pub fn finetune(
    model: &mut Model,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
    table: &ClassTable,
    obs: &mut dyn StepObserver,
) -> Result<StageReport> {
    if !(model.stages.semantic && model.stages.image) {
        return Err(Error::StageOrder("fine-tuning needs both trained pipelines".into()));
    }
    data.validate(table)?;
    let report = runner(model, cfg, table, Stage::Finetune)?.run(data, validation, obs)?;
    model.stages.finetune = true;
    Ok(report)
}
