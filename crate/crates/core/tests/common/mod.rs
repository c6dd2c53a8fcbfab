#![allow(dead_code)]

use std::ops::ControlFlow;
use std::sync::Arc;
use std::time::{Duration, Instant};

use sqgan_autodiff::Array;
use sqgan_core::bitstream::PayloadMode;
use sqgan_core::codec::{decode, encode, EncodeOptions};
use sqgan_core::eval::{sweep, BuiltinSegmenter, SweepConfig, LPIPS_SEED};
use sqgan_core::losses::{perceptual, FeatureNet};
use sqgan_core::data::{argmax_labels, onehot_maps, synthetic_dataset, Dataset};
use sqgan_core::model::{params_digest, Model};
use sqgan_core::networks::ModelConfig;
use sqgan_core::semantic_map::{iou_counts, miou_from_counts, ClassTable};
use sqgan_core::training::{
    finetune, train_stage_s, train_stage_x, StageReport, StepObserver, StepProbe, TrainConfig,
};

pub const SMOKE_HEIGHT: usize = 64;
pub const SMOKE_WIDTH: usize = 128;
pub const SMOKE_IMAGES: usize = 8;
pub const SMOKE_DATA_SEED: u64 = 7;
pub const SMOKE_S_STEPS: usize = 200;
pub const SMOKE_X_STEPS: usize = 500;
pub const SMOKE_FINETUNE_STEPS: usize = 5;
pub const HELD_OUT_IMAGES: usize = 4;
pub const HELD_OUT_SEED: u64 = 1234;

/// Overfitting configuration: one batch holds the whole set, so every
/// epoch is one step.
pub fn smoke_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        model: ModelConfig::tiny(SMOKE_HEIGHT, SMOKE_WIDTH),
        lr: 5e-3,
        batch: SMOKE_IMAGES,
        epochs_stage: [SMOKE_S_STEPS, SMOKE_X_STEPS, SMOKE_FINETUNE_STEPS],
        early_stop_patience: 0,
        ..TrainConfig::default()
    };
    cfg.augment.enabled = false;
    cfg
}

pub fn smoke_data() -> Dataset {
    synthetic_dataset(SMOKE_IMAGES, SMOKE_HEIGHT, SMOKE_WIDTH, SMOKE_DATA_SEED)
}

/// mIoU of argmax maps over a whole batch, pooled counts.
pub fn batch_miou(truth: &Array, pred: &Array) -> f64 {
    let truth = argmax_labels(truth).unwrap();
    let pred = argmax_labels(pred).unwrap();
    let mut inter = vec![0u64; 256];
    let mut union = vec![0u64; 256];
    for (a, b) in truth.iter().zip(&pred) {
        let (i, u) = iou_counts(a, b).unwrap();
        for k in 0..256 {
            inter[k] += i[k];
            union[k] += u[k];
        }
    }
    miou_from_counts(&inter, &union)
}

/// Records the training-batch mIoU of every semantic step.
#[derive(Default)]
pub struct MiouTrace {
    pub per_step: Vec<f64>,
}

impl StepObserver for MiouTrace {
    fn on_step(&mut self, probe: &StepProbe<'_>) -> ControlFlow<()> {
        self.per_step.push(batch_miou(probe.onehot, probe.output));
        ControlFlow::Continue(())
    }
}

/// Stops once the mean of the last five reconstruction losses is at most
/// half the first one.
#[derive(Default)]
pub struct HalvingWatch {
    pub losses: Vec<f64>,
    pub halved_at: Option<usize>,
}

impl HalvingWatch {
    pub fn recent_mean(&self) -> f64 {
        let n = self.losses.len();
        let tail = &self.losses[n.saturating_sub(5)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

impl StepObserver for HalvingWatch {
    fn on_step(&mut self, probe: &StepProbe<'_>) -> ControlFlow<()> {
        self.losses.push(probe.losses.reconstruction);
        if self.losses.len() >= 5 && self.recent_mean() <= 0.5 * self.losses[0] {
            self.halved_at = Some(probe.losses.step);
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    }
}

pub struct SmokeRun {
    pub model: Model,
    pub stage_s: StageReport,
    pub stage_x: StageReport,
    pub finetune: StageReport,
    pub miou_trace: Vec<f64>,
    pub x_watch: HalvingWatch,
    pub gs_digest_before_finetune: u64,
    pub gs_digest_after_finetune: u64,
    pub bitstreams: Vec<Vec<u8>>,
    /// The model right after the semantic stage.
    pub stage_s_model: Model,
    pub elapsed: Duration,
}

impl SmokeRun {
    pub fn final_losses(&self) -> Vec<f64> {
        [&self.stage_s, &self.stage_x, &self.finetune]
            .iter()
            .map(|r| r.last().expect("stage ran").total)
            .collect()
    }

    /// Mean decoded-map mIoU on the training images for each `m_s`, at
    /// `m_x = 0.35`.
    pub fn miou_by_ms(&self, fractions: &[f64]) -> Vec<f64> {
        let table = Arc::new(ClassTable::cityscapes());
        let cfg = SweepConfig {
            m_x: vec![0.35],
            m_s: fractions.to_vec(),
            mode: PayloadMode::Fixed,
        };
        let seg = BuiltinSegmenter { table: table.clone() };
        let report = sweep(&self.model, &smoke_data().samples, &table, &cfg, &seg).unwrap();
        fractions
            .iter()
            .map(|&m| {
                let rows: Vec<f64> = report.records.iter().filter(|r| r.m_s == m).map(|r| r.miou).collect();
                rows.iter().sum::<f64>() / rows.len() as f64
            })
            .collect()
    }

    pub fn summary(&self) -> SmokeSummary {
        SmokeSummary {
            miou_trace: self.miou_trace.clone(),
            wce: self.stage_s.curve.iter().map(|l| l.reconstruction).collect(),
            x_losses: self.x_watch.losses.clone(),
            halved_at: self.x_watch.halved_at,
            gs_frozen: self.gs_digest_before_finetune == self.gs_digest_after_finetune,
            final_losses: self.final_losses(),
            bitstreams: self.bitstreams.clone(),
            elapsed: self.elapsed,
            miou_by_ms: self.miou_by_ms(&SWEEP_MS),
        }
    }
}

pub const SWEEP_MS: [f64; 3] = [0.2, 0.55, 0.95];

/// What the acceptance criteria need from a smoke run, without the model.
#[derive(Clone, Debug)]
pub struct SmokeSummary {
    pub miou_trace: Vec<f64>,
    pub wce: Vec<f64>,
    pub x_losses: Vec<f64>,
    pub halved_at: Option<usize>,
    pub gs_frozen: bool,
    pub final_losses: Vec<f64>,
    pub bitstreams: Vec<Vec<u8>>,
    pub elapsed: Duration,
    pub miou_by_ms: Vec<f64>,
}

/// Every stage on the synthetic set, then the encoded training images.
pub fn smoke_run(seed: u64) -> SmokeRun {
    let start = Instant::now();
    let cfg = TrainConfig { seed, ..smoke_config() };
    let data = smoke_data();
    let table = Arc::new(ClassTable::cityscapes());
    let mut model = Model::new(&cfg.model, cfg.seed).unwrap();

    let mut trace = MiouTrace::default();
    let stage_s = train_stage_s(&mut model, &data, None, &cfg, &table, &mut trace).unwrap();
    let stage_s_model = model.clone();
    let mut watch = HalvingWatch::default();
    let stage_x = train_stage_x(&mut model, &data, None, &cfg, &table, &mut watch).unwrap();
    let before = params_digest(&model.gs_params);
    let ft = finetune(&mut model, &data, None, &cfg, &table, &mut ()).unwrap();
    let after = params_digest(&model.gs_params);

    let maps = onehot_maps(&data, &table).unwrap();
    let opts = EncodeOptions {
        m_x: 0.35,
        m_s: 0.35,
        mode: PayloadMode::Arithmetic,
    };
    let bitstreams = data
        .samples
        .iter()
        .zip(&maps)
        .map(|(s, m)| encode(&model, &s.image, m, &opts).unwrap().bytes)
        .collect();
    SmokeRun {
        model,
        stage_s,
        stage_x,
        finetune: ft,
        miou_trace: trace.per_step,
        x_watch: watch,
        gs_digest_before_finetune: before,
        gs_digest_after_finetune: after,
        bitstreams,
        stage_s_model,
        elapsed: start.elapsed(),
    }
}

/// Held-out LPIPS of the image stage trained for its whole budget, then
/// after fine-tuning. The smoke run stops the image stage once L_Wl2 halves,
/// which leaves too young a decoder for this comparison.
pub fn finetune_ab(stage_s_model: &Model) -> (f64, f64) {
    let cfg = smoke_config();
    let data = smoke_data();
    let table = Arc::new(ClassTable::cityscapes());
    let mut model = stage_s_model.clone();
    train_stage_x(&mut model, &data, None, &cfg, &table, &mut ()).unwrap();
    let before = held_out_lpips(&model, &table);
    finetune(&mut model, &data, None, &cfg, &table, &mut ()).unwrap();
    (before, held_out_lpips(&model, &table))
}

/// Mean LPIPS over unseen scenes decoded from bitstreams, so the image
/// decoder is conditioned on the reconstructed map.
pub fn held_out_lpips(model: &Model, table: &Arc<ClassTable>) -> f64 {
    let data = synthetic_dataset(HELD_OUT_IMAGES, SMOKE_HEIGHT, SMOKE_WIDTH, HELD_OUT_SEED);
    let maps = onehot_maps(&data, table).unwrap();
    let net = FeatureNet::random(LPIPS_SEED);
    let opts = EncodeOptions {
        m_x: 0.35,
        m_s: 0.35,
        mode: PayloadMode::Arithmetic,
    };
    let total: f64 = data
        .samples
        .iter()
        .zip(&maps)
        .map(|(s, m)| {
            let dec = decode(model, &encode(model, &s.image, m, &opts).unwrap().bytes).unwrap();
            perceptual(&s.image, &dec.image, &net).unwrap()
        })
        .sum();
    total / HELD_OUT_IMAGES as f64
}
