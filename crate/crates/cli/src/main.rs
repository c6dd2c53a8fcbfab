//! `sqgan`: encode, decode, train and evaluate the semantic masked codec.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use sqgan_core::bitstream::PayloadMode;
use sqgan_core::codec::{decode, encode, resolve_checkpoint, EncodeOptions};
use sqgan_core::data::{read_image, synthetic_dataset, write_image, Dataset, Sample};
use sqgan_core::eval::{plot_from_csv, sweep, write_report, BuiltinSegmenter, CommandSegmenter, Segmenter, SweepConfig};
use sqgan_core::model::Model;
use sqgan_core::semantic_map::{encode_onehot, ClassTable, LabelMap};
use sqgan_core::training::{finetune, train_stage_s, train_stage_x, write_curves, StageReport, TrainConfig};
use sqgan_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_MODEL: u8 = 4;
const EXIT_DATA: u8 = 5;

#[derive(Parser)]
#[command(name = "sqgan", version, about = "Semantic masked VQ codec for images and segmentation maps")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fixed,
    Arithmetic,
}

impl From<Mode> for PayloadMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Fixed => PayloadMode::Fixed,
            Mode::Arithmetic => PayloadMode::Arithmetic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStages {
    S,
    X,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress an image and its label map into a `.sqb` bitstream.
    Encode {
        #[arg(long)]
        image: PathBuf,
        /// Label PNG, one class id per pixel.
        #[arg(long)]
        ssm: PathBuf,
        #[arg(long)]
        mx: f64,
        #[arg(long)]
        ms: f64,
        #[arg(long)]
        out: PathBuf,
        /// Relative paths are also looked up in `$SQGAN_CKPT_DIR`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "arithmetic")]
        mode: Mode,
        /// Also write the decoded image and labels into this directory.
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Reconstruct the image and label map from a bitstream.
    Decode {
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to INPUT with extension `.png`.
        #[arg(long)]
        out_image: Option<PathBuf>,
        /// Defaults to INPUT with suffix `_labels.png`.
        #[arg(long)]
        out_labels: Option<PathBuf>,
    },
    /// Train the segmentation stage, the image stage, or both in order.
    Train {
        /// Directory of `NAME.png` and `NAME_labels.png` pairs.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        /// TOML training configuration; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        stage: TrainStages,
        /// Continue from this checkpoint instead of fresh weights.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training-curve CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Fine-tune the image stage on reconstructed label maps.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Score every image at one pair of masking fractions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mx: f64,
        #[arg(long)]
        ms: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Score every image over a grid of masking fractions.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fractions used for both pipelines unless overridden.
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.55,0.95")]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        mx_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        ms_grid: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Re-render the plots of a report directory from its CSV.
    Plot { dir: PathBuf },
    /// Write a synthetic street-scene dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "arithmetic")]
    mode: Mode,
    /// External segmenter called as `PROGRAM INPUT.png OUTPUT.png`.
    #[arg(long)]
    segmenter: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Config(_) | Error::MaskFraction(_) => EXIT_USAGE,
        Error::Checkpoint(_) | Error::Shape(_) | Error::StageOrder(_) | Error::Diverged { .. } => EXIT_MODEL,
        _ => EXIT_DATA,
    }
}

fn load_model(path: &Path) -> sqgan_core::Result<Model> {
    Model::load(&resolve_checkpoint(path))
}

fn load_config(path: Option<&Path>) -> sqgan_core::Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::load)
}

fn save_curves(path: Option<&Path>, reports: &[StageReport]) -> sqgan_core::Result<()> {
    if let Some(path) = path {
        let rows: Vec<_> = reports.iter().flat_map(|r| r.curve.iter().cloned()).collect();
        write_curves(path, &rows)?;
    }
    Ok(())
}

fn summarize(report: &StageReport) {
    let last = report.last().map_or(f64::NAN, |l| l.total);
    eprintln!(
        "{:?}: {} steps, {} epochs, final loss {last:.6}{}",
        report.stage,
        report.steps,
        report.epochs,
        if report.stopped_early { ", stopped early" } else { "" }
    );
}

fn eval_samples(data: &Path, table: &ClassTable) -> sqgan_core::Result<Vec<Sample>> {
    let set = Dataset::load(data)?;
    set.validate(table)?;
    Ok(set.samples)
}

fn run_sweep(ckpt: &Path, data: &Path, cfg: SweepConfig, common: &EvalArgs, out: &Path) -> sqgan_core::Result<()> {
    let model = load_model(ckpt)?;
    let table = Arc::new(ClassTable::cityscapes());
    let samples = eval_samples(data, &table)?;
    let segmenter: Box<dyn Segmenter> = match &common.segmenter {
        Some(p) => Box::new(CommandSegmenter {
            program: p.clone(),
            args: Vec::new(),
        }),
        None => Box::new(BuiltinSegmenter { table: table.clone() }),
    };
    let report = sweep(&model, &samples, &table, &cfg, segmenter.as_ref())?;
    write_report(&report, out)?;
    plot_from_csv(out)?;
    println!(
        "{} records, {} FID values written to {}",
        report.records.len(),
        report.fid.len(),
        out.display()
    );
    Ok(())
}

fn run(cmd: Cmd) -> sqgan_core::Result<()> {
    let table = Arc::new(ClassTable::cityscapes());
    match cmd {
        Cmd::Encode {
            image,
            ssm,
            mx,
            ms,
            out,
            ckpt,
            mode,
            preview,
        } => {
            let model = load_model(&ckpt)?;
            let x = read_image(&image)?;
            let s = encode_onehot(&LabelMap::read_png(&ssm)?, table.clone())?;
            let enc = encode(&model, &x, &s, &EncodeOptions { m_x: mx, m_s: ms, mode: mode.into() })?;
            std::fs::write(&out, &enc.bytes).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            println!(
                "N_x={} N_s={} bpp={:.6} payload_bits={}",
                enc.header.n_x, enc.header.n_s, enc.rate.bpp, enc.rate.actual_payload_bits
            );
            if let Some(dir) = preview {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                let dec = decode(&model, &enc.bytes)?;
                write_image(&dec.image, &dir.join("preview.png"))?;
                dec.labels.write_png(&dir.join("preview_labels.png"))?;
            }
        }
        Cmd::Decode {
            input,
            ckpt,
            out_image,
            out_labels,
        } => {
            let model = load_model(&ckpt)?;
            let bytes = std::fs::read(&input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let dec = decode(&model, &bytes)?;
            let out_image = out_image.unwrap_or_else(|| input.with_extension("png"));
            let out_labels = out_labels.unwrap_or_else(|| {
                let stem = input.file_stem().unwrap_or_default().to_string_lossy();
                input.with_file_name(format!("{stem}_labels.png"))
            });
            write_image(&dec.image, &out_image)?;
            dec.labels.write_png(&out_labels)?;
        }
        Cmd::Train {
            data,
            validation,
            config,
            stage,
            resume,
            out,
            curves,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = Dataset::load(&data)?;
            let validation = validation.map(|v| Dataset::load(&v)).transpose()?;
            let mut model = match resume {
                Some(path) => load_model(&path)?,
                None => Model::new(&cfg.model, cfg.seed)?,
            };
            let mut reports = Vec::new();
            if matches!(stage, TrainStages::S | TrainStages::All) {
                reports.push(train_stage_s(&mut model, &data, validation.as_ref(), &cfg, &table, &mut ())?);
                summarize(reports.last().unwrap());
            }
            if matches!(stage, TrainStages::X | TrainStages::All) {
                reports.push(train_stage_x(&mut model, &data, validation.as_ref(), &cfg, &table, &mut ())?);
                summarize(reports.last().unwrap());
            }
            model.save(&out)?;
            save_curves(curves.as_deref(), &reports)?;
        }
        Cmd::Finetune {
            data,
            validation,
            config,
            ckpt,
            out,
            curves,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = Dataset::load(&data)?;
            let validation = validation.map(|v| Dataset::load(&v)).transpose()?;
            let mut model = load_model(&ckpt)?;
            let report = finetune(&mut model, &data, validation.as_ref(), &cfg, &table, &mut ())?;
            summarize(&report);
            model.save(&out)?;
            save_curves(curves.as_deref(), &[report])?;
        }
        Cmd::Eval {
            ckpt,
            data,
            mx,
            ms,
            out,
            common,
        } => {
            let cfg = SweepConfig {
                m_x: vec![mx],
                m_s: vec![ms],
                mode: common.mode.into(),
            };
            run_sweep(&ckpt, &data, cfg, &common, &out)?;
        }
        Cmd::Sweep {
            ckpt,
            data,
            grid,
            mx_grid,
            ms_grid,
            out,
            common,
        } => {
            let cfg = SweepConfig {
                m_x: mx_grid.unwrap_or_else(|| grid.clone()),
                m_s: ms_grid.unwrap_or(grid),
                mode: common.mode.into(),
            };
            run_sweep(&ckpt, &data, cfg, &common, &out)?;
        }
        Cmd::Plot { dir } => {
            for path in plot_from_csv(&dir)? {
                println!("{}", path.display());
            }
        }
        Cmd::Synth {
            out,
            count,
            height,
            width,
            seed,
        } => {
            sqgan_core::semantic_map::check_codec_dims(height, width)?;
            synthetic_dataset(count, height, width, seed).save(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
