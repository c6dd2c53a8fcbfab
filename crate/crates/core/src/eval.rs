//! Rate sweeps over masking fractions, their CSV reports and plots.
//!
//! # Report files
//!
//! `records.csv`, one row per image and grid point:
//!
//! ```text
//! image,m_x,m_s,bpp,payload_bits,psnr,lpips,miou,miou_generated
//! ```
//!
//! `miou` compares the decoded map with the ground truth, `miou_generated`
//! compares the segmenter's map of the decoded image with the ground truth.
//! Identical images have `psnr` = `inf`.
//!
//! `fid.csv`, one row per grid point: `m_x,m_s,fid,regularized`.
//!
//! `config.toml` echoes the model configuration and the sweep settings.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bitstream::PayloadMode;
use crate::codec::{decode, encode, EncodeOptions};
use crate::data::{write_image, Image, Sample};
use crate::error::{Error, Result};
use crate::losses::{perceptual, FeatureNet};
use crate::metrics::{fid, psnr};
use crate::model::Model;
use crate::networks::ModelConfig;
use crate::semantic_map::{compute_miou, encode_onehot, ClassTable, LabelMap};

/// Weights of the feature network behind the LPIPS-style metric.
pub const LPIPS_SEED: u64 = 0x5eed_0002;
/// Weights of the feature network behind FID.
pub const FID_SEED: u64 = 0x5eed_0003;

pub const RECORDS_CSV: &str = "records.csv";
pub const FID_CSV: &str = "fid.csv";
pub const CONFIG_ECHO: &str = "config.toml";
pub const MIOU_PLOT: &str = "miou_vs_ms.svg";
pub const LPIPS_PLOT: &str = "lpips_heatmap.svg";

/// Produces a label map from a decoded image.
pub trait Segmenter {
    fn name(&self) -> String;

    /// `decoded` is the map transmitted alongside the image.
    fn segment(&self, model: &Model, image: &Image, decoded: &LabelMap) -> Result<LabelMap>;
}

/// Passes the decoded map once more through the segmentation pipeline with
/// every position kept.
#[derive(Clone, Debug)]
pub struct BuiltinSegmenter {
    pub table: Arc<ClassTable>,
}

impl Segmenter for BuiltinSegmenter {
    fn name(&self) -> String {
        "builtin".into()
    }

    fn segment(&self, model: &Model, _image: &Image, decoded: &LabelMap) -> Result<LabelMap> {
        let s = encode_onehot(decoded, self.table.clone())?;
        let is = model.semantic_indices(&s, 1.0)?;
        Ok(model.decode_semantic(&is)?.1)
    }
}

/// External program called as `PROGRAM ARGS... INPUT.png OUTPUT.png`: it
/// reads an RGB image and must write a single-channel label PNG of the same
/// size.
#[derive(Clone, Debug)]
pub struct CommandSegmenter {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Segmenter for CommandSegmenter {
    fn name(&self) -> String {
        self.program.display().to_string()
    }

    fn segment(&self, _model: &Model, image: &Image, _decoded: &LabelMap) -> Result<LabelMap> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("output.png");
        write_image(image, &input)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| Error::Segmenter(format!("{}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Segmenter(format!("{} exited with {status}", self.program.display())));
        }
        let labels = LabelMap::read_png(&output)?;
        if labels.dims() != (image.dim().1, image.dim().2) {
            return Err(Error::Segmenter(format!(
                "output is {:?}, image is {}x{}",
                labels.dims(),
                image.dim().1,
                image.dim().2
            )));
        }
        Ok(labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub m_x: Vec<f64>,
    pub m_s: Vec<f64>,
    pub mode: PayloadMode,
}

impl SweepConfig {
    /// The same fractions for both pipelines.
    pub fn square(grid: &[f64], mode: PayloadMode) -> Self {
        Self {
            m_x: grid.to_vec(),
            m_s: grid.to_vec(),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_x.is_empty() || self.m_s.is_empty() {
            return Err(Error::Config("empty masking grid".into()));
        }
        for &m in self.m_x.iter().chain(&self.m_s) {
            if !(m > 0.0 && m <= 1.0) {
                return Err(Error::MaskFraction(m));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image: String,
    pub m_x: f64,
    pub m_s: f64,
    pub bpp: f64,
    pub payload_bits: u64,
    pub psnr: f64,
    pub lpips: f64,
    pub miou: f64,
    pub miou_generated: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidRecord {
    pub m_x: f64,
    pub m_s: f64,
    pub fid: f64,
    pub regularized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub images: Vec<String>,
    pub segmenter: String,
    pub sweep: SweepConfig,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config: ConfigEcho,
    pub records: Vec<EvalRecord>,
    /// One entry per grid point; empty with fewer than two images.
    pub fid: Vec<FidRecord>,
}

/// Encodes, serializes, decodes and scores every image at every grid point.
pub fn sweep(
    model: &Model,
    samples: &[Sample],
    table: &Arc<ClassTable>,
    cfg: &SweepConfig,
    segmenter: &dyn Segmenter,
) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no images to evaluate".into()));
    }
    let lpips_net = FeatureNet::random(LPIPS_SEED);
    let fid_net = FeatureNet::random(FID_SEED);
    let maps = samples
        .iter()
        .map(|s| encode_onehot(&s.labels, table.clone()))
        .collect::<Result<Vec<_>>>()?;
    let real_feats: Vec<Vec<f64>> = samples.iter().map(|s| fid_net.embedding(&s.image)).collect();

    let mut records = Vec::new();
    let mut fids = Vec::new();
    for &m_x in &cfg.m_x {
        for &m_s in &cfg.m_s {
            let opts = EncodeOptions { m_x, m_s, mode: cfg.mode };
            let mut fake_feats = Vec::with_capacity(samples.len());
            for (sample, s) in samples.iter().zip(&maps) {
                let enc = encode(model, &sample.image, s, &opts)?;
                let dec = decode(model, &enc.bytes)?;
                let generated = segmenter.segment(model, &dec.image, &dec.labels)?;
                records.push(EvalRecord {
                    image: sample.name.clone(),
                    m_x,
                    m_s,
                    bpp: enc.rate.bpp,
                    payload_bits: enc.rate.actual_payload_bits,
                    psnr: psnr(&sample.image, &dec.image)?,
                    lpips: perceptual(&sample.image, &dec.image, &lpips_net)?,
                    miou: compute_miou(&sample.labels, &dec.labels)?,
                    miou_generated: compute_miou(&sample.labels, &generated)?,
                });
                fake_feats.push(fid_net.embedding(&dec.image));
            }
            if samples.len() >= 2 {
                let f = fid(&real_feats, &fake_feats)?;
                fids.push(FidRecord {
                    m_x,
                    m_s,
                    fid: f.value,
                    regularized: f.regularized,
                });
            }
        }
    }
    Ok(EvalReport {
        config: ConfigEcho {
            images: samples.iter().map(|s| s.name.clone()).collect(),
            segmenter: segmenter.name(),
            sweep: cfg.clone(),
            model: model.config.clone(),
        },
        records,
        fid: fids,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the CSV files and the configuration echo into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(&dir.join(RECORDS_CSV), &report.records)?;
    if report.fid.is_empty() {
        let path = dir.join(FID_CSV);
        std::fs::write(&path, "m_x,m_s,fid,regularized\n").map_err(|e| Error::io(&path, e))?;
    } else {
        write_rows(&dir.join(FID_CSV), &report.fid)?;
    }
    let echo = toml::to_string(&report.config).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(CONFIG_ECHO);
    std::fs::write(&path, echo).map_err(|e| Error::io(&path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Image-averaged value per `(m_x, m_s)` grid point, both axes sorted.
pub struct GridMeans {
    pub m_x: Vec<f64>,
    pub m_s: Vec<f64>,
    /// `values[i][j]` for `m_x[i]`, `m_s[j]`; `None` where no record exists.
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn grid_means(records: &[EvalRecord], field: impl Fn(&EvalRecord) -> f64) -> GridMeans {
    let axis = |f: fn(&EvalRecord) -> f64| {
        let mut v: Vec<f64> = records.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let m_x = axis(|r| r.m_x);
    let m_s = axis(|r| r.m_s);
    let mut sums = vec![vec![(0.0, 0usize); m_s.len()]; m_x.len()];
    for r in records {
        let i = m_x.iter().position(|&v| v == r.m_x).unwrap();
        let j = m_s.iter().position(|&v| v == r.m_s).unwrap();
        sums[i][j].0 += field(r);
        sums[i][j].1 += 1;
    }
    let values = sums
        .into_iter()
        .map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
        .collect();
    GridMeans { m_x, m_s, values }
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
        W / 2.0
    )
}

/// Mean decoded-map mIoU against `m_s`, one line per `m_x`.
pub fn miou_line_svg(records: &[EvalRecord]) -> String {
    let g = grid_means(records, |r| r.miou);
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let px = |m: f64| x0 + m * (x1 - x0);
    let py = |v: f64| y0 + v * (y1 - y0);
    let mut svg = svg_open("mIoU vs m_s");
    svg += &format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.1}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            px(v),
            y0 + 16.0,
            x0 - 6.0,
            py(v) + 4.0
        );
    }
    svg += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">m_s</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">mIoU</text>\n",
        W / 2.0,
        H - 14.0,
        H / 2.0,
        H / 2.0
    );
    for (i, (&m_x, row)) in g.m_x.iter().zip(&g.values).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = g
            .m_s
            .iter()
            .zip(row)
            .filter_map(|(&m_s, v)| v.map(|v| format!("{:.2},{:.2}", px(m_s), py(v))))
            .collect();
        svg += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">m_x={m_x}</text>\n",
            points.join(" "),
            x1 - 60.0,
            y1 + 14.0 * i as f64
        );
    }
    svg + "</svg>\n"
}

/// Mean LPIPS over the `(m_x, m_s)` grid, darker for larger distances.
pub fn lpips_heatmap_svg(records: &[EvalRecord]) -> String {
    let g = grid_means(records, |r| r.lpips);
    let flat: Vec<f64> = g.values.iter().flatten().flatten().copied().collect();
    let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (x0, y0) = (MARGIN, MARGIN);
    let cw = (W - 2.0 * MARGIN) / g.m_s.len().max(1) as f64;
    let ch = (H - 2.0 * MARGIN) / g.m_x.len().max(1) as f64;
    let mut svg = svg_open("LPIPS over (m_x, m_s)");
    for (i, (&m_x, row)) in g.m_x.iter().zip(&g.values).enumerate() {
        let y = y0 + ch * (g.m_x.len() - 1 - i) as f64;
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{m_x}</text>\n",
            x0 - 6.0,
            y + ch / 2.0 + 4.0
        );
        for (j, v) in row.iter().enumerate() {
            let x = x0 + cw * j as f64;
            let (fill, label) = match v {
                Some(v) => {
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                    let level = (235.0 - 200.0 * t).round() as u8;
                    (format!("rgb({level},{level},{level})"), format!("{v:.3}"))
                }
                None => ("none".to_string(), String::new()),
            };
            svg += &format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cw:.1}\" height=\"{ch:.1}\" fill=\"{fill}\" stroke=\"white\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#c00\">{label}</text>\n",
                x + cw / 2.0,
                y + ch / 2.0 + 4.0
            );
        }
    }
    for (j, &m_s) in g.m_s.iter().enumerate() {
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{m_s}</text>\n",
            x0 + cw * (j as f64 + 0.5),
            H - MARGIN + 16.0
        );
    }
    svg += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">m_s</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">m_x</text>\n",
        W / 2.0,
        H - 14.0,
        H / 2.0,
        H / 2.0
    );
    svg + "</svg>\n"
}

/// Renders both plots from the records CSV in `dir`, next to it.
pub fn plot_from_csv(dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_records(&dir.join(RECORDS_CSV))?;
    let mut written = Vec::new();
    for (name, svg) in [
        (MIOU_PLOT, miou_line_svg(&records)),
        (LPIPS_PLOT, lpips_heatmap_svg(&records)),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
