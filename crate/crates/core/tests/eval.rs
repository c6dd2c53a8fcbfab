use std::path::PathBuf;
use std::sync::Arc;

use sqgan_core::bitstream::PayloadMode;
use sqgan_core::data::synthetic_dataset;
use sqgan_core::error::Error;
use sqgan_core::eval::{
    grid_means, plot_from_csv, read_records, sweep, write_report, BuiltinSegmenter, CommandSegmenter, Segmenter,
    SweepConfig, CONFIG_ECHO, FID_CSV, LPIPS_PLOT, MIOU_PLOT, RECORDS_CSV,
};
use sqgan_core::model::Model;
use sqgan_core::networks::ModelConfig;
use sqgan_core::rate::bpp_total;
use sqgan_core::semantic_map::{ClassTable, LabelMap};

fn setup(count: usize) -> (Model, sqgan_core::data::Dataset, Arc<ClassTable>) {
    let model = Model::new(&ModelConfig::tiny(32, 64), 8).unwrap();
    (model, synthetic_dataset(count, 32, 64, 5), Arc::new(ClassTable::cityscapes()))
}

#[test]
fn single_point_two_images() {
    let (model, data, table) = setup(2);
    let seg = BuiltinSegmenter { table: table.clone() };
    let cfg = SweepConfig {
        m_x: vec![0.35],
        m_s: vec![0.35],
        mode: PayloadMode::Arithmetic,
    };
    let report = sweep(&model, &data.samples, &table, &cfg, &seg).unwrap();
    assert_eq!(report.records.len(), 2);
    assert_eq!(report.fid.len(), 1);
    assert!(report.fid[0].fid.is_finite() && report.fid[0].fid >= 0.0);
    for r in &report.records {
        assert!((0.0..=1.0).contains(&r.miou));
        assert!(r.lpips >= 0.0);
        assert!(r.psnr > 0.0);
    }
}

#[test]
fn grid_sweep_writes_csv_and_plots() {
    let (model, data, table) = setup(4);
    let seg = BuiltinSegmenter { table: table.clone() };
    let grid = [0.2, 0.55, 0.95];
    let cfg = SweepConfig::square(&grid, PayloadMode::Fixed);
    let report = sweep(&model, &data.samples, &table, &cfg, &seg).unwrap();
    assert_eq!(report.records.len(), 4 * 9);
    assert_eq!(report.fid.len(), 9);
    for s in &data.samples {
        assert_eq!(report.records.iter().filter(|r| r.image == s.name).count(), 9);
    }
    for r in &report.records {
        assert!((r.bpp - bpp_total(r.m_x, r.m_s).unwrap()).abs() < 1e-9);
    }

    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path()).unwrap();
    assert!(dir.path().join(FID_CSV).exists());
    assert!(std::fs::read_to_string(dir.path().join(CONFIG_ECHO)).unwrap().contains("builtin"));
    let header = std::fs::read_to_string(dir.path().join(RECORDS_CSV)).unwrap();
    assert!(header.starts_with("image,m_x,m_s,bpp,payload_bits,psnr,lpips,miou,miou_generated\n"));
    let back = read_records(&dir.path().join(RECORDS_CSV)).unwrap();
    assert_eq!(back.len(), report.records.len());
    for (a, b) in back.iter().zip(&report.records) {
        assert_eq!(a.image, b.image);
        assert!((a.miou - b.miou).abs() < 1e-12);
    }

    let means = grid_means(&back, |r| r.miou);
    assert_eq!(means.m_x, grid.to_vec());
    assert_eq!(means.m_s, grid.to_vec());
    assert!(means.values.iter().flatten().all(Option::is_some));

    let plots = plot_from_csv(dir.path()).unwrap();
    assert_eq!(plots, vec![dir.path().join(MIOU_PLOT), dir.path().join(LPIPS_PLOT)]);
    for p in plots {
        assert!(std::fs::read_to_string(p).unwrap().starts_with("<svg"));
    }
}

#[test]
fn single_image_has_no_fid() {
    let (model, data, table) = setup(1);
    let seg = BuiltinSegmenter { table: table.clone() };
    let cfg = SweepConfig::square(&[0.5], PayloadMode::Fixed);
    let report = sweep(&model, &data.samples, &table, &cfg, &seg).unwrap();
    assert!(report.fid.is_empty());
    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path()).unwrap();
    assert_eq!(
        std::fs::read_to_string(dir.path().join(FID_CSV)).unwrap(),
        "m_x,m_s,fid,regularized\n"
    );
}

#[test]
fn invalid_grids_are_rejected() {
    let (model, data, table) = setup(1);
    let seg = BuiltinSegmenter { table: table.clone() };
    for grid in [vec![], vec![0.0], vec![1.2]] {
        let cfg = SweepConfig::square(&grid, PayloadMode::Fixed);
        assert!(sweep(&model, &data.samples, &table, &cfg, &seg).is_err());
    }
    let cfg = SweepConfig::square(&[0.5], PayloadMode::Fixed);
    assert!(matches!(sweep(&model, &[], &table, &cfg, &seg), Err(Error::Config(_))));
}

#[test]
fn command_segmenter_contract() {
    let (model, data, _) = setup(1);
    let sample = &data.samples[0];
    let dir = tempfile::tempdir().unwrap();
    let fixed = dir.path().join("fixed.png");
    LabelMap::filled(32, 64, 3).write_png(&fixed).unwrap();

    let copy = CommandSegmenter {
        program: PathBuf::from("sh"),
        args: vec!["-c".into(), format!("cp '{}' \"$2\"", fixed.display()), "segment".into()],
    };
    let out = copy.segment(&model, &sample.image, &sample.labels).unwrap();
    assert_eq!(out, LabelMap::filled(32, 64, 3));

    let failing = CommandSegmenter {
        program: PathBuf::from("false"),
        args: vec![],
    };
    assert!(matches!(
        failing.segment(&model, &sample.image, &sample.labels),
        Err(Error::Segmenter(_))
    ));
    let missing = CommandSegmenter {
        program: dir.path().join("no-such-program"),
        args: vec![],
    };
    assert!(matches!(
        missing.segment(&model, &sample.image, &sample.labels),
        Err(Error::Segmenter(_))
    ));

    let wrong_size = dir.path().join("small.png");
    LabelMap::filled(8, 8, 0).write_png(&wrong_size).unwrap();
    let resized = CommandSegmenter {
        program: PathBuf::from("sh"),
        args: vec!["-c".into(), format!("cp '{}' \"$2\"", wrong_size.display()), "segment".into()],
    };
    assert!(matches!(
        resized.segment(&model, &sample.image, &sample.labels),
        Err(Error::Segmenter(_))
    ));
}
