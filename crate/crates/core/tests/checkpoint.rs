use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqgan_core::error::Error;
use sqgan_core::model::{params_digest, Model, CHECKPOINT_MAGIC};
use sqgan_core::networks::ModelConfig;

fn model() -> Model {
    let mut m = Model::new(&ModelConfig::tiny(32, 64), 3).unwrap();
    m.stages.semantic = true;
    m
}

#[test]
fn roundtrip_preserves_everything() {
    let m = model();
    let bytes = m.to_bytes().unwrap();
    assert_eq!(&bytes[..4], &CHECKPOINT_MAGIC);
    let back = Model::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.stages, m.stages);
    for (a, b) in [
        (&m.gs_params, &back.gs_params),
        (&m.gx_params, &back.gx_params),
        (&m.ds_params, &back.ds_params),
        (&m.dx_params, &back.dx_params),
    ] {
        assert_eq!(params_digest(a), params_digest(b));
    }
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn save_and_load_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model();
    m.save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap().to_bytes().unwrap(), m.to_bytes().unwrap());
    assert!(matches!(Model::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

fn rejects(bytes: &[u8]) -> bool {
    matches!(Model::from_bytes(bytes), Err(Error::Checkpoint(_)))
}

#[test]
fn malformed_headers() {
    let good = model().to_bytes().unwrap();
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(rejects(&magic));
    let mut version = good.clone();
    version[4] = 2;
    assert!(rejects(&version));
    let mut stages = good.clone();
    stages[8] = 0x80;
    assert!(rejects(&stages));
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(rejects(&trailing));
    assert!(rejects(&[]));
}

#[test]
fn every_truncation_is_an_error() {
    let good = model().to_bytes().unwrap();
    let step = (good.len() / 200).max(1);
    for len in (0..good.len()).step_by(step) {
        assert!(rejects(&good[..len]), "prefix of {len} bytes accepted");
    }
}

#[test]
fn non_finite_weights_are_refused() {
    let mut m = model();
    let id = m.dx_params.ids().next().unwrap();
    m.dx_params.get_mut(id).fill(f64::NAN);
    assert!(rejects(&m.to_bytes().unwrap()));
}

#[test]
fn random_corruption_never_panics() {
    let good = model().to_bytes().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..300 {
        let mut bad = good.clone();
        for _ in 0..rng.gen_range(1..8) {
            let i = rng.gen_range(0..bad.len().min(600));
            bad[i] = rng.gen();
        }
        let _ = Model::from_bytes(&bad);
    }
}
