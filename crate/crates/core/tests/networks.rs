use ndarray::{Array4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqgan_autodiff::{Array, Binding, ParamStore, Tape};
use sqgan_core::model::Model;
use sqgan_core::networks::ModelConfig;
use sqgan_core::samm::{Scorer, ScorerNorm};

const C: usize = 6;
const HIDDEN: usize = 8;
const CLASSES: usize = 4;

fn scorers(seed: u64) -> ((Scorer, ParamStore), (Scorer, ParamStore)) {
    let mut samm_store = ParamStore::new();
    let samm = Scorer::samm(
        &mut samm_store,
        "s",
        C,
        HIDDEN,
        CLASSES,
        5,
        4,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    let mut amm_store = ParamStore::new();
    let amm = Scorer::amm(&mut amm_store, "s", C, HIDDEN, 4, &mut ChaCha8Rng::seed_from_u64(seed));
    ((samm, samm_store), (amm, amm_store))
}

fn zero_spade(scorer: &Scorer, store: &mut ParamStore) {
    for norm in [&scorer.norm1, &scorer.norm2] {
        if let ScorerNorm::Spade(s) = norm {
            s.zero_projection(store);
        }
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Array {
    Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn onehot(labels: impl Fn(usize, usize) -> usize, h: usize, w: usize) -> Array {
    Array4::from_shape_fn((1, CLASSES, h, w), |(_, c, i, j)| (labels(i, j) == c) as u8 as f64).into_dyn()
}

fn scores(scorer: &Scorer, store: &ParamStore, z: &Array, seg: &Array) -> Array {
    let tape = Tape::new();
    let p = Binding::frozen(&tape, store);
    let out = scorer.forward(&p, tape.constant(z.clone()), tape.constant(seg.clone()));
    out.value().as_ref().clone()
}

#[test]
fn samm_reduces_to_amm_without_projection() {
    let ((samm, mut samm_store), (amm, amm_store)) = scorers(11);
    zero_spade(&samm, &mut samm_store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = random(&[1, C, 4, 8], &mut rng);
    let seg = onehot(|i, j| (i * 3 + j) % CLASSES, 16, 32);
    let a = scores(&samm, &samm_store, &z, &seg);
    let b = scores(&amm, &amm_store, &z, &seg);
    let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff < 1e-12, "max difference {diff}");
}

#[test]
fn samm_scores_depend_on_the_map() {
    let ((samm, store), (amm, amm_store)) = scorers(12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = random(&[1, C, 4, 8], &mut rng);
    let road = onehot(|_, _| 0, 16, 32);
    let split = onehot(|i, _| if i < 8 { 1 } else { 2 }, 16, 32);
    let changed = (&scores(&samm, &store, &z, &road) - &scores(&samm, &store, &z, &split))
        .iter()
        .any(|v| v.abs() > 1e-6);
    assert!(changed);
    assert_eq!(
        scores(&amm, &amm_store, &z, &road),
        scores(&amm, &amm_store, &z, &split)
    );
}

#[test]
fn zeroed_scorer_outputs_one_half() {
    let ((samm, mut store), _) = scorers(13);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random(&[2, C, 4, 8], &mut rng);
    let seg = Array::from_elem(IxDyn(&[2, CLASSES, 16, 32]), 0.25);
    let s = scores(&samm, &store, &z, &seg);
    assert_eq!(s.shape(), &[2, 1, 4, 8]);
    assert!(s.iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn scores_lie_in_unit_interval() {
    let ((samm, store), _) = scorers(14);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = random(&[1, C, 4, 8], &mut rng).mapv(|v| v * 50.0);
    let seg = onehot(|i, j| (i + j) % CLASSES, 16, 32);
    assert!(scores(&samm, &store, &z, &seg).iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn same_seed_same_weights() {
    let cfg = ModelConfig::tiny(32, 32);
    let a = Model::new(&cfg, 5).unwrap();
    let b = Model::new(&cfg, 5).unwrap();
    let c = Model::new(&cfg, 6).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
}

#[test]
fn generator_and_discriminator_stores_are_prefixed() {
    let model = Model::new(&ModelConfig::tiny(32, 32), 0).unwrap();
    for (prefix, store) in [
        ("gs.", &model.gs_params),
        ("gx.", &model.gx_params),
        ("ds.", &model.ds_params),
        ("dx.", &model.dx_params),
    ] {
        assert!(!store.is_empty());
        assert!(store.iter().all(|(name, _)| name.starts_with(prefix)), "{prefix}");
    }
    assert!(model.gs_params.find("gs.vq.codebook").is_some());
    assert!(model.gx_params.find("gx.vq.placeholder").is_some());
}
