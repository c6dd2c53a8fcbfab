use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sqgan_core::augmentation::{
    augment_batch, color_jitter, crop_rotate, harvest, paste, paste_class_ids, AugmentConfig,
};
use sqgan_core::semantic_map::{ClassTable, LabelMap};

fn scene(sign_at: Option<(usize, usize)>) -> (Array3<f64>, LabelMap) {
    let table = ClassTable::cityscapes();
    let road = table.id_of("road").unwrap() as u8;
    let sign = table.id_of("traffic sign").unwrap() as u8;
    let mut labels = LabelMap::filled(32, 48, road);
    let mut x = Array3::from_elem((3, 32, 48), 0.2);
    if let Some((top, left)) = sign_at {
        for i in top..top + 4 {
            for j in left..left + 3 {
                labels.set(i, j, sign);
                for c in 0..3 {
                    x[[c, i, j]] = 0.9;
                }
            }
        }
    }
    (x, labels)
}

#[test]
fn harvest_finds_connected_objects() {
    let table = ClassTable::cityscapes();
    let (x, mut labels) = scene(Some((2, 2)));
    let sign = table.id_of("traffic sign").unwrap() as u8;
    labels.set(20, 30, sign);
    let patches = harvest(&[(&x, &labels)], &paste_class_ids(&table));
    assert_eq!(patches.len(), 2);
    assert_eq!(patches[0].mask.dim(), (4, 3));
    assert_eq!(patches[0].area(), 12);
    assert_eq!(patches[1].area(), 1);
    assert!(patches.iter().all(|p| p.class_id == sign && p.source == 0));
    assert!(patches[0].pixels.iter().all(|&v| v == 0.9));
}

#[test]
fn pasting_never_covers_relevant_pixels() {
    let table = ClassTable::cityscapes();
    let (donor_x, donor_labels) = scene(Some((5, 5)));
    let patches = harvest(&[(&donor_x, &donor_labels)], &paste_class_ids(&table));
    let (x, labels) = scene(Some((10, 20)));
    let relevant = table.relevant_mask();
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0;
    for _ in 0..20 {
        let (px, pl, placed) = paste(&x, &labels, &patches, &table, &cfg, &mut rng);
        total += placed;
        for i in 0..32 {
            for j in 0..48 {
                if relevant[labels.get(i, j) as usize] {
                    assert_eq!(pl.get(i, j), labels.get(i, j));
                    assert_eq!(px[[0, i, j]], x[[0, i, j]]);
                }
                if pl.get(i, j) != labels.get(i, j) {
                    assert_eq!(px[[1, i, j]], 0.9);
                }
            }
        }
        let added = pl.count(patches[0].class_id) - labels.count(patches[0].class_id);
        // Signs are relevant, so pastes never overlap each other.
        assert_eq!(added, 12 * placed);
    }
    assert!(total > 0);
}

#[test]
fn no_patches_no_change() {
    let table = ClassTable::cityscapes();
    let (x, labels) = scene(None);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (px, pl, placed) = paste(&x, &labels, &[], &table, &AugmentConfig::default(), &mut rng);
    assert_eq!((px, pl, placed), (x, labels, 0));
}

#[test]
fn identity_warp_when_ranges_are_zero() {
    let cfg = AugmentConfig {
        min_crop: 1.0,
        max_rotation_deg: 0.0,
        jitter: 0.0,
        ..AugmentConfig::default()
    };
    let (x, labels) = scene(Some((3, 7)));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (wx, wl) = crop_rotate(&x, &labels, &cfg, &mut rng);
    assert_eq!(wl, labels);
    assert!((&wx - &x).iter().all(|v| v.abs() < 1e-12));
    assert!((&color_jitter(&x, &cfg, &mut rng) - &x).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn warps_keep_shapes_and_ranges() {
    let cfg = AugmentConfig::default();
    let (x, labels) = scene(Some((12, 20)));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let (wx, wl) = crop_rotate(&x, &labels, &cfg, &mut rng);
        assert_eq!(wx.dim(), x.dim());
        assert_eq!(wl.dims(), labels.dims());
        let classes: std::collections::HashSet<u8> = labels.labels().iter().copied().collect();
        assert!(wl.labels().iter().all(|c| classes.contains(c)));
        let j = color_jitter(&wx, &cfg, &mut rng);
        assert!(j.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn batches_take_patches_only_from_other_images() {
    let table = ClassTable::cityscapes();
    let cfg = AugmentConfig {
        min_crop: 1.0,
        max_rotation_deg: 0.0,
        jitter: 0.0,
        ..AugmentConfig::default()
    };
    let sign = table.id_of("traffic sign").unwrap() as u8;
    let batch = vec![scene(Some((4, 4))), scene(None)];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut received = 0;
    for _ in 0..10 {
        let out = augment_batch(&batch, &table, &cfg, &mut rng);
        assert_eq!(out.len(), 2);
        // The only sign lives in image 0, so image 0 never gains more.
        assert_eq!(out[0].1.count(sign), 12);
        received += out[1].1.count(sign);
    }
    assert!(received > 0);
    let off = AugmentConfig {
        enabled: false,
        ..AugmentConfig::default()
    };
    let same = augment_batch(&batch, &table, &off, &mut rng);
    assert_eq!(same[1].1, batch[1].1);
}

#[test]
fn config_validation() {
    assert!(AugmentConfig::default().validate().is_ok());
    for cfg in [
        AugmentConfig {
            min_crop: 0.0,
            ..AugmentConfig::default()
        },
        AugmentConfig {
            max_rotation_deg: 95.0,
            ..AugmentConfig::default()
        },
        AugmentConfig {
            jitter: 1.0,
            ..AugmentConfig::default()
        },
    ] {
        assert!(cfg.validate().is_err());
    }
}
