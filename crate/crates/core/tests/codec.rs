use std::sync::Arc;

use sqgan_core::bitstream::{payload_bits, PayloadMode, HEADER_LEN};
use sqgan_core::codec::{decode, encode, onehot_volume, EncodeOptions};
use sqgan_core::data::synthetic_dataset;
use sqgan_core::error::Error;
use sqgan_core::model::Model;
use sqgan_core::networks::ModelConfig;
use sqgan_core::rate::{bits_budget, bpp_total};
use sqgan_core::semantic_map::{encode_onehot, ClassTable, SemanticMap};

fn fixture() -> (Model, Vec<(ndarray::Array3<f64>, SemanticMap)>) {
    let model = Model::new(&ModelConfig::tiny(64, 128), 21).unwrap();
    let table = Arc::new(ClassTable::cityscapes());
    let pairs = synthetic_dataset(2, 64, 128, 4)
        .samples
        .into_iter()
        .map(|s| {
            let map = encode_onehot(&s.labels, table.clone()).unwrap();
            (s.image, map)
        })
        .collect();
    (model, pairs)
}

#[test]
fn header_counts_follow_the_fractions() {
    let (model, pairs) = fixture();
    let (x, s) = &pairs[0];
    let k = model.config.positions();
    for (m_x, m_s) in [(0.35, 0.35), (0.2, 0.95), (1.0, 0.55)] {
        let opts = EncodeOptions {
            m_x,
            m_s,
            mode: PayloadMode::Fixed,
        };
        let enc = encode(&model, x, s, &opts).unwrap();
        assert_eq!(enc.header.n_x as usize, ((m_x * k as f64).floor() as usize).max(1));
        assert_eq!(enc.header.n_s as usize, ((m_s * k as f64).floor() as usize).max(1));
        let budget = bits_budget(m_x, 1024, k).unwrap().ceil() + bits_budget(m_s, 1024, k).unwrap().ceil();
        assert!(payload_bits(&enc.bytes) as f64 <= budget + 14.0);
        assert_eq!(enc.bytes.len() * 8 - HEADER_LEN * 8, enc.rate.actual_payload_bits as usize);
    }
}

#[test]
fn decode_recovers_the_transmitted_grids() {
    let (model, pairs) = fixture();
    for mode in [PayloadMode::Fixed, PayloadMode::Arithmetic] {
        for (x, s) in &pairs {
            let opts = EncodeOptions {
                m_x: 0.35,
                m_s: 0.55,
                mode,
            };
            let enc = encode(&model, x, s, &opts).unwrap();
            let dec = decode(&model, &enc.bytes).unwrap();
            assert_eq!(dec.ix, enc.ix);
            assert_eq!(dec.is, enc.is);
            assert_eq!(dec.header, enc.header);
            assert_eq!(dec.image.dim(), (3, 64, 128));
            assert_eq!(dec.labels.dims(), (64, 128));
            let again = encode(&model, x, s, &opts).unwrap();
            assert_eq!(again.bytes, enc.bytes);
        }
    }
}

#[test]
fn decoded_image_is_conditioned_on_decoded_labels() {
    let (model, pairs) = fixture();
    let (x, s) = &pairs[1];
    let opts = EncodeOptions {
        m_x: 0.5,
        m_s: 0.5,
        mode: PayloadMode::Arithmetic,
    };
    let enc = encode(&model, x, s, &opts).unwrap();
    let dec = decode(&model, &enc.bytes).unwrap();
    let (probs, labels) = model.decode_semantic(&dec.is).unwrap();
    assert_eq!(labels, dec.labels);
    assert_eq!(probs, dec.probabilities);
    let condition = onehot_volume(&labels, model.config.num_classes).unwrap();
    assert_eq!(model.decode_image(&dec.ix, &condition).unwrap(), dec.image);
}

#[test]
fn probabilities_are_normalized() {
    let (model, pairs) = fixture();
    let (x, s) = &pairs[0];
    let opts = EncodeOptions {
        m_x: 0.35,
        m_s: 0.35,
        mode: PayloadMode::Fixed,
    };
    let dec = decode(&model, &encode(&model, x, s, &opts).unwrap().bytes).unwrap();
    for col in dec.probabilities.lanes(ndarray::Axis(0)) {
        assert!((col.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn reported_bpp_matches_the_rate_formula() {
    let (model, pairs) = fixture();
    let (x, s) = &pairs[0];
    for (m_x, m_s) in [(0.2, 0.2), (0.35, 0.95)] {
        let opts = EncodeOptions {
            m_x,
            m_s,
            mode: PayloadMode::Arithmetic,
        };
        let enc = encode(&model, x, s, &opts).unwrap();
        assert!((enc.rate.bpp - bpp_total(m_x, m_s).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (model, pairs) = fixture();
    let (x, s) = &pairs[0];
    let bad_fraction = EncodeOptions {
        m_x: 1.5,
        m_s: 0.3,
        mode: PayloadMode::Fixed,
    };
    assert!(matches!(encode(&model, x, s, &bad_fraction), Err(Error::MaskFraction(_))));
    let other = Model::new(&ModelConfig::tiny(32, 64), 0).unwrap();
    let opts = EncodeOptions {
        m_x: 0.3,
        m_s: 0.3,
        mode: PayloadMode::Fixed,
    };
    let bytes = encode(&model, x, s, &opts).unwrap().bytes;
    assert!(matches!(decode(&other, &bytes), Err(Error::Shape(_))));
    assert!(matches!(encode(&other, x, s, &opts), Err(Error::Shape(_))));
}
