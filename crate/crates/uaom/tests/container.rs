use std::path::PathBuf;

use uaom::container::{decode, encode, evaluate_taps, load_container, self_check, MAGIC, OUTPUT_TAP};
use uaom::{ContainerError, Error};
use uaom_core::{Layer, Tensor};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn bytes(name: &str) -> Vec<u8> {
    std::fs::read(fixture(name)).unwrap()
}

#[test]
fn committed_fixtures_load_and_self_check() {
    for name in ["backbone.uaom", "descriptor.uaom", "tiny.uaom"] {
        let c = load_container(fixture(name)).unwrap();
        assert!(!c.references.is_empty(), "{name} carries no references");
        assert!(c.header.fixture_seed.is_some());
    }
    let bb = load_container(fixture("backbone.uaom")).unwrap();
    assert_eq!(bb.model.taps().len(), 5);
    let desc = load_container(fixture("descriptor.uaom")).unwrap();
    assert!(desc.model.unit_norm_output());
    assert_eq!(desc.model.output_channels(), 128);
}

#[test]
fn tiny_fixture_reproduces_its_ones_reference() {
    let c = load_container(fixture("tiny.uaom")).unwrap();
    let convs = c.model.layers().iter().filter(|l| matches!(l, Layer::Conv { .. })).count();
    assert_eq!(convs, 2);
    assert_eq!(c.model.taps().len(), 1);
    let ones = c
        .references
        .iter()
        .find(|r| r.input.data.iter().all(|v| *v == 1.0))
        .expect("a ones-input reference");
    let input = ones.input.to_tensor().unwrap();
    for out in &ones.outputs {
        let got = evaluate_taps(&c.model, &input, &[out.tap.as_str()]).unwrap().remove(0);
        let want = out.value.to_tensor().unwrap();
        assert_eq!(got.data().len(), want.data().len());
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-4, "{}: {g} vs {w}", out.tap);
        }
    }
}

#[test]
fn encode_round_trips_payloads_bit_exact() {
    let original = bytes("backbone.uaom");
    let c = decode(&original).unwrap();
    let again = encode(&c.model, &c.references, c.header.fixture_seed).unwrap();
    let d = decode(&again).unwrap();
    assert_eq!(d.header, c.header);
    assert_eq!(d.model, c.model);
    assert_eq!(d.references, c.references);
    assert_eq!(again, original);
}

#[test]
fn bad_magic_is_rejected() {
    let mut b = bytes("tiny.uaom");
    b[..4].copy_from_slice(b"NOPE");
    assert_eq!(decode(&b).unwrap_err(), ContainerError::BadMagic(*b"NOPE"));
    assert_eq!(&bytes("tiny.uaom")[..4], MAGIC);
}

#[test]
fn unknown_version_is_rejected() {
    let mut b = bytes("tiny.uaom");
    b[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert_eq!(decode(&b).unwrap_err(), ContainerError::UnsupportedVersion(2));
}

#[test]
fn truncation_reports_byte_length() {
    let full = bytes("tiny.uaom");
    let header_len = u64::from_le_bytes(full[8..16].try_into().unwrap()) as usize;
    for cut in [2, 10, 16 + header_len / 2, 16 + header_len + 4, full.len() - 1] {
        match decode(&full[..cut]) {
            Err(ContainerError::ByteLength { .. }) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
}

#[test]
fn corrupted_weights_fail_the_self_check() {
    let mut b = bytes("tiny.uaom");
    let header_len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    let first = (16 + header_len).div_ceil(4) * 4;
    let w = f32::from_le_bytes(b[first..first + 4].try_into().unwrap());
    b[first..first + 4].copy_from_slice(&(w + 10.0).to_le_bytes());
    let c = decode(&b).unwrap();
    assert!(matches!(self_check(&c), Err(ContainerError::SelfCheck { .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.uaom");
    std::fs::write(&path, &b).unwrap();
    match load_container(&path) {
        Err(Error::Container { path: p, source }) => {
            assert_eq!(p, path);
            assert!(matches!(source, ContainerError::SelfCheck { .. }));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn descriptor_output_tap_is_unit_norm() {
    let c = load_container(fixture("descriptor.uaom")).unwrap();
    let patch = Tensor::from_fn(32, 32, 1, |y, x, _| ((x * 7 + y * 3) % 11) as f32 / 11.0 - 0.5);
    let out = evaluate_taps(&c.model, &patch, &[OUTPUT_TAP]).unwrap().remove(0);
    let norm: f32 = out.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() <= 1e-4);
}
