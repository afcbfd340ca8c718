//! File formats: raw grids, radiographs, checkpoints, manifests.

use biplanar_core::autodiff::checkpoint;
use biplanar_core::drr::{render_drr, DrrImage, DEFAULT_STEP};
use biplanar_core::geometry::BiplanarRig;
use biplanar_core::model::{sidecar_path, Model, ModelConfig};
use biplanar_core::rawio::{self, RawHeader};
use biplanar_core::volume::{generate_phantom, load_volume, save_volume, PhantomSpec, Volume, VolumeGeometry};
use biplanar_core::Error;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn volumes_round_trip_bit_exactly(
        dims in prop::array::uniform3(2usize..9),
        spacing in prop::array::uniform3(0.1f64..3.0),
        origin in prop::array::uniform3(-50.0f64..50.0),
        values in prop::collection::vec(-1e6f32..1e6, 512),
    ) {
        let geom = VolumeGeometry::new(dims, spacing, origin).unwrap();
        let data = values[..geom.len()].to_vec();
        let vol = Volume::new(geom, data).unwrap();
        let bytes = vol.to_bytes().unwrap();
        let back = Volume::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.geometry(), vol.geometry());
        let same = back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}

#[test]
fn phantom_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.raw");
    let vol = generate_phantom(&PhantomSpec::with_seed(9), [20, 18, 16]).unwrap();
    save_volume(&vol, &path).unwrap();
    assert_eq!(load_volume(&path).unwrap(), vol);
}

#[test]
fn truncated_payload_reports_both_sizes() {
    let vol = Volume::filled([4, 4, 4], 0.5).unwrap();
    let bytes = vol.to_bytes().unwrap();
    let err = Volume::from_bytes(&bytes[..bytes.len() - 6]).unwrap_err();
    assert!(matches!(err, Error::PayloadSize { expected: 256, actual: 250 }), "{err:?}");
    assert!(err.to_string().contains("256") && err.to_string().contains("250"));
}

#[test]
fn corrupted_headers_and_values_are_rejected() {
    let vol = Volume::filled([4, 4, 4], 0.5).unwrap();
    let bytes = vol.to_bytes().unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();

    let mut garbled = bytes.clone();
    garbled[0] = b'#';
    assert!(matches!(Volume::from_bytes(&garbled), Err(Error::Format(_))));

    assert!(matches!(Volume::from_bytes(&bytes[..nl]), Err(Error::Format(_))));

    let header = String::from_utf8(bytes[..nl].to_vec()).unwrap().replace("f32le", "f64le");
    let mut other = header.into_bytes();
    other.extend_from_slice(&bytes[nl..]);
    assert!(matches!(Volume::from_bytes(&other), Err(Error::Format(_))));

    let mut nan = bytes.clone();
    nan[nl + 1 + 8..nl + 1 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(Volume::from_bytes(&nan), Err(Error::Data(_))));
}

#[test]
fn missing_file_names_the_path() {
    let err = load_volume(std::path::Path::new("/nonexistent/v.raw")).unwrap_err();
    assert!(matches!(err, Error::File { .. }));
    assert!(err.to_string().contains("/nonexistent/v.raw"));
}

#[test]
fn radiograph_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vol = generate_phantom(&PhantomSpec::with_seed(4), [16, 16, 16]).unwrap();
    let pose = BiplanarRig::default().lat;
    let img = render_drr(&vol, &pose, (12, 10), DEFAULT_STEP).unwrap();
    let path = dir.path().join("lat.raw");
    img.save_raw(&path).unwrap();
    assert_eq!(DrrImage::load_raw(&path, pose, DEFAULT_STEP).unwrap(), img);
    let png = dir.path().join("lat.png");
    img.save_png(&png).unwrap();
    assert!(std::fs::metadata(&png).unwrap().len() > 0);

    // A volume is not a radiograph.
    let vpath = dir.path().join("v.raw");
    save_volume(&vol, &vpath).unwrap();
    assert!(matches!(DrrImage::load_raw(&vpath, pose, DEFAULT_STEP), Err(Error::Format(_))));
}

#[test]
fn raw_header_is_a_single_json_line() {
    let bytes = rawio::encode(&RawHeader::image(2, 3), &[0.0; 6]).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let v: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
    assert_eq!(v["dims"], serde_json::json!([1, 2, 3]));
    assert_eq!(v["dtype"], "f32le");
    assert_eq!(bytes.len(), nl + 1 + 24);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::new(ModelConfig::miniature()).unwrap();
    model.save(&path).unwrap();
    let back = Model::<f32>::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    for (a, b) in model.params().values().iter().zip(back.params().values()) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert!(Model::<f32>::load_expecting(&path, &model.config().digest()).is_ok());
    assert!(matches!(Model::<f32>::load_expecting(&path, "0000"), Err(Error::Versioning(_))));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = Model::<f32>::new(ModelConfig::miniature()).unwrap();
    let bytes = checkpoint::encode(model.params());

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(checkpoint::decode(&magic), Err(Error::Format(_))));

    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(checkpoint::VERSION + 1).to_le_bytes());
    assert!(matches!(checkpoint::decode(&version), Err(Error::Versioning(_))));

    for cut in [3, 7, 9, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(checkpoint::decode(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
}

#[test]
fn checkpoint_for_another_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Model::<f32>::new(ModelConfig::miniature()).unwrap().save(&path).unwrap();
    let mut other = Model::<f32>::new(ModelConfig {
        c_local: 5,
        ..ModelConfig::miniature()
    })
    .unwrap();
    let err = other.params_mut().assign(&checkpoint::load(&path).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Versioning(_)));
}

#[test]
fn tampered_sidecar_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Model::<f32>::new(ModelConfig::miniature()).unwrap().save(&path).unwrap();
    let side = sidecar_path(&path);
    let text = std::fs::read_to_string(&side).unwrap().replace("\"pe_freqs\": 1", "\"pe_freqs\": 2");
    std::fs::write(&side, text).unwrap();
    assert!(matches!(Model::<f32>::load(&path), Err(Error::Versioning(_))));
}
