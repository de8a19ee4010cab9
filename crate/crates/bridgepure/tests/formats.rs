use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bridgepure::{archive, checkpoint, imageio};
use bridgepure_core::bridge_math::NoiseSchedule;
use bridgepure_core::image::Shape;
use bridgepure_core::pairing::{self, LeakageRequest};
use bridgepure_core::protections::{ProtectionSpec, Protector};
use bridgepure_core::score_model::{self, ModelConfig, PairSet, TrainConfig};
use bridgepure_core::synth::{self, SynthConfig};

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_archive() -> pairing::PairArchive {
    let reference = synth::generate(&SynthConfig { size: 8, classes: 4, ..SynthConfig::default() }, 24).unwrap();
    let spec = ProtectionSpec::default_mixture(Shape::new(3, 8, 8), 4, 17);
    let p = Protector::new(&spec, Shape::new(3, 8, 8)).unwrap();
    pairing::harvest_leakage(&p, &reference, &LeakageRequest::total(12), 5).unwrap()
}

#[test]
fn pair_archive_round_trip_is_byte_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let original = small_archive();
    archive::write_archive(&a, &original).unwrap();
    let back = archive::read_archive(&a).unwrap();
    assert_eq!(back, original);
    archive::write_archive(&b, &back).unwrap();
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn tampered_archive_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let original = small_archive();
    let m = archive::write_archive(tmp.path(), &original).unwrap();
    let victim = tmp.path().join(&m.records[0].protected);
    let mut img = imageio::read_png(&victim).unwrap();
    img.data[0] = if img.data[0] > 0.5 { 0.0 } else { 1.0 };
    imageio::write_png(&victim, &img).unwrap();
    assert!(archive::read_archive(tmp.path()).is_err());
}

#[test]
fn image_folder_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth::generate(&SynthConfig { size: 8, classes: 3, ..SynthConfig::default() }, 9).unwrap();
    imageio::write_folder(tmp.path(), &data).unwrap();
    let back = imageio::read_folder(tmp.path()).unwrap();
    assert_eq!(back.len(), data.len());
    for (x, y) in data.iter().zip(back.iter()) {
        assert_eq!((x.label, &x.image), (y.label, &y.image));
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions_and_bytes() {
    let schedule = NoiseSchedule::default_ve();
    let shape = Shape::new(1, 2, 2);
    let mut pairs = PairSet::new(shape.len());
    pairs.push(&[0.1, 0.2, 0.3, 0.4], &[0.2, 0.2, 0.4, 0.4]).unwrap();
    pairs.push(&[0.9, 0.8, 0.7, 0.6], &[0.8, 0.8, 0.6, 0.6]).unwrap();
    let cfg = TrainConfig { steps: 20, batch_size: 2, learning_rate: 1e-3, ..TrainConfig::default() };
    let model = score_model::fit(schedule, ModelConfig::image_mlp(shape, 16), &pairs, &cfg, &mut ()).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("model.bpck");
    checkpoint::save(&path, &model, Some("abc"), Some(3)).unwrap();
    let (back, header) = checkpoint::load(&path).unwrap();
    assert_eq!(header.config_hash.as_deref(), Some("abc"));
    assert_eq!((header.step, header.seed), (20, Some(3)));
    assert_eq!(checkpoint::encode(&back, Some("abc"), Some(3)), fs::read(&path).unwrap());

    let x = [0.3f32, 0.1, 0.5, 0.2];
    let a = model.predict_x0(&x, pairs.x_end(0), &[0.4]).unwrap();
    let b = back.predict_x0(&x, pairs.x_end(0), &[0.4]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let model = score_model::ScoreModel::new(NoiseSchedule::default_vp(), ModelConfig::scalar(0.1)).unwrap();
    let bytes = checkpoint::encode(&model, None, None);
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    assert!(checkpoint::decode(b"nope").is_err());
}
