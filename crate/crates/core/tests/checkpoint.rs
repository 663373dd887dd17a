mod common;

use std::fs;
use std::path::{Path, PathBuf};

use mpdoc_core::checkpoint::{load_checkpoint, read_model_config, save_checkpoint, CHECKPOINT_VERSION};
use mpdoc_core::model::Model;
use mpdoc_core::{Error, TaskSchedule, TrainConfig, Trainer};

fn saved(dir: &Path) -> PathBuf {
    let cfg = common::small_config();
    let data = common::pretrain_data(&cfg, &common::random_docs(&cfg, 6, 31));
    let train = TrainConfig {
        lr: 1e-3,
        mvlm_clf: TaskSchedule::new(2, 1),
        dsp: TaskSchedule::new(2, 1),
        dtm: TaskSchedule::new(2, 1),
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Model::<f64>::new(&cfg, 1).unwrap(), train).unwrap();
    t.train(&data, 2, |_, _| Ok(())).unwrap();
    let path = dir.join("run.ckpt");
    save_checkpoint(&t, &path).unwrap();
    path
}

#[test]
fn roundtrip_restores_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    let t = load_checkpoint::<f64>(&path, &common::small_config()).unwrap();
    assert_eq!((t.step, t.opt.t), (2, 2));
    assert_eq!(read_model_config(&path).unwrap(), common::small_config());
    assert!(!path.with_extension("partial").exists());
}

#[test]
fn truncated_file_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    let bytes = fs::read(&path).unwrap();
    for keep in [10, 60, bytes.len() - 1] {
        fs::write(&path, &bytes[..keep]).unwrap();
        let err = load_checkpoint::<f64>(&path, &common::small_config()).err().unwrap();
        assert!(matches!(err, Error::CheckpointIntegrity(_)), "{keep}: {err}");
    }
}

#[test]
fn flipped_byte_fails_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    let mut bytes = fs::read(&path).unwrap();
    let at = bytes.len() - 100;
    bytes[at] ^= 0x40;
    fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint::<f64>(&path, &common::small_config()).err().unwrap();
    assert!(err.to_string().contains("checksum"), "{err}");
}

#[test]
fn version_mismatch_names_both_versions() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    let mut bytes = fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint::<f64>(&path, &common::small_config()).err().unwrap();
    assert!(matches!(err, Error::CheckpointVersion { found: 7, expected: CHECKPOINT_VERSION }));
    let msg = err.to_string();
    assert!(msg.contains('7') && msg.contains(&CHECKPOINT_VERSION.to_string()), "{msg}");
}

#[test]
fn config_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    let mut other = common::small_config();
    other.window = 8;
    let err = load_checkpoint::<f64>(&path, &other).err().unwrap();
    match &err {
        Error::CheckpointConfig { field, stored, current } => {
            assert_eq!((field.as_str(), stored.as_str(), current.as_str()), ("window", "4", "8"));
        }
        e => panic!("unexpected {e}"),
    }
    assert!(err.to_string().contains("window"));
}

#[test]
fn wrong_precision_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    assert!(load_checkpoint::<f32>(&path, &common::small_config()).is_err());
}
