//! The configuration files shipped under configs/ must parse and validate.

use ratekd_core::config::{ArchPreset, DatasetKind, RunConfig};
use ratekd_core::metrics::SnnMode;
use std::path::Path;

fn load(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::from_file(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn desk_teacher_config_parses() {
    let cfg = load("mnist-desk-teacher.conf");
    assert_eq!(cfg.arch_preset, ArchPreset::ResnetMini);
    assert_eq!(cfg.stem_stride, 2);
    assert_eq!(cfg.dataset, DatasetKind::Mnist);
    assert_eq!(cfg.train_limit, 8192);
    assert_eq!(cfg.batch_size, 64);
}

#[test]
fn desk_student_config_parses() {
    let cfg = load("mnist-desk.conf");
    assert_eq!(cfg.arch_preset, ArchPreset::ResnetMini);
    assert_eq!(cfg.mode, SnnMode::Rate);
    assert_eq!(cfg.timesteps, 4);
    assert_eq!(cfg.surrogate_width, 2.0);
    assert_eq!(cfg.batch_size, 32);
    assert!(cfg.taps.is_empty(), "interior taps are the empty list");
    assert_eq!(cfg.alpha, 0.5);
}

#[test]
fn cifar_reference_config_parses() {
    let cfg = load("cifar10-resnet18.conf");
    assert_eq!(cfg.arch_preset, ArchPreset::Resnet18);
    assert_eq!(cfg.dataset, DatasetKind::Cifar10);
    assert_eq!(cfg.epochs, 300);
    assert_eq!(cfg.batch_size, 128);
    assert_eq!(cfg.weight_decay, 5e-4);
    assert_eq!(cfg.train_limit, 0);
}
