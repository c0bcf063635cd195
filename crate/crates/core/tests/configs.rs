//! The shipped configuration files load and match the built-in toy settings.

use std::path::PathBuf;

use kurtlab::harness::config::{ConfigFile, TrainConfig};
use kurtlab::harness::GridSettings;

fn shipped(name: &str) -> ConfigFile {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ConfigFile::load(&path).unwrap()
}

#[test]
fn train_config_is_the_toy_default() {
    assert_eq!(shipped("train.toy.json").train_config().unwrap(), TrainConfig::toy());
}

#[test]
fn grid_config_is_the_toy_grid() {
    let file = shipped("grid.toy.json");
    let s = GridSettings::from_config(&file).unwrap();
    let toy = GridSettings::toy();
    assert_eq!(s.base, toy.base);
    assert_eq!((s.eta_sweep, s.pilot_steps, s.eval_batches), (toy.eta_sweep, toy.pilot_steps, toy.eval_batches));
    assert_eq!(file.bits_a, Some(vec![6]));
}

#[test]
fn sweep_and_ablation_configs_validate() {
    let sweep = shipped("sweep.toy.json");
    assert!(sweep.train_config().unwrap().block.residual);
    assert_eq!(sweep.bits_w.as_deref(), Some(&[4, 6, 8, 16][..]));
    let ablate = shipped("ablate.toy.json");
    assert!(!ablate.train_config().unwrap().block.residual);
    assert_eq!(ablate.beta_list, Some(vec![1.0, 1.1]));
}
