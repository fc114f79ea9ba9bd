#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY_CONFIG: &str = "\
# small networks so every command runs in seconds
epochs = 20
hidden = 16
depth = 2
shape_dim = 4
deform_dim = 4
mesh_res = 32
batch_size = 128
eik_points = 16
k_control = 20
deform_hidden = 16
deform_depth = 2
cloud_points = 200
grid_res = 16
channels = 4,8
enc_epochs = 2
augment = 8
iterations = 5
fit_cloud_points = 200
seed = 3
";

pub fn nlf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlf")).args(args).current_dir(dir).output().expect("nlf runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nlf(dir, args);
    assert!(
        out.status.success(),
        "nlf {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Dataset, shape, deformation and encoder checkpoints trained with
/// [`TINY_CONFIG`] inside `dir`.
pub fn tiny_models(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("tiny.cfg"), TINY_CONFIG).unwrap();
    let c = ["--config", "tiny.cfg"];
    ok(dir, &[&["synth", "--n", "4", "--res", "32", "--out", "data"][..], &c].concat());
    ok(dir, &[&["train-shape", "--data", "data", "--out", "shape.nlf"][..], &c].concat());
    ok(dir, &[&["train-deform", "--data", "data", "--shape", "shape.nlf", "--out", "deform.nlf"][..], &c].concat());
    ok(dir, &[&["train-enc", "--data", "data", "--shape", "shape.nlf", "--deform", "deform.nlf", "--out", "enc.nlf"][..], &c].concat());
    dir.to_path_buf()
}

/// Every file below `dir` except run manifests, with its bytes.
pub fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = nlf_core::io::list_files(dir).unwrap();
    files.retain(|p| !p.to_string_lossy().ends_with("manifest.json"));
    files.into_iter().map(|p| (p.clone(), std::fs::read(dir.join(&p)).unwrap())).collect()
}
