#![allow(dead_code)]

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use dsf_cli::idx::{encode_idx, IdxDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 12;

/// Ring-shaped digits: class `c` is a ring whose radius grows with `c`, so
/// the label is rotation invariant and easy to learn.
pub fn ring_dataset(count: usize, seed: u64) -> IdxDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count * SIDE * SIDE);
    let mut labels = Vec::with_capacity(count);
    let c = (SIDE as f64 - 1.0) / 2.0;
    for _ in 0..count {
        let label: u8 = rng.random_range(0..10);
        let radius = 0.5 + 0.5 * f64::from(label);
        let phase = rng.random_range(0.0..2.0 * PI);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (dy, dx) = (y as f64 - c, x as f64 - c);
                let r = (dy * dy + dx * dx).sqrt();
                let ring = (-(r - radius).powi(2) / 0.5).exp();
                let texture = 0.75 + 0.25 * (3.0 * dy.atan2(dx) + phase).cos();
                images.push((255.0 * ring * texture).round() as u8);
            }
        }
        labels.push(label);
    }
    IdxDataset { images, labels, rows: SIDE, cols: SIDE }
}

/// Writes train and test IDX files under `dir`.
pub fn write_rings(dir: &Path, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    for (name, count, seed) in [("train", train, 1), ("t10k", test, 2)] {
        let (images, labels) = encode_idx(&ring_dataset(count, seed));
        fs::write(dir.join(format!("{name}-images-idx3-ubyte")), images).unwrap();
        fs::write(dir.join(format!("{name}-labels-idx1-ubyte")), labels).unwrap();
    }
}

/// A small two-block run on 12x12 ring images; keys in `extra` override the
/// defaults.
pub fn small_config(n: usize, extra: &str) -> String {
    let base = format!(
        "model.n = {n}\n\
         model.block_units = 1, 1\n\
         model.block_out = 2, 3\n\
         model.stem = 2\n\
         model.growth1 = 2\n\
         model.growth2 = 2\n\
         model.head = 8, 8\n\
         train.batch_size = 16\n\
         train.lr = 0.01\n\
         train.seed = 3\n\
         data.dir = data\n\
         data.train_size = 256\n\
         data.test_size = 64\n\
         data.image_size = {SIDE}\n\
         output.dir = run\n"
    );
    let key = |line: &str| line.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = base.lines().filter(|l| !overridden.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    text.push_str(extra);
    text.push('\n');
    text
}

/// A workspace holding ring data and a config file; returns the config path.
pub fn setup(root: &Path, config: &str) -> PathBuf {
    if !root.join("data").exists() {
        write_rings(&root.join("data"), 512, 128);
    }
    let path = root.join("run.cfg");
    fs::write(&path, config).unwrap();
    path
}

/// The MNIST directory, when it has been downloaded.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("DSF_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("t10k-images-idx3-ubyte").is_file().then_some(dir)
}
