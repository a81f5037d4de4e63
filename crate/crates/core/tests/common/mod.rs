#![allow(dead_code)]

use std::path::Path;

use crossview::config::RunConfig;
use crossview::data::{generate_synthetic, SynthConfig};

pub fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_affordances: 3,
        n_objects: 4,
        images_per_object: 3,
        image_size: 32,
        seed,
        ..SynthConfig::default()
    }
}

pub fn write_tiny(root: &Path, seed: u64) {
    generate_synthetic(&tiny_synth(seed), root).unwrap();
}

/// Small model matching [`tiny_synth`] data.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        lr: 0.01,
        epochs: 2,
        image_size: 32,
        channels: 8,
        reduced_channels: 4,
        rank: 2,
        d: 6,
        num_classes: 3,
        ..RunConfig::default()
    }
}

/// Relative path → bytes for every file under `root`.
pub fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
