#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use demenscan::data::ClassLabel;
use demenscan::synthetic::phantom_slice;
use demenscan::SeededRng;

pub fn demenscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demenscan"))
        .args(args)
        .output()
        .expect("spawn demenscan")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Grayscale phantom PNGs in the class-per-directory layout.
pub fn write_phantom_corpus(root: &Path, per_class: [usize; 4], size: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for label in ClassLabel::ALL {
        let dir = root.join(label.name());
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class[label.index()] {
            let x = phantom_slice(label, size, &mut rng);
            let pixels = x.data()[..size * size]
                .iter()
                .map(|v| (v * 255.0).round() as u8)
                .collect();
            image::GrayImage::from_raw(size as u32, size as u32, pixels)
                .unwrap()
                .save(dir.join(format!("{i:04}.png")))
                .unwrap();
        }
    }
}
