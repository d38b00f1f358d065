//! In-memory corpora for tests, examples and the browser demo.

use std::path::PathBuf;

use crate::data::{ClassLabel, DatasetIndex, MemoryLoader, Sample};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

/// `per_class` identical constant images for each `(class, intensity)` pair.
pub fn constant_intensity_corpus(
    classes: &[(ClassLabel, f32)],
    per_class: usize,
    size: usize,
) -> (DatasetIndex, MemoryLoader) {
    let mut loader = MemoryLoader::default();
    let mut samples = Vec::new();
    for &(label, intensity) in classes {
        for i in 0..per_class {
            let path = PathBuf::from(format!("synthetic/{}/{i:04}.png", label.name()));
            loader.insert(path.clone(), Tensor::full(&[3, size, size], intensity));
            samples.push(Sample { path, label });
        }
    }
    (DatasetIndex::new(samples).expect("generated paths are unique"), loader)
}

/// Axial-slice phantom: a bright elliptical brain with dark ventricles whose
/// width grows with the class index, plus mild per-sample jitter and noise.
/// Returned as `[3, size, size]` with identical channels.
pub fn phantom_slice(label: ClassLabel, size: usize, rng: &mut SeededRng) -> Tensor {
    let s = size as f32;
    let jitter = |rng: &mut SeededRng, amp: f32| (rng.next_f32() - 0.5) * 2.0 * amp;
    let cx = 0.5 + jitter(rng, 0.03);
    let cy = 0.5 + jitter(rng, 0.03);
    let (rx, ry) = (0.36 + jitter(rng, 0.02), 0.44 + jitter(rng, 0.02));
    let ventricle = 0.05 + 0.045 * label.index() as f32 + jitter(rng, 0.01);
    let gap = 0.06 + 0.01 * label.index() as f32;
    let mut plane = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let x = (j as f32 + 0.5) / s - cx;
            let y = (i as f32 + 0.5) / s - cy;
            let r = (x / rx).powi(2) + (y / ry).powi(2);
            let mut v = if r < 1.0 { 0.75 - 0.25 * r } else { 0.02 };
            if (0.92..1.0).contains(&r) {
                v = 0.95;
            }
            for side in [-1.0f32, 1.0] {
                let vx = (x - side * gap) / ventricle;
                let vy = y / (2.2 * ventricle);
                if vx * vx + vy * vy < 1.0 {
                    v = 0.1;
                }
            }
            v += jitter(rng, 0.03);
            plane.push(v.clamp(0.0, 1.0));
        }
    }
    let mut data = plane.clone();
    data.extend_from_slice(&plane);
    data.extend_from_slice(&plane);
    Tensor::new(&[3, size, size], data).expect("shape matches buffer")
}

pub fn phantom_corpus(per_class: usize, size: usize, seed: u64) -> (DatasetIndex, MemoryLoader) {
    let mut rng = SeededRng::for_stream(seed, Stream::Synthetic);
    let mut loader = MemoryLoader::default();
    let mut samples = Vec::new();
    for label in ClassLabel::ALL {
        for i in 0..per_class {
            let path = PathBuf::from(format!("phantom/{}/{i:04}.png", label.name()));
            loader.insert(path.clone(), phantom_slice(label, size, &mut rng));
            samples.push(Sample { path, label });
        }
    }
    (DatasetIndex::new(samples).expect("generated paths are unique"), loader)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleLoader;

    #[test]
    fn constant_corpus_layout() {
        let (idx, loader) = constant_intensity_corpus(
            &[(ClassLabel::NonDemented, 0.2), (ClassLabel::VeryMildDemented, 0.8)],
            32,
            16,
        );
        assert_eq!(idx.per_class_counts(), [32, 32, 0, 0]);
        let x = loader.load(&idx.samples()[40]).unwrap();
        assert_eq!(x.shape(), &[3, 16, 16]);
        assert!(x.data().iter().all(|&v| v == 0.8));
    }

    #[test]
    fn phantoms_are_bounded_and_seeded() {
        let (a, la) = phantom_corpus(2, 32, 1);
        let (_, lb) = phantom_corpus(2, 32, 1);
        for s in a.samples() {
            let x = la.load(s).unwrap();
            assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(x, lb.load(s).unwrap());
        }
    }
}
