//! Corpus ingestion: class-per-directory scanning, image decoding, and the
//! deterministic stratified split / K-fold / batching used by training.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "usize", try_from = "usize")]
pub enum ClassLabel {
    NonDemented = 0,
    VeryMildDemented = 1,
    MildDemented = 2,
    ModerateDemented = 3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::NonDemented,
        ClassLabel::VeryMildDemented,
        ClassLabel::MildDemented,
        ClassLabel::ModerateDemented,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::param(format!("class index {i} not in 0..{NUM_CLASSES}")))
    }

    /// Canonical directory name in the corpus layout.
    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::NonDemented => "NonDemented",
            ClassLabel::VeryMildDemented => "VeryMildDemented",
            ClassLabel::MildDemented => "MildDemented",
            ClassLabel::ModerateDemented => "ModerateDemented",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<ClassLabel> for usize {
    fn from(c: ClassLabel) -> usize {
        c.index()
    }
}

impl TryFrom<usize> for ClassLabel {
    type Error = Error;
    fn try_from(i: usize) -> Result<Self> {
        ClassLabel::from_index(i)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub path: PathBuf,
    pub label: ClassLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    samples: Vec<Sample>,
}

impl DatasetIndex {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(&s.path) {
                return Err(Error::Layout(format!("duplicate sample path {}", s.path.display())));
            }
        }
        Ok(DatasetIndex { samples })
    }

    /// Index of placeholder paths with the given per-class counts; handy for
    /// exercising split logic without files.
    pub fn with_counts(counts: [usize; NUM_CLASSES]) -> Self {
        let samples = ClassLabel::ALL
            .into_iter()
            .flat_map(|label| {
                (0..counts[label.index()]).map(move |i| Sample {
                    path: PathBuf::from(format!("{}/{i:05}.png", label.name())),
                    label,
                })
            })
            .collect();
        DatasetIndex { samples }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn per_class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    fn subset(&self, mut picks: Vec<usize>) -> DatasetIndex {
        picks.sort_unstable();
        DatasetIndex {
            samples: picks.into_iter().map(|i| self.samples[i].clone()).collect(),
        }
    }

    fn positions_by_class(&self) -> [Vec<usize>; NUM_CLASSES] {
        let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label.index()].push(i);
        }
        by_class
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Index `<root>/{NonDemented,VeryMildDemented,MildDemented,ModerateDemented}/*.{png,jpg,jpeg}`.
///
/// Every image-named file must have a readable header; samples are sorted by path.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let mut samples = Vec::new();
    let mut unreadable = Vec::new();
    for label in ClassLabel::ALL {
        let dir = root.join(label.name());
        if !dir.is_dir() {
            return Err(Error::Layout(format!(
                "missing class directory {} under {}",
                label.name(),
                root.display()
            )));
        }
        let mut found = 0;
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if !path.is_file() || !has_image_extension(&path) {
                continue;
            }
            let readable = image::ImageReader::open(&path)
                .and_then(|r| r.with_guessed_format())
                .map_err(|e| e.to_string())
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()));
            match readable {
                Ok(_) => {
                    samples.push(Sample { path, label });
                    found += 1;
                }
                Err(_) => unreadable.push(path),
            }
        }
        if found == 0 && unreadable.is_empty() {
            return Err(Error::Layout(format!("class directory {} is empty", dir.display())));
        }
    }
    if !unreadable.is_empty() {
        unreadable.sort();
        let list: Vec<String> = unreadable.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Layout(format!("unreadable image files: {}", list.join(", "))));
    }
    samples.sort_by(|a, b| a.path.cmp(&b.path));
    DatasetIndex::new(samples)
}

#[derive(Deserialize)]
struct ManifestEntry {
    path: PathBuf,
    label: usize,
}

/// Load a JSON manifest `[{"path": ..., "label": 0..3}, ...]`. Relative paths
/// resolve against the manifest's directory.
pub fn load_manifest(manifest: impl AsRef<Path>) -> Result<DatasetIndex> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&std::fs::read(manifest)?)?;
    let samples = entries
        .into_iter()
        .map(|e| {
            let label = ClassLabel::from_index(e.label)
                .map_err(|_| Error::Layout(format!("label {} for {}", e.label, e.path.display())))?;
            let path = if e.path.is_absolute() { e.path } else { base.join(e.path) };
            Ok(Sample { path, label })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetIndex::new(samples)
}

/// A directory in the canonical layout, or a `.json` manifest file.
pub fn open_corpus(path: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = path.as_ref();
    if path.is_file() && path.extension().is_some_and(|e| e == "json") {
        load_manifest(path)
    } else {
        scan_dataset(path)
    }
}

/// Decode a PNG/JPEG into a `[3, height, width]` tensor with values in `[0, 1]`.
/// Grayscale sources are replicated across channels; other sizes are resized bilinearly.
pub fn decode_image(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| e.to_string())
        .and_then(|r| r.decode().map_err(|e| e.to_string()))
        .map_err(|reason| Error::Decode {
            path: path.to_path_buf(),
            reason,
        })?;
    decoded_to_tensor(&img, height, width)
}

pub fn decode_image_bytes(bytes: &[u8], height: usize, width: usize) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: PathBuf::from("<memory>"),
        reason: e.to_string(),
    })?;
    decoded_to_tensor(&img, height, width)
}

fn decoded_to_tensor(img: &image::DynamicImage, height: usize, width: usize) -> Result<Tensor> {
    let rgb = img.to_rgb32f();
    let (w0, h0) = (rgb.width() as usize, rgb.height() as usize);
    let hwc = rgb.into_raw();
    let hwc = if (h0, w0) == (height, width) {
        hwc
    } else {
        resize_bilinear(&hwc, h0, w0, 3, height, width)
    };
    hwc_to_chw(&hwc, height, width, 3)
}

pub fn hwc_to_chw(hwc: &[f32], h: usize, w: usize, c: usize) -> Result<Tensor> {
    let mut chw = vec![0.0; hwc.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                chw[(ch * h + i) * w + j] = hwc[(i * w + j) * c + ch];
            }
        }
    }
    Tensor::new(&[c, h, w], chw)
}

struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<AxisTap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            AxisTap {
                lo,
                hi: (lo + 1).min(n_in - 1),
                frac: (src - lo as f64) as f32,
            }
        })
        .collect()
}

/// Bilinear resize of an interleaved `h×w×c` buffer using pixel-center
/// alignment (`src = (dst + 0.5)·in/out − 0.5`, clamped at the borders).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    let px = |i: usize, j: usize, ch: usize| src[(i * w + j) * c + ch];
    for r in &rows {
        for q in &cols {
            for ch in 0..c {
                let top = px(r.lo, q.lo, ch) * (1.0 - q.frac) + px(r.lo, q.hi, ch) * q.frac;
                let bottom = px(r.hi, q.lo, ch) * (1.0 - q.frac) + px(r.hi, q.hi, ch) * q.frac;
                out.push(top * (1.0 - r.frac) + bottom * r.frac);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// `⌊fraction·n⌋`, robust to the product landing a hair under an integer.
fn train_share(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.floor() as usize
    }
}

/// Per class: shuffle with the seed, keep `⌊fraction·n_c⌋` for training and the
/// rest for validation. Both halves keep the original index order.
pub fn stratified_split(index: &DatasetIndex, spec: SplitSpec) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::param(format!("train fraction {} outside (0, 1)", spec.train_fraction)));
    }
    let mut rng = SeededRng::for_stream(spec.seed, Stream::Split);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut members) in index.positions_by_class().into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Layout(format!("class {} has no samples", ClassLabel::ALL[class])));
        }
        rng.shuffle(&mut members);
        let k = train_share(spec.train_fraction, members.len());
        val.extend_from_slice(&members[k..]);
        members.truncate(k);
        train.extend(members);
    }
    Ok((index.subset(train), index.subset(val)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: DatasetIndex,
    pub val: DatasetIndex,
}

/// Per class: shuffle, then deal round-robin into `k` validation folds.
pub fn stratified_kfold(index: &DatasetIndex, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::param(format!("k = {k}; need at least 2 folds")));
    }
    let mut rng = SeededRng::for_stream(seed, Stream::Fold);
    let mut assignment = vec![0usize; index.len()];
    for (class, mut members) in index.positions_by_class().into_iter().enumerate() {
        if members.len() < k {
            return Err(Error::param(format!(
                "class {} has {} samples, fewer than {k} folds",
                ClassLabel::ALL[class],
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        for (pos, &i) in members.iter().enumerate() {
            assignment[i] = pos % k;
        }
    }
    Ok((0..k)
        .map(|fold| {
            let (val, train): (Vec<usize>, Vec<usize>) =
                (0..index.len()).partition(|&i| assignment[i] == fold);
            Fold {
                train: index.subset(train),
                val: index.subset(val),
            }
        })
        .collect())
}

/// Shuffled positions `0..n` chunked into batches; the final short batch is kept.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::for_stream(seed ^ epoch, Stream::Batch).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Produces the network input for a sample.
pub trait SampleLoader: Sync {
    fn load(&self, sample: &Sample) -> Result<Tensor>;
}

/// Decodes images from disk at a fixed target size.
#[derive(Clone, Copy, Debug)]
pub struct DiskLoader {
    pub height: usize,
    pub width: usize,
}

impl SampleLoader for DiskLoader {
    fn load(&self, sample: &Sample) -> Result<Tensor> {
        decode_image(&sample.path, self.height, self.width)
    }
}

/// Pre-built tensors keyed by sample path.
#[derive(Clone, Debug, Default)]
pub struct MemoryLoader {
    images: HashMap<PathBuf, Tensor>,
}

impl MemoryLoader {
    pub fn insert(&mut self, path: impl Into<PathBuf>, image: Tensor) {
        self.images.insert(path.into(), image);
    }
}

impl SampleLoader for MemoryLoader {
    fn load(&self, sample: &Sample) -> Result<Tensor> {
        self.images.get(&sample.path).cloned().ok_or_else(|| Error::Decode {
            path: sample.path.clone(),
            reason: "not present in memory loader".into(),
        })
    }
}
