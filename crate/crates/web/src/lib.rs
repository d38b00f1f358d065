//! Browser demo: trains a small classifier on synthetic brain-slice phantoms
//! and exposes classification, guided-backprop saliency, feature maps and
//! filter views to a static page.

use demenscan::data::{decode_image_bytes, stratified_split, ClassLabel, DatasetIndex, MemoryLoader, Sample, SampleLoader, SplitSpec};
use demenscan::model::layers::softmax;
use demenscan::model::network::{forward, Mode};
use demenscan::synthetic::phantom_slice;
use demenscan::train::{EpochMetrics, Metrics, TrainConfig, Trainer};
use demenscan::{xai, ModelSpec, Result, SeededRng, Tensor};
use wasm_bindgen::prelude::*;

pub const IMAGE_SIZE: usize = 32;
const PER_CLASS: usize = 24;

/// Everything the page interacts with; kept free of JS types so it can be
/// tested natively.
pub struct Session {
    trainer: Trainer,
    train: DatasetIndex,
    val: DatasetIndex,
    loader: MemoryLoader,
    gallery: Vec<Sample>,
    /// Gallery positions from here on are uploads.
    phantoms: usize,
    history: Vec<EpochMetrics>,
}

impl Session {
    pub fn new(seed: u64) -> Result<Self> {
        let spec = ModelSpec {
            fc_widths: vec![64, 32],
            ..ModelSpec::with_filters(IMAGE_SIZE, &[8, 16, 16, 8])
        };
        let config = TrainConfig {
            batch_size: 16,
            seed,
            spec,
            ..TrainConfig::default()
        };
        let mut rng = SeededRng::new(seed);
        let mut loader = MemoryLoader::default();
        let mut samples = Vec::new();
        for label in ClassLabel::ALL {
            for i in 0..PER_CLASS {
                let path = format!("phantom/{}/{i:03}.png", label.name());
                loader.insert(path.as_str(), phantom_slice(label, IMAGE_SIZE, &mut rng));
                samples.push(Sample {
                    path: path.into(),
                    label,
                });
            }
        }
        let index = DatasetIndex::new(samples)?;
        let (train, val) = stratified_split(&index, SplitSpec { train_fraction: 0.8, seed })?;
        Ok(Session {
            trainer: Trainer::new(config)?,
            phantoms: val.len(),
            gallery: val.samples().to_vec(),
            train,
            val,
            loader,
            history: Vec::new(),
        })
    }

    fn spec(&self) -> &ModelSpec {
        &self.trainer.config().spec
    }

    pub fn train_epochs(&mut self, n: usize) -> Result<&[EpochMetrics]> {
        for _ in 0..n {
            let m = self.trainer.run_epoch(&self.train, &self.val, &self.loader)?;
            self.history.push(m);
        }
        Ok(&self.history)
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn gallery_len(&self) -> usize {
        self.gallery.len()
    }

    /// True class of a phantom; `None` for uploads.
    pub fn gallery_label(&self, i: usize) -> Option<ClassLabel> {
        self.gallery[..self.phantoms].get(i).map(|s| s.label)
    }

    /// Add an uploaded PNG/JPEG to the gallery; returns its position.
    pub fn add_image(&mut self, bytes: &[u8]) -> Result<usize> {
        let x = decode_image_bytes(bytes, IMAGE_SIZE, IMAGE_SIZE)?;
        let path = format!("upload/{:03}.png", self.gallery.len());
        self.loader.insert(path.as_str(), x);
        self.gallery.push(Sample {
            path: path.into(),
            label: ClassLabel::NonDemented,
        });
        Ok(self.gallery.len() - 1)
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        let sample = self
            .gallery
            .get(i)
            .ok_or_else(|| demenscan::Error::Parameter(format!("no gallery image {i}")))?;
        self.loader.load(sample)
    }

    /// First channel of gallery image `i` as 8-bit grayscale.
    pub fn image_pixels(&self, i: usize) -> Result<Vec<u8>> {
        let x = self.image(i)?;
        Ok(x.data()[..IMAGE_SIZE * IMAGE_SIZE]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect())
    }

    pub fn probabilities(&self, i: usize) -> Result<Vec<f32>> {
        let trace = forward(self.spec(), self.trainer.parameters(), &self.image(i)?, Mode::Eval)?;
        Ok(softmax(&trace.logits).into_data())
    }

    pub fn saliency(&self, i: usize, class: usize) -> Result<Vec<u8>> {
        let map = xai::guided_backprop(self.spec(), self.trainer.parameters(), &self.image(i)?, class)?;
        Ok(map.pixels)
    }

    /// The first `n` maps of `layer`, concatenated; each is `side × side`.
    pub fn feature_maps(&self, i: usize, layer: usize, n: usize) -> Result<(usize, Vec<u8>)> {
        let set = xai::feature_maps(self.spec(), self.trainer.parameters(), &self.image(i)?, layer, n)?;
        let side = set.maps.first().map_or(0, |m| m.width);
        Ok((side, set.maps.into_iter().flat_map(|m| m.pixels).collect()))
    }

    /// Grid of the first `n` filters of `layer`, one row per filter.
    pub fn filter_grid(&self, layer: usize, n: usize, scale: usize) -> Result<xai::GrayImage> {
        let cells = xai::visualize_filters(self.spec(), self.trainer.parameters(), layer, n)?;
        Ok(xai::filter_grid(&cells, scale, 2))
    }
}

fn js(e: demenscan::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsValue> {
        Ok(Demo {
            session: Session::new(seed as u64).map_err(js)?,
        })
    }

    #[wasm_bindgen(js_name = imageSize)]
    pub fn image_size(&self) -> usize {
        IMAGE_SIZE
    }

    #[wasm_bindgen(js_name = galleryLen)]
    pub fn gallery_len(&self) -> usize {
        self.session.gallery_len()
    }

    /// Class name of a phantom; empty for uploads.
    #[wasm_bindgen(js_name = galleryLabel)]
    pub fn gallery_label(&self, i: usize) -> String {
        self.session.gallery_label(i).map_or(String::new(), |l| l.name().to_string())
    }

    #[wasm_bindgen(js_name = classNames)]
    pub fn class_names(&self) -> Vec<String> {
        ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect()
    }

    /// Train `n` more epochs; returns every epoch's metrics as JSON lines.
    #[wasm_bindgen(js_name = trainEpochs)]
    pub fn train_epochs(&mut self, n: usize) -> std::result::Result<String, JsValue> {
        let epochs = self.session.train_epochs(n).map_err(js)?.to_vec();
        Ok(Metrics { epochs }.to_jsonl())
    }

    #[wasm_bindgen(js_name = addImage)]
    pub fn add_image(&mut self, bytes: &[u8]) -> std::result::Result<usize, JsValue> {
        self.session.add_image(bytes).map_err(js)
    }

    #[wasm_bindgen(js_name = imagePixels)]
    pub fn image_pixels(&self, i: usize) -> std::result::Result<Vec<u8>, JsValue> {
        self.session.image_pixels(i).map_err(js)
    }

    pub fn probabilities(&self, i: usize) -> std::result::Result<Vec<f32>, JsValue> {
        self.session.probabilities(i).map_err(js)
    }

    pub fn saliency(&self, i: usize, class: usize) -> std::result::Result<Vec<u8>, JsValue> {
        self.session.saliency(i, class).map_err(js)
    }

    /// Concatenated maps; the side length is `imageSize >> (layer - 1)`.
    #[wasm_bindgen(js_name = featureMaps)]
    pub fn feature_maps(&self, i: usize, layer: usize, n: usize) -> std::result::Result<Vec<u8>, JsValue> {
        self.session.feature_maps(i, layer, n).map(|(_, px)| px).map_err(js)
    }

    /// Filter grid as `[width, height, pixels...]` packed little-endian in the first 8 bytes.
    #[wasm_bindgen(js_name = filterGrid)]
    pub fn filter_grid(&self, layer: usize, n: usize, scale: usize) -> std::result::Result<Vec<u8>, JsValue> {
        let g = self.session.filter_grid(layer, n, scale).map_err(js)?;
        let mut out = Vec::with_capacity(8 + g.pixels.len());
        out.extend_from_slice(&(g.width as u32).to_le_bytes());
        out.extend_from_slice(&(g.height as u32).to_le_bytes());
        out.extend_from_slice(&g.pixels);
        Ok(out)
    }
}
