//! The classifier: architecture description, learnable parameters and their
//! initialization, plus the layer kernels and the full forward/backward stack.
//!
//! Every conv block is `conv(k×k, stride 1, same padding) → ReLU → 2×2 max-pool`.
//! The head is `flatten → [dense → ReLU]* → dropout → dense → logits`.

pub mod layers;
pub mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Distribution, SeededRng, Stream};
use crate::tensor::Tensor;

pub use network::{
    backward, forward, loss_and_gradients, Backward, BackwardRequest, BlockTrace, ForwardTrace,
    Mode, ReluRule, ReluSite,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub conv_blocks: Vec<ConvBlock>,
    pub fc_widths: Vec<usize>,
    pub dropout_rate: f32,
    pub num_classes: usize,
}

/// Filter counts of the four conv blocks in the full-size model.
pub const DEFAULT_FILTERS: [usize; 4] = [32, 64, 128, 64];

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::with_filters(128, &DEFAULT_FILTERS)
    }
}

impl ModelSpec {
    /// Square `size×size` RGB input with the default head (256, 128, dropout 0.5, 4 classes).
    pub fn with_filters(size: usize, filters: &[usize]) -> Self {
        ModelSpec {
            input: InputShape {
                height: size,
                width: size,
                channels: 3,
            },
            conv_blocks: filters
                .iter()
                .map(|&filters| ConvBlock { filters, kernel: 3 })
                .collect(),
            fc_widths: vec![256, 128],
            dropout_rate: 0.5,
            num_classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let InputShape {
            height,
            width,
            channels,
        } = self.input;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::param(format!("input shape {:?}", self.input)));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::param("at least one conv block is required"));
        }
        let div = 1usize << self.conv_blocks.len();
        if height % div != 0 || width % div != 0 {
            return Err(Error::param(format!(
                "input {height}×{width} must be divisible by {div} for {} pooling stages",
                self.conv_blocks.len()
            )));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.filters == 0 || b.kernel == 0 || b.kernel % 2 == 0 {
                return Err(Error::param(format!(
                    "conv block {}: filters {} kernel {} (kernel must be odd)",
                    i + 1,
                    b.filters,
                    b.kernel
                )));
            }
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::param("fully connected widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param(format!("dropout rate {}", self.dropout_rate)));
        }
        if self.num_classes < 2 {
            return Err(Error::param("need at least two classes"));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.input.channels, self.input.height, self.input.width]
    }

    /// `[C, H, W]` entering conv block `i` (0-based).
    pub fn block_input_dims(&self, i: usize) -> [usize; 3] {
        let c = if i == 0 {
            self.input.channels
        } else {
            self.conv_blocks[i - 1].filters
        };
        [c, self.input.height >> i, self.input.width >> i]
    }

    /// `[F, H, W]` of block `i`'s activation before pooling.
    pub fn block_activation_dims(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.block_input_dims(i);
        [self.conv_blocks[i].filters, h, w]
    }

    pub fn flatten_dim(&self) -> usize {
        let n = self.conv_blocks.len();
        let last = self.conv_blocks[n - 1].filters;
        last * (self.input.height >> n) * (self.input.width >> n)
    }

    /// `(in, out)` for every dense layer including the output layer.
    pub fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.fc_widths.len() + 1);
        let mut fan_in = self.flatten_dim();
        for &w in self.fc_widths.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    pub fn parameter_count(&self) -> usize {
        let conv: usize = (0..self.conv_blocks.len())
            .map(|i| {
                let [c, _, _] = self.block_input_dims(i);
                let b = self.conv_blocks[i];
                b.filters * c * b.kernel * b.kernel + b.filters
            })
            .sum();
        let dense: usize = self.dense_dims().iter().map(|&(i, o)| o * i + o).sum();
        conv + dense
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    /// Conv weights are `[filters, in_channels, k, k]`.
    pub conv: Vec<LayerParams>,
    /// Dense weights are `[out, in]`; the last entry is the output layer.
    pub dense: Vec<LayerParams>,
}

impl Parameters {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let conv = (0..spec.conv_blocks.len())
            .map(|i| {
                let [c, _, _] = spec.block_input_dims(i);
                let b = spec.conv_blocks[i];
                LayerParams {
                    weight: Tensor::zeros(&[b.filters, c, b.kernel, b.kernel]),
                    bias: Tensor::zeros(&[b.filters]),
                }
            })
            .collect();
        let dense = spec
            .dense_dims()
            .into_iter()
            .map(|(i, o)| LayerParams {
                weight: Tensor::zeros(&[o, i]),
                bias: Tensor::zeros(&[o]),
            })
            .collect();
        Parameters { conv, dense }
    }

    /// He-uniform weights, `U(−√(6/fan_in), √(6/fan_in))`, and zero biases.
    pub fn init(spec: &ModelSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let mut params = Parameters::zeros(spec);
        for layer in params.conv.iter_mut().chain(params.dense.iter_mut()) {
            let shape = layer.weight.shape().to_vec();
            let fan_in: usize = shape[1..].iter().product();
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            layer.weight = rng.fill(
                Distribution::Uniform {
                    lo: -limit,
                    hi: limit,
                },
                &shape,
            )?;
        }
        Ok(params)
    }

    pub fn seeded(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::init(spec, &mut SeededRng::for_stream(seed, Stream::Init))
    }

    /// Weight then bias for each conv layer, then each dense layer.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.conv
            .iter()
            .chain(&self.dense)
            .flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.conv
            .iter_mut()
            .chain(self.dense.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn matches(&self, spec: &ModelSpec) -> bool {
        let reference = Parameters::zeros(spec);
        self.tensors().count() == reference.tensors().count()
            && self
                .tensors()
                .zip(reference.tensors())
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub(crate) fn accumulate(&mut self, other: &Parameters) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub(crate) fn scale_in_place(&mut self, s: f32) {
        for t in self.tensors_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_shapes() {
        let spec = ModelSpec::default();
        spec.validate().unwrap();
        let filters: Vec<usize> = spec.conv_blocks.iter().map(|b| b.filters).collect();
        assert_eq!(filters, vec![32, 64, 128, 64]);
        assert_eq!(spec.flatten_dim(), 8 * 8 * 64);
        for (i, size) in [128, 64, 32, 16].into_iter().enumerate() {
            assert_eq!(spec.block_activation_dims(i)[1], size);
        }
        assert_eq!(
            spec.dense_dims(),
            vec![(4096, 256), (256, 128), (128, 4)]
        );
    }

    #[test]
    fn default_parameter_count() {
        // conv: 32·3·9+32, 64·32·9+64, 128·64·9+128, 64·128·9+64
        // dense: 256·4096+256, 128·256+128, 4·128+4
        let by_hand = (896 + 18_496 + 73_856 + 73_792) + (1_048_832 + 32_896 + 516);
        assert_eq!(by_hand, 1_249_284);
        let spec = ModelSpec::default();
        assert_eq!(spec.parameter_count(), by_hand);
        assert_eq!(Parameters::zeros(&spec).count(), by_hand);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = ModelSpec::with_filters(20, &[4, 4, 4]);
        assert!(s.validate().is_err(), "20 is not divisible by 8");
        s = ModelSpec::with_filters(16, &[4]);
        s.conv_blocks[0].kernel = 2;
        assert!(s.validate().is_err());
        s = ModelSpec::with_filters(16, &[4]);
        s.dropout_rate = 1.0;
        assert!(s.validate().is_err());
        s = ModelSpec::with_filters(16, &[]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn init_biases_zero_and_deterministic() {
        let spec = ModelSpec::with_filters(16, &[4, 4, 8, 4]);
        let a = Parameters::seeded(&spec, 11).unwrap();
        let b = Parameters::seeded(&spec, 11).unwrap();
        assert_eq!(a, b);
        for l in a.conv.iter().chain(&a.dense) {
            assert!(l.bias.data().iter().all(|&v| v == 0.0));
        }
        assert_ne!(a, Parameters::seeded(&spec, 12).unwrap());
    }

    #[test]
    fn first_conv_layer_follows_he_uniform_moments() {
        let spec = ModelSpec::default();
        let p = Parameters::seeded(&spec, 3).unwrap();
        let w = p.conv[0].weight.data();
        assert_eq!(w.len(), 32 * 27);
        let limit = (6.0f64 / 27.0).sqrt();
        assert!((limit - 0.4714).abs() < 1e-4);
        assert!(w.iter().all(|&v| (v as f64).abs() <= limit));
        // σ of U(−a, a) is 2a/√12 = √(2/27) ≈ 0.2722.
        let expected_sd = 2.0 * limit / 12f64.sqrt();
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / expected_sd - 1.0).abs() < 0.05, "sd {sd} vs {expected_sd}");
    }
}
