//! Explanations: first-layer filter planes, per-layer feature maps and
//! guided-backpropagation saliency, all rendered to 8-bit grayscale.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::layers::softmax;
use crate::model::{backward, forward, BackwardRequest, ForwardTrace, Mode, ModelSpec, Parameters, ReluRule};
use crate::tensor::Tensor;

/// Linear min-max map to `0..=255` with round-half-up. A constant map renders
/// as mid-gray 128.
pub fn render_grayscale(values: &[f32]) -> Result<Vec<u8>> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Render(format!("non-finite value {} at {i}", values[i])));
    }
    let (min, max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || min == max {
        return Ok(vec![128; values.len()]);
    }
    let (min, range) = (min as f64, max as f64 - min as f64);
    Ok(values
        .iter()
        .map(|&v| ((v as f64 - min) / range * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterImage {
    /// 1-based conv layer.
    pub layer: usize,
    pub filter: usize,
    pub channel: usize,
    pub size: usize,
    pub weights: Vec<f32>,
    #[serde(skip)]
    pub pixels: Vec<u8>,
}

fn check_layer(spec: &ModelSpec, layer: usize) -> Result<usize> {
    if layer == 0 || layer > spec.conv_blocks.len() {
        return Err(Error::param(format!(
            "layer {layer} is not a conv layer (1..={})",
            spec.conv_blocks.len()
        )));
    }
    Ok(layer - 1)
}

/// One plane per input channel for each of the first `n` filters of `layer`,
/// in filter-major order.
pub fn visualize_filters(spec: &ModelSpec, params: &Parameters, layer: usize, n: usize) -> Result<Vec<FilterImage>> {
    let li = check_layer(spec, layer)?;
    let w = &params.conv[li].weight;
    let (filters, channels, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if n == 0 || n > filters {
        return Err(Error::param(format!("filter count {n} outside 1..={filters}")));
    }
    let plane = k * k;
    let mut out = Vec::with_capacity(n * channels);
    for f in 0..n {
        for c in 0..channels {
            let start = (f * channels + c) * plane;
            let weights = w.data()[start..start + plane].to_vec();
            out.push(FilterImage {
                layer,
                filter: f,
                channel: c,
                size: k,
                pixels: render_grayscale(&weights)?,
                weights,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_png(path, self.width, self.height, &self.pixels)
    }
}

pub fn save_png(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::Render(format!("{} pixels for {width}×{height}", pixels.len())))?;
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| Error::Render(e.to_string()))
}

/// Nearest-neighbour upscale of a square cell.
pub fn upscale(pixels: &[u8], size: usize, factor: usize) -> GrayImage {
    let side = size * factor;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            out.push(pixels[(i / factor) * size + j / factor]);
        }
    }
    GrayImage {
        width: side,
        height: side,
        pixels: out,
    }
}

/// Rows are filters, columns input channels; cells are upscaled by `scale`
/// and separated by a `gap`-pixel white border.
pub fn filter_grid(cells: &[FilterImage], scale: usize, gap: usize) -> GrayImage {
    let rows = cells.iter().map(|c| c.filter).max().map_or(0, |m| m + 1);
    let cols = cells.iter().map(|c| c.channel).max().map_or(0, |m| m + 1);
    let side = cells.first().map_or(0, |c| c.size * scale);
    let width = cols * side + (cols + 1) * gap;
    let height = rows * side + (rows + 1) * gap;
    let mut pixels = vec![255u8; width * height];
    for cell in cells {
        let big = upscale(&cell.pixels, cell.size, scale);
        let x0 = gap + cell.channel * (side + gap);
        let y0 = gap + cell.filter * (side + gap);
        for i in 0..side {
            let dst = (y0 + i) * width + x0;
            pixels[dst..dst + side].copy_from_slice(&big.pixels[i * side..(i + 1) * side]);
        }
    }
    GrayImage { width, height, pixels }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub filter: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet {
    /// 1-based conv layer.
    pub layer: usize,
    pub maps: Vec<FeatureMap>,
}

/// First `n` post-ReLU, pre-pool activation maps of `layer`, sliced straight
/// out of a forward trace.
pub fn feature_maps_from_trace(trace: &ForwardTrace, layer: usize, n: usize) -> Result<FeatureMapSet> {
    if layer == 0 || layer > trace.blocks.len() {
        return Err(Error::param(format!("layer {layer} outside 1..={}", trace.blocks.len())));
    }
    let act = &trace.blocks[layer - 1].activation;
    let (filters, h, w) = (act.shape()[0], act.shape()[1], act.shape()[2]);
    if n == 0 || n > filters {
        return Err(Error::param(format!("map count {n} outside 1..={filters}")));
    }
    let maps = (0..n)
        .map(|f| {
            let values = act.data()[f * h * w..(f + 1) * h * w].to_vec();
            Ok(FeatureMap {
                filter: f,
                height: h,
                width: w,
                pixels: render_grayscale(&values)?,
                values,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FeatureMapSet { layer, maps })
}

pub fn feature_maps(spec: &ModelSpec, params: &Parameters, x: &Tensor, layer: usize, n: usize) -> Result<FeatureMapSet> {
    check_layer(spec, layer)?;
    let trace = forward(spec, params, x, Mode::Eval)?;
    feature_maps_from_trace(&trace, layer, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    /// Per-pixel max over channels of the absolute guided input gradient.
    pub values: Vec<f32>,
    pub pixels: Vec<u8>,
}

/// Reduce a `[C, H, W]` input gradient to `max_c |g|`.
pub fn channel_max_abs(grad: &Tensor) -> Vec<f32> {
    let (c, hw) = (grad.shape()[0], grad.shape()[1] * grad.shape()[2]);
    (0..hw)
        .map(|p| (0..c).map(|ch| grad.data()[ch * hw + p].abs()).fold(0.0, f32::max))
        .collect()
}

pub fn guided_backprop_from_trace(
    spec: &ModelSpec,
    params: &Parameters,
    trace: &ForwardTrace,
    class: usize,
) -> Result<SaliencyMap> {
    if class >= spec.num_classes {
        return Err(Error::param(format!("class {class} outside 0..{}", spec.num_classes)));
    }
    let mut seed = Tensor::zeros(&[spec.num_classes]);
    seed.data_mut()[class] = 1.0;
    let back = backward(spec, params, trace, &seed, BackwardRequest::saliency(ReluRule::Guided))?;
    let grad = back.input.expect("input gradient was requested");
    let values = channel_max_abs(&grad);
    Ok(SaliencyMap {
        height: spec.input.height,
        width: spec.input.width,
        target_class: class,
        pixels: render_grayscale(&values)?,
        values,
    })
}

/// Guided backpropagation from the `class` logit to the input.
pub fn guided_backprop(spec: &ModelSpec, params: &Parameters, x: &Tensor, class: usize) -> Result<SaliencyMap> {
    if class >= spec.num_classes {
        return Err(Error::param(format!("class {class} outside 0..{}", spec.num_classes)));
    }
    let trace = forward(spec, params, x, Mode::Eval)?;
    guided_backprop_from_trace(spec, params, &trace, class)
}

/// Classification plus the highlighted-region image and per-layer maps.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub probabilities: Vec<f32>,
    pub predicted: usize,
    pub saliency: SaliencyMap,
    pub feature_maps: Vec<FeatureMapSet>,
}

pub fn explain(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    target: Option<usize>,
    maps_per_layer: usize,
) -> Result<Explanation> {
    let trace = forward(spec, params, x, Mode::Eval)?;
    let predicted = trace.logits.argmax();
    let saliency = guided_backprop_from_trace(spec, params, &trace, target.unwrap_or(predicted))?;
    let feature_maps = (1..=spec.conv_blocks.len())
        .map(|layer| {
            let n = maps_per_layer.min(spec.conv_blocks[layer - 1].filters);
            feature_maps_from_trace(&trace, layer, n)
        })
        .collect::<Result<_>>()?;
    Ok(Explanation {
        probabilities: softmax(&trace.logits).into_data(),
        predicted,
        saliency,
        feature_maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::{conv2d_backward, conv2d_forward, relu_backward};
    use crate::rng::{Distribution, SeededRng};

    #[test]
    fn render_cases() {
        assert_eq!(render_grayscale(&[0.0, 1.0]).unwrap(), vec![0, 255]);
        assert_eq!(render_grayscale(&[0.3; 5]).unwrap(), vec![128; 5]);
        assert_eq!(render_grayscale(&[0.0, 0.5, 1.0]).unwrap(), vec![0, 128, 255]);
        assert_eq!(render_grayscale(&[-2.0, 0.0, 2.0]).unwrap(), vec![0, 128, 255]);
        assert!(matches!(render_grayscale(&[0.0, f32::NAN]), Err(Error::Render(_))));
    }

    #[test]
    fn filter_planes_default_geometry() {
        let spec = ModelSpec::default();
        let params = Parameters::seeded(&spec, 0).unwrap();
        let cells = visualize_filters(&spec, &params, 1, 6).unwrap();
        assert_eq!(cells.len(), 18);
        let grid = filter_grid(&cells, 10, 2);
        assert_eq!((grid.width, grid.height), (3 * 30 + 4 * 2, 6 * 30 + 7 * 2));
        let cells2 = visualize_filters(&spec, &params, 2, 2).unwrap();
        assert_eq!(cells2.iter().filter(|c| c.filter == 0).count(), 32);
        assert!(visualize_filters(&spec, &params, 5, 1).is_err());
        assert!(visualize_filters(&spec, &params, 1, 0).is_err());
        assert!(visualize_filters(&spec, &params, 1, 33).is_err());
    }

    #[test]
    fn constant_filter_plane_renders_mid_gray() {
        let spec = ModelSpec::with_filters(16, &[2, 2, 2, 2]);
        let mut params = Parameters::zeros(&spec);
        params.conv[0].weight.data_mut().fill(0.25);
        let cells = visualize_filters(&spec, &params, 1, 2).unwrap();
        assert!(cells.iter().all(|c| c.pixels.iter().all(|&p| p == 128)));
    }

    #[test]
    fn feature_map_sizes_per_layer() {
        let spec = ModelSpec::default();
        let params = Parameters::seeded(&spec, 0).unwrap();
        let x = Tensor::zeros(&spec.input_dims());
        let trace = forward(&spec, &params, &x, Mode::Eval).unwrap();
        for (layer, size) in [(1, 128), (2, 64), (3, 32), (4, 16)] {
            let set = feature_maps_from_trace(&trace, layer, 6).unwrap();
            assert_eq!(set.maps.len(), 6);
            assert_eq!((set.maps[0].height, set.maps[0].width), (size, size));
        }
        // Zero input, zero biases: every map is constant and renders mid-gray.
        let set = feature_maps_from_trace(&trace, 1, 6).unwrap();
        assert!(set.maps.iter().all(|m| m.pixels.iter().all(|&p| p == 128)));
        assert!(feature_maps_from_trace(&trace, 5, 1).is_err());
        assert!(feature_maps_from_trace(&trace, 0, 1).is_err());
    }

    #[test]
    fn dead_relu_unit_gives_zero_saliency() {
        let act = Tensor::from_vec(vec![0.0]); // ReLU(x) for x < 0
        let up = Tensor::from_vec(vec![1.0]);
        assert_eq!(relu_backward(&act, &up, ReluRule::Guided).unwrap().data(), &[0.0]);
    }

    #[test]
    fn relu_free_conv_toy_matches_finite_differences() {
        // One conv, no ReLU: guided and vanilla gradients coincide with the
        // transpose-conv of the seed, which we check numerically.
        let x = SeededRng::new(4).fill(Distribution::Uniform { lo: -1.0, hi: 1.0 }, &[3, 6, 6]).unwrap();
        let w = SeededRng::new(5).fill(Distribution::Uniform { lo: -1.0, hi: 1.0 }, &[1, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]);
        let (_, cache) = conv2d_forward(&x, &w, &b).unwrap();
        // Objective: output pixel (2, 3).
        let mut seed = Tensor::zeros(&[1, 6, 6]);
        seed.data_mut()[2 * 6 + 3] = 1.0;
        let g = conv2d_backward(&cache, &w, &seed).unwrap().input.unwrap();
        // Output (2, 3) in f64: Σ w[c,u,v]·x[c, 2+u−1, 3+v−1] with zero padding.
        let objective = |xs: &[f64]| -> f64 {
            let mut acc = 0.0;
            for c in 0..3 {
                for u in 0..3 {
                    for v in 0..3 {
                        let (i, j) = (2 + u as isize - 1, 3 + v as isize - 1);
                        if (0..6).contains(&i) && (0..6).contains(&j) {
                            acc += w.data()[(c * 3 + u) * 3 + v] as f64 * xs[(c * 6 + i as usize) * 6 + j as usize];
                        }
                    }
                }
            }
            acc
        };
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let eps = 1e-3;
        for i in 0..x64.len() {
            let mut p = x64.clone();
            p[i] += eps;
            let mut m = x64.clone();
            m[i] -= eps;
            let numeric = (objective(&p) - objective(&m)) / (2.0 * eps);
            assert!((numeric - g.data()[i] as f64).abs() < 1e-4, "{i}: {numeric} vs {}", g.data()[i]);
        }
        let sal = channel_max_abs(&g);
        assert!(sal.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn saliency_rejects_bad_class() {
        let spec = ModelSpec::with_filters(16, &[2, 2, 2, 2]);
        let params = Parameters::seeded(&spec, 0).unwrap();
        let x = Tensor::zeros(&spec.input_dims());
        assert!(matches!(guided_backprop(&spec, &params, &x, 4), Err(Error::Parameter(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rendering_is_monotone(values in proptest::collection::vec(-100.0f32..100.0, 2..50)) {
                let px = render_grayscale(&values).unwrap();
                for i in 0..values.len() {
                    for j in 0..values.len() {
                        if values[i] <= values[j] {
                            prop_assert!(px[i] <= px[j]);
                        }
                    }
                }
            }
        }
    }
}
