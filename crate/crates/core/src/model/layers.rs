//! Layer kernels. Images inside the network are channel-first `[C, H, W]`.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Unrolled input patches kept from the forward pass: `[C·k·k, H·W]`.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f32>,
    input_dims: [usize; 3],
    kernel: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn dims3(x: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match *x.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::shape(op, x.shape(), &[0, 0, 0])),
    }
}

fn im2col(x: &[f32], [c, h, w]: [usize; 3], k: usize) -> Vec<f32> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = (ch * k + u) * k + v;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let du = u as isize - pad;
                let dv = v as isize - pad;
                for i in 0..h {
                    let si = i as isize + du;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    let out = &mut dst[i * w..(i + 1) * w];
                    for (j, o) in out.iter_mut().enumerate() {
                        let sj = j as isize + dv;
                        if sj >= 0 && sj < w as isize {
                            *o = src[sj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], [c, h, w]: [usize; 3], k: usize) -> Vec<f32> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ch * k + u) * k + v;
                let src = &cols[row * hw..(row + 1) * hw];
                let du = u as isize - pad;
                let dv = v as isize - pad;
                for i in 0..h {
                    let si = i as isize + du;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + dv;
                        if sj >= 0 && sj < w as isize {
                            x[ch * hw + si as usize * w + sj as usize] += src[i * w + j];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Same-padded, stride-1 cross-correlation via im2col:
/// `out[f,i,j] = b[f] + Σ w[f,c,u,v]·x_pad[c, i+u, j+v]`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, ConvCache)> {
    let [c, h, w] = dims3(x, "conv2d_forward")?;
    let (f, k) = match *weight.shape() {
        [f, wc, k1, k2] if wc == c && k1 == k2 && k1 % 2 == 1 => (f, k1),
        _ => return Err(Error::shape("conv2d_forward", x.shape(), weight.shape())),
    };
    if bias.shape() != [f] {
        return Err(Error::shape("conv2d_forward bias", weight.shape(), bias.shape()));
    }
    let hw = h * w;
    let cols = im2col(x.data(), [c, h, w], k);
    let mut out = vec![0.0; f * hw];
    for (row, &b) in out.chunks_mut(hw).zip(bias.data()) {
        row.fill(b);
    }
    gemm_nn(weight.data(), &cols, &mut out, f, c * k * k, hw);
    let cache = ConvCache {
        cols,
        input_dims: [c, h, w],
        kernel: k,
    };
    Ok((Tensor::new(&[f, h, w], out)?, cache))
}

pub fn conv2d_backward(cache: &ConvCache, weight: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    conv2d_backward_with(cache, weight, upstream, true)
}

pub(crate) fn conv2d_backward_with(
    cache: &ConvCache,
    weight: &Tensor,
    upstream: &Tensor,
    input_grad: bool,
) -> Result<ConvGrads> {
    let [c, h, w] = cache.input_dims;
    let k = cache.kernel;
    let f = weight.shape()[0];
    if upstream.shape() != [f, h, w] || weight.shape() != [f, c, k, k] {
        return Err(Error::shape("conv2d_backward", upstream.shape(), &[f, h, w]));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let g = upstream.data();

    let mut gw = vec![0.0; f * ckk];
    gemm_nt(g, &cache.cols, &mut gw, f, hw, ckk);
    let gb: Vec<f32> = g.chunks(hw).map(|row| row.iter().sum()).collect();

    let input = if input_grad {
        let mut gcols = vec![0.0; ckk * hw];
        gemm_tn(weight.data(), g, &mut gcols, ckk, f, hw);
        Some(Tensor::new(&[c, h, w], col2im(&gcols, [c, h, w], k))?)
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[f], gb)?,
    })
}

/// 2×2, stride-2 max-pool. Returns the pooled tensor and, per output cell, the
/// flat input index of the winning element (first in row-major window order on ties).
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [c, h, w] = dims3(x, "maxpool2x2_forward")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2x2_forward (odd extent)", x.shape(), &[c, h & !1, w & !1]));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward(argmax: &[u32], upstream: &Tensor, input_dims: [usize; 3]) -> Result<Tensor> {
    if upstream.len() != argmax.len() || upstream.len() * 4 != input_dims.iter().product::<usize>() {
        return Err(Error::shape("maxpool2x2_backward", upstream.shape(), &input_dims));
    }
    let mut g = vec![0.0; input_dims.iter().product()];
    for (&idx, &u) in argmax.iter().zip(upstream.data()) {
        g[idx as usize] += u;
    }
    Tensor::new(&input_dims, g)
}

/// `y = W·x + b` with `x` taken flat.
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out, inp) = match *weight.shape() {
        [o, i] if i == x.len() && bias.shape() == [o] => (o, i),
        _ => return Err(Error::shape("dense_forward", x.shape(), weight.shape())),
    };
    let mut y = bias.data().to_vec();
    let w = weight.data();
    let xs = x.data();
    for (o, yo) in y.iter_mut().enumerate().take(out) {
        let row = &w[o * inp..(o + 1) * inp];
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(xs) {
            acc += a * b;
        }
        *yo += acc;
    }
    Tensor::new(&[out], y)
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(x: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<DenseGrads> {
    let (out, inp) = match *weight.shape() {
        [o, i] if i == x.len() && upstream.len() == o => (o, i),
        _ => return Err(Error::shape("dense_backward", upstream.shape(), weight.shape())),
    };
    let g = upstream.data();
    let xs = x.data();
    let mut gw = vec![0.0; out * inp];
    for (o, row) in gw.chunks_mut(inp).enumerate() {
        let go = g[o];
        if go == 0.0 {
            continue;
        }
        for (r, &xv) in row.iter_mut().zip(xs) {
            *r = go * xv;
        }
    }
    let mut gx = vec![0.0; inp];
    gemm_tn(weight.data(), g, &mut gx, inp, out, 1);
    Ok(DenseGrads {
        input: Tensor::new(x.shape(), gx)?,
        weight: Tensor::new(&[out, inp], gw)?,
        bias: Tensor::new(&[out], g.to_vec())?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout. The returned mask holds the per-element multiplier
/// (`0` or `1/(1−rate)`), so backward is `upstream ⊙ mask`.
pub fn dropout(x: &Tensor, rate: f32, mode: DropoutMode, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == DropoutMode::Eval || rate == 0.0 {
        return Ok((x.clone(), Tensor::full(x.shape(), 1.0)));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = (0..x.len())
        .map(|_| if rng.next_f32() < rate { 0.0 } else { keep })
        .collect();
    let mask = Tensor::new(x.shape(), mask)?;
    Ok((x.mul(&mask)?, mask))
}

/// How a ReLU site treats the incoming backward signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReluRule {
    /// `g · 1[x > 0]`
    Vanilla,
    /// `g · 1[x > 0] · 1[g > 0]`
    Guided,
}

/// ReLU backward given the post-activation output (positive exactly where
/// the pre-activation was).
pub fn relu_backward(activation: &Tensor, upstream: &Tensor, rule: ReluRule) -> Result<Tensor> {
    if activation.shape() != upstream.shape() {
        return Err(Error::shape("relu_backward", activation.shape(), upstream.shape()));
    }
    let data = activation
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&a, &g)| {
            let pass = a > 0.0 && (rule == ReluRule::Vanilla || g > 0.0);
            if pass {
                g
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(upstream.shape(), data)
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.data().iter().map(|&z| (z as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::from_vec(exps.iter().map(|e| (e / total) as f32).collect())
}

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f32, Tensor)> {
    if label >= logits.len() {
        return Err(Error::param(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.data().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.data().iter().map(|&z| (z as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits.data()[label] as f64 - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| (e / total - if i == label { 1.0 } else { 0.0 }) as f32)
        .collect();
    Ok((loss as f32, Tensor::new(logits.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Distribution;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        SeededRng::new(seed)
            .fill(Distribution::Uniform { lo: -1.0, hi: 1.0 }, shape)
            .unwrap()
    }

    /// Direct six-loop convolution in f64.
    fn naive_conv(x: &[f64], [c, h, w]: [usize; 3], wt: &[f64], f: usize, k: usize, b: &[f64]) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; f * h * w];
        for fo in 0..f {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b[fo];
                    for ch in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let si = i as isize + u as isize - pad;
                                let sj = j as isize + v as isize - pad;
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                acc += wt[((fo * c + ch) * k + u) * k + v]
                                    * x[(ch * h + si as usize) * w + sj as usize];
                            }
                        }
                    }
                    out[(fo * h + i) * w + j] = acc;
                }
            }
        }
        out
    }

    fn f64s(t: &Tensor) -> Vec<f64> {
        t.data().iter().map(|&v| v as f64).collect()
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = random(&[3, 2, 3, 3], 1);
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let (y, _) = conv2d_forward(&x, &w, &b).unwrap();
        for (f, plane) in y.data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[f]));
        }
    }

    #[test]
    fn conv_unit_kernel_is_identity() {
        let x = random(&[1, 5, 5], 2);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let (y, _) = conv2d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = random(&[3, 5, 5], 3);
        let w = random(&[2, 3, 3, 3], 4);
        let b = random(&[2], 5);
        let (y, _) = conv2d_forward(&x, &w, &b).unwrap();
        let want = naive_conv(&f64s(&x), [3, 5, 5], &f64s(&w), 2, 3, &f64s(&b));
        for (a, e) in y.data().iter().zip(&want) {
            assert!((*a as f64 - e).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let err = conv2d_forward(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let x = random(&[2, 4, 4], 6);
        let w = random(&[3, 2, 3, 3], 7);
        let (_, cache) = conv2d_forward(&x, &w, &Tensor::zeros(&[3])).unwrap();
        let g = conv2d_backward(&cache, &w, &Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_single_pixel() {
        let x = Tensor::new(&[1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![-2.0]).unwrap();
        let (_, cache) = conv2d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        let up = Tensor::new(&[1, 1, 1], vec![0.5]).unwrap();
        let g = conv2d_backward(&cache, &w, &up).unwrap();
        assert_eq!(g.weight.data(), &[1.5]);
        assert_eq!(g.input.unwrap().data(), &[-1.0]);
        assert_eq!(g.bias.data(), &[0.5]);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let dims = [2, 4, 5];
        let x = random(&dims, 8);
        let w = random(&[3, 2, 3, 3], 9);
        let b = random(&[3], 10);
        let up = random(&[3, 4, 5], 11);
        let (_, cache) = conv2d_forward(&x, &w, &b).unwrap();
        let g = conv2d_backward(&cache, &w, &up).unwrap();

        let (xs, ws, bs, us) = (f64s(&x), f64s(&w), f64s(&b), f64s(&up));
        let objective = |xs: &[f64], ws: &[f64], bs: &[f64]| -> f64 {
            naive_conv(xs, dims, ws, 3, 3, bs).iter().zip(&us).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-3;
        let check = |analytic: f32, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic as f64 - numeric).abs() / numeric.abs().max(analytic.abs() as f64).max(1e-2);
            assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
        };
        for i in 0..ws.len() {
            let mut p = ws.clone();
            p[i] += eps;
            let mut m = ws.clone();
            m[i] -= eps;
            check(g.weight.data()[i], objective(&xs, &p, &bs), objective(&xs, &m, &bs));
        }
        let gx = g.input.unwrap();
        for i in 0..xs.len() {
            let mut p = xs.clone();
            p[i] += eps;
            let mut m = xs.clone();
            m[i] -= eps;
            check(gx.data()[i], objective(&p, &ws, &bs), objective(&m, &ws, &bs));
        }
        for i in 0..bs.len() {
            let s: f32 = up.data()[i * 20..(i + 1) * 20].iter().sum();
            assert!((g.bias.data()[i] - s).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_constant_takes_first_index() {
        let x = Tensor::full(&[1, 4, 4], 2.0);
        let (y, arg) = maxpool2x2_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, arg) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2x2_backward(&arg, &Tensor::new(&[1, 1, 1], vec![1.0]).unwrap(), [1, 2, 2]).unwrap();
        assert_eq!(g.data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn maxpool_odd_extent_rejected() {
        assert!(matches!(maxpool2x2_forward(&Tensor::zeros(&[1, 3, 4])), Err(Error::Shape { .. })));
    }

    #[test]
    fn dense_identity_and_zero_input() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let y = dense_forward(&x, &Tensor::identity(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), x.data());
        let b = Tensor::from_vec(vec![0.1, 0.2]);
        let y = dense_forward(&Tensor::zeros(&[3]), &random(&[2, 3], 1), &b).unwrap();
        assert_eq!(y.data(), b.data());
        assert!(dense_forward(&Tensor::zeros(&[4]), &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn dropout_modes() {
        let x = random(&[100], 3);
        let mut rng = SeededRng::new(0);
        let (y, mask) = dropout(&x, 0.5, DropoutMode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.data().iter().all(|&m| m == 1.0));
        let (y, _) = dropout(&x, 0.0, DropoutMode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(matches!(dropout(&x, 1.0, DropoutMode::Train, &mut rng), Err(Error::Parameter(_))));
        assert!(dropout(&x, -0.1, DropoutMode::Eval, &mut rng).is_err());
    }

    #[test]
    fn dropout_concentration() {
        // Bernoulli(0.5) on 1e5: σ of the kept fraction is 1.6e-3, so 1% is ~6σ.
        let x = Tensor::full(&[100_000], 1.0);
        let (y, mask) = dropout(&x, 0.5, DropoutMode::Train, &mut SeededRng::new(9)).unwrap();
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
        let kept = mask.data().iter().filter(|&&m| m > 0.0).count() as f64 / 1e5;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((kept - 0.5).abs() < 0.01, "kept {kept}");
    }

    #[test]
    fn softmax_ce_symmetric_case() {
        let (loss, grad) = softmax_cross_entropy(&Tensor::zeros(&[4]), 0).unwrap();
        assert!((loss as f64 - 4f64.ln()).abs() < 1e-6);
        assert!((loss - 1.386294).abs() < 1e-6);
        assert_eq!(grad.data(), &[-0.75, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn softmax_ce_is_stable() {
        let logits = Tensor::from_vec(vec![1000.0, 0.0, 0.0, 0.0]);
        let (loss, grad) = softmax_cross_entropy(&logits, 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(grad.is_finite());
        assert!(matches!(softmax_cross_entropy(&logits, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn relu_rules() {
        let act = Tensor::from_vec(vec![0.0, 1.0, 2.0, 0.5]);
        let up = Tensor::from_vec(vec![1.0, -1.0, 3.0, 0.0]);
        assert_eq!(relu_backward(&act, &up, ReluRule::Vanilla).unwrap().data(), &[0.0, -1.0, 3.0, 0.0]);
        assert_eq!(relu_backward(&act, &up, ReluRule::Guided).unwrap().data(), &[0.0, 0.0, 3.0, 0.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_loss_is_shift_invariant(
                ticks in proptest::collection::vec(-1280i32..1280, 4),
                shift in -50i32..50,
                label in 0usize..4,
            ) {
                // Multiples of 1/64 plus an integer shift add exactly in f32.
                let l = Tensor::from_vec(ticks.iter().map(|&t| t as f32 / 64.0).collect());
                let shift = shift as f32;
                let p = softmax(&l);
                let total: f64 = p.data().iter().map(|&v| v as f64).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                let shifted = l.map(|v| v + shift);
                let (a, ga) = softmax_cross_entropy(&l, label).unwrap();
                let (b, gb) = softmax_cross_entropy(&shifted, label).unwrap();
                prop_assert!((a - b).abs() < 1e-6);
                prop_assert!(ga.max_abs_diff(&gb).unwrap() < 1e-6);
            }
        }
    }
}
