//! Forward primitives: direct convolution with filter masks, ReLU, max-pooling,
//! fully connected layers and softmax.
//!
//! Accumulation order is fixed so results are reproducible bit for bit:
//!
//! * conv: each output element starts at the filter bias, then adds
//!   `weight * input` over input channels, kernel rows and kernel columns in
//!   ascending order. Padding taps are skipped, never added as zero.
//! * dense: `sum_i w[j,i] * x[i]` accumulated from zero in input-index order,
//!   then the bias is added.

use crate::error::{Error, Result};
use crate::tensor::{ConvLayerSpec, DenseLayerSpec, FilterMask, Tensor3, window_output};

/// Cross-correlation of `input` with the filters of `layer`.
///
/// Filters not in `mask` produce all-zero channels. With `mask == None` every
/// filter is evaluated.
pub fn conv2d(input: &Tensor3, layer: &ConvLayerSpec, mask: Option<&FilterMask>) -> Result<Tensor3> {
    let mut out = Tensor3::zeros(0, 0, 0);
    conv2d_into(input, layer, mask, None, &mut out)?;
    Ok(out)
}

/// Like [`conv2d`], writing into `out` (resized as needed).
///
/// `live_inputs` lists the input channels that may be non-zero; the others are
/// known to be exactly zero (masked out upstream) and their accumulation is
/// skipped. Passing `None` treats every input channel as live.
pub fn conv2d_into(
    input: &Tensor3,
    layer: &ConvLayerSpec,
    mask: Option<&FilterMask>,
    live_inputs: Option<&FilterMask>,
    out: &mut Tensor3,
) -> Result<()> {
    if input.channels() != layer.in_channels {
        return Err(Error::Dimension(format!(
            "conv expects {} input channels, got {}",
            layer.in_channels,
            input.channels()
        )));
    }
    if layer.weights.len() != layer.weight_len() || layer.bias.len() != layer.out_filters {
        return Err(Error::Dimension("conv parameter lengths do not match geometry".into()));
    }
    if let Some(m) = mask {
        if m.layer_size() != layer.out_filters {
            return Err(Error::Dimension(format!(
                "mask covers {} filters, layer has {}",
                m.layer_size(),
                layer.out_filters
            )));
        }
    }
    if let Some(live) = live_inputs {
        if live.layer_size() != layer.in_channels {
            return Err(Error::Dimension(format!(
                "live-input mask covers {} channels, layer has {}",
                live.layer_size(),
                layer.in_channels
            )));
        }
    }
    if layer.stride == 0 {
        return Err(Error::Geometry("conv stride must be at least 1".into()));
    }
    let (oh, ow) = layer.output_hw(input.height(), input.width())?;
    out.reset(layer.out_filters, oh, ow);

    let all_inputs: Vec<usize>;
    let inputs: &[usize] = match live_inputs {
        Some(live) => live.active(),
        None => {
            all_inputs = (0..layer.in_channels).collect();
            &all_inputs
        }
    };

    let taps = TapRanges::new(layer, input.height(), input.width(), oh, ow);
    let mut evaluated = vec![mask.is_none(); layer.out_filters];
    if let Some(m) = mask {
        for &o in m.active() {
            evaluated[o] = true;
        }
    }
    for (o, &eval) in evaluated.iter().enumerate() {
        let plane = out.channel_mut(o);
        if eval {
            plane.fill(layer.bias[o]);
            accumulate_filter(input, layer, o, inputs, &taps, plane, ow);
        } else {
            plane.fill(0.0);
        }
    }
    Ok(())
}

/// Valid output ranges per kernel tap, so padding never enters the inner loop.
struct TapRanges {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl TapRanges {
    fn new(layer: &ConvLayerSpec, in_h: usize, in_w: usize, oh: usize, ow: usize) -> Self {
        let range = |k: usize, size: usize, out: usize| {
            let (s, p) = (layer.stride, layer.padding);
            let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
            let hi = if size + p <= k {
                0
            } else {
                (size + p - k).div_ceil(s).min(out)
            };
            (lo, hi.max(lo))
        };
        Self {
            rows: (0..layer.kernel_h).map(|k| range(k, in_h, oh)).collect(),
            cols: (0..layer.kernel_w).map(|k| range(k, in_w, ow)).collect(),
        }
    }
}

fn accumulate_filter(
    input: &Tensor3,
    layer: &ConvLayerSpec,
    o: usize,
    inputs: &[usize],
    taps: &TapRanges,
    plane: &mut [f32],
    ow: usize,
) {
    let (kh_n, kw_n) = (layer.kernel_h, layer.kernel_w);
    let (s, p) = (layer.stride, layer.padding);
    let in_w = input.width();
    let filter = layer.filter(o);
    for &ic in inputs {
        let src = input.channel(ic);
        let kernel = &filter[ic * kh_n * kw_n..(ic + 1) * kh_n * kw_n];
        for kh in 0..kh_n {
            let (r_lo, r_hi) = taps.rows[kh];
            for kw in 0..kw_n {
                let w = kernel[kh * kw_n + kw];
                let (c_lo, c_hi) = taps.cols[kw];
                if c_lo >= c_hi {
                    continue;
                }
                for r in r_lo..r_hi {
                    let ih = r * s + kh - p;
                    let dst = &mut plane[r * ow + c_lo..r * ow + c_hi];
                    let base = ih * in_w + c_lo * s + kw - p;
                    if s == 1 {
                        let row = &src[base..base + dst.len()];
                        for (d, &x) in dst.iter_mut().zip(row) {
                            *d += w * x;
                        }
                    } else {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d += w * src[base + i * s];
                        }
                    }
                }
            }
        }
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor3) -> Tensor3 {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor3) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Per-channel windowed maximum with no padding.
pub fn maxpool2d(input: &Tensor3, pool: usize, stride: usize) -> Result<Tensor3> {
    let oh = window_output(input.height(), pool, stride, 0)?;
    let ow = window_output(input.width(), pool, stride, 0)?;
    let mut out = Tensor3::zeros(input.channels(), oh, ow);
    let in_w = input.width();
    for c in 0..input.channels() {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for r in 0..oh {
            for q in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dr in 0..pool {
                    let row = (r * stride + dr) * in_w + q * stride;
                    for &v in &src[row..row + pool] {
                        if v > m {
                            m = v;
                        }
                    }
                }
                dst[r * ow + q] = m;
            }
        }
    }
    Ok(out)
}

/// `y[j] = sum_i w[j,i] * x[i] + bias[j]`.
pub fn dense(x: &[f32], layer: &DenseLayerSpec) -> Result<Vec<f32>> {
    if x.len() != layer.in_dim {
        return Err(Error::Dimension(format!(
            "dense expects {} inputs, got {}",
            layer.in_dim,
            x.len()
        )));
    }
    if layer.weights.len() != layer.in_dim * layer.out_dim || layer.bias.len() != layer.out_dim {
        return Err(Error::Dimension("dense parameter lengths do not match geometry".into()));
    }
    Ok((0..layer.out_dim)
        .map(|j| {
            let mut acc = 0.0f32;
            for (&w, &v) in layer.row(j).iter().zip(x) {
                acc += w * v;
            }
            acc + layer.bias[j]
        })
        .collect())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f32]) -> Vec<f32> {
    if x.is_empty() {
        return Vec::new();
    }
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the first index wins on ties.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference: bias first, then (ic, kh, kw) ascending.
    fn reference_conv(input: &Tensor3, l: &ConvLayerSpec) -> Tensor3 {
        let (h, w) = (input.height() as isize, input.width() as isize);
        let (oh, ow) = l.output_hw(input.height(), input.width()).unwrap();
        let mut out = Tensor3::zeros(l.out_filters, oh, ow);
        for o in 0..l.out_filters {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = l.bias[o];
                    for ic in 0..l.in_channels {
                        for kh in 0..l.kernel_h {
                            for kw in 0..l.kernel_w {
                                let ih = (r * l.stride + kh) as isize - l.padding as isize;
                                let iw = (q * l.stride + kw) as isize - l.padding as isize;
                                if ih < 0 || iw < 0 || ih >= h || iw >= w {
                                    continue;
                                }
                                let wi = ((o * l.in_channels + ic) * l.kernel_h + kh) * l.kernel_w + kw;
                                acc += l.weights[wi] * input.at(ic, ih as usize, iw as usize);
                            }
                        }
                    }
                    out.channel_mut(o)[r * ow + q] = acc;
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor3::from_vec(c, h, w, data).unwrap()
    }

    #[allow(clippy::too_many_arguments)]
    fn random_conv(
        rng: &mut ChaCha8Rng,
        o: usize,
        i: usize,
        k: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
    ) -> ConvLayerSpec {
        ConvLayerSpec {
            out_filters: o,
            in_channels: i,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding,
            weights: (0..o * i * k * k).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            bias: (0..o)
                .map(|_| if with_bias { rng.random_range(-1.0f32..1.0) } else { 0.0 })
                .collect(),
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let layer = ConvLayerSpec {
            out_filters: 1,
            in_channels: 1,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: 0,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0],
        };
        let out = conv2d(&input, &layer, None).unwrap();
        assert_eq!(out.shape(), [1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv_empty_mask_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, 3, 6, 6);
        let layer = random_conv(&mut rng, 4, 3, 3, 1, 0, true);
        let out = conv2d(&input, &layer, Some(&FilterMask::empty(4))).unwrap();
        assert_eq!(out.shape(), [4, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_masked_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, 3, 8, 8);
        let layer = random_conv(&mut rng, 4, 3, 3, 1, 1, true);
        let reference = reference_conv(&input, &layer);
        let full = conv2d(&input, &layer, None).unwrap();
        assert_eq!(full, reference);
        let mask = FilterMask::new(4, vec![1, 3]).unwrap();
        let out = conv2d(&input, &layer, Some(&mask)).unwrap();
        for c in [0, 2] {
            assert!(out.channel(c).iter().all(|&v| v == 0.0));
        }
        for c in [1, 3] {
            assert_eq!(out.channel(c), full.channel(c));
            assert_eq!(out.channel(c), reference.channel(c));
        }
    }

    #[test]
    fn conv_strided_padded_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, p, h, w) in &[(3, 2, 1, 9, 7), (5, 3, 2, 11, 12), (1, 2, 0, 5, 5), (2, 1, 3, 4, 3)] {
            let input = random_tensor(&mut rng, 2, h, w);
            let layer = random_conv(&mut rng, 3, 2, k, s, p, true);
            assert_eq!(conv2d(&input, &layer, None).unwrap(), reference_conv(&input, &layer));
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_conv(&mut rng, 2, 3, 3, 1, 0, true);
        let wrong_channels = random_tensor(&mut rng, 2, 5, 5);
        assert!(matches!(conv2d(&wrong_channels, &layer, None), Err(Error::Dimension(_))));
        let too_small = random_tensor(&mut rng, 3, 2, 2);
        assert!(matches!(conv2d(&too_small, &layer, None), Err(Error::Geometry(_))));
        let bad_mask = FilterMask::full(3);
        let ok_input = random_tensor(&mut rng, 3, 5, 5);
        assert!(matches!(
            conv2d(&ok_input, &layer, Some(&bad_mask)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn relu_examples() {
        let t = Tensor3::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let z = Tensor3::zeros(2, 3, 3);
        assert_eq!(relu(&z), z);
    }

    #[test]
    fn maxpool_examples() {
        let t = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&t, 2, 2).unwrap().data(), &[4.0]);
        let z = maxpool2d(&Tensor3::zeros(2, 4, 4), 2, 2).unwrap();
        assert_eq!(z, Tensor3::zeros(2, 2, 2));
        assert!(matches!(maxpool2d(&t, 3, 1), Err(Error::Geometry(_))));
    }

    #[test]
    fn maxpool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&mut rng, 2, 6, 6);
        let out = maxpool2d(&t, 2, 2).unwrap();
        for c in 0..2 {
            for r in 0..3 {
                for q in 0..3 {
                    let window = [
                        t.at(c, 2 * r, 2 * q),
                        t.at(c, 2 * r, 2 * q + 1),
                        t.at(c, 2 * r + 1, 2 * q),
                        t.at(c, 2 * r + 1, 2 * q + 1),
                    ];
                    let m = window.iter().copied().fold(f32::MIN, f32::max);
                    assert_eq!(out.at(c, r, q), m);
                }
            }
        }
    }

    #[test]
    fn dense_examples() {
        let eye = DenseLayerSpec {
            in_dim: 2,
            out_dim: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        };
        assert_eq!(dense(&[3.0, 4.0], &eye).unwrap(), vec![3.0, 4.0]);
        let zero = DenseLayerSpec {
            in_dim: 3,
            out_dim: 2,
            weights: vec![0.0; 6],
            bias: vec![1.0, 2.0],
        };
        assert_eq!(dense(&[5.0, -1.0, 9.0], &zero).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(dense(&[1.0], &zero), Err(Error::Dimension(_))));
    }

    #[test]
    fn dense_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = DenseLayerSpec {
            in_dim: 4,
            out_dim: 3,
            weights: (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            bias: (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        };
        let x: Vec<f32> = (0..4).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let y = dense(&x, &layer).unwrap();
        for j in 0..3 {
            let mut acc = 0.0f32;
            for i in 0..4 {
                acc += layer.weights[j * 4 + i] * x[i];
            }
            assert_eq!(y[j], acc + layer.bias[j]);
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let s = softmax(&[1000.0, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-6 && s[1] >= 0.0 && s[1] < 1e-6);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_argmax_preserved(
            x in prop::collection::vec(-50.0f32..50.0, 1..20),
            shift in -100.0f32..100.0,
        ) {
            let s = softmax(&x);
            let sum: f32 = s.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(s.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(argmax(&x), argmax(&s));
            let shifted: Vec<f32> = x.iter().map(|v| v + shift).collect();
            prop_assert_eq!(argmax(&softmax(&shifted)), argmax(&s));
        }

        #[test]
        fn relu_elementwise(x in prop::collection::vec(-5.0f32..5.0, 12)) {
            let t = Tensor3::from_vec(3, 2, 2, x.clone()).unwrap();
            let r = relu(&t);
            for (a, b) in x.iter().zip(r.data()) {
                prop_assert!(*b >= 0.0);
                if *a > 0.0 { prop_assert_eq!(a, b); }
            }
        }

        #[test]
        fn mask_subset_consistency(seed in 0u64..1000, a in prop::collection::vec(0usize..6, 0..6), extra in prop::collection::vec(0usize..6, 0..6)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(&mut rng, 3, 7, 7);
            let layer = random_conv(&mut rng, 6, 3, 3, 1, 1, true);
            let small = FilterMask::new(6, a.clone()).unwrap();
            let mut b = a.clone();
            b.extend(extra);
            let big = FilterMask::new(6, b).unwrap();
            let ys = conv2d(&input, &layer, Some(&small)).unwrap();
            let yb = conv2d(&input, &layer, Some(&big)).unwrap();
            for &c in small.active() {
                prop_assert_eq!(ys.channel(c), yb.channel(c));
            }
            let full = conv2d(&input, &layer, Some(&FilterMask::full(6))).unwrap();
            prop_assert_eq!(full, conv2d(&input, &layer, None).unwrap());
        }

        #[test]
        fn zero_channel_skipping_is_exact(seed in 0u64..1000, dead in prop::collection::vec(0usize..4, 1..4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut input = random_tensor(&mut rng, 4, 6, 6);
            for &c in &dead {
                input.channel_mut(c).fill(0.0);
            }
            let layer = random_conv(&mut rng, 3, 4, 3, 1, 1, true);
            let live: Vec<usize> = (0..4).filter(|c| !dead.contains(c)).collect();
            let live = FilterMask::new(4, live).unwrap();
            let mut skipped = Tensor3::zeros(0, 0, 0);
            conv2d_into(&input, &layer, None, Some(&live), &mut skipped).unwrap();
            prop_assert_eq!(skipped, conv2d(&input, &layer, None).unwrap());
        }

        #[test]
        fn bias_free_conv_is_homogeneous(seed in 0u64..1000, alpha in 0.1f32..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(&mut rng, 2, 6, 6);
            let layer = random_conv(&mut rng, 3, 2, 3, 1, 1, false);
            let a = conv2d(&input.scaled(alpha), &layer, None).unwrap();
            let b = conv2d(&input, &layer, None).unwrap().scaled(alpha);
            let scale = b.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * scale);
            }
        }
    }
}
