//! Quantized operator semantics.
//!
//! Integer tensors carry a [`QuantSpec`] (bit width, signedness and the
//! real-valued scale of one integer step). Requantization is expressed as a
//! [`MultiThresholdOp`]: the output for input `x` is the number of thresholds
//! `t_i <= x`, plus a constant bias. Any affine map `a*x + b` applied before a
//! MultiThreshold can be folded into its thresholds with [`absorb_affine`].
//!
//! Convolution is computed as a matrix product between a filter matrix (one
//! row per output channel) and an image matrix (one column per output
//! position). Both use the same channel-interleaved column order: for kernel
//! offset `(ky, kx)` all input channels are adjacent, so one column holds the
//! whole filter context of one output pixel.

use ndarray::{s, Array2, Array3, Array4, Axis, LinalgScalar};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("bit width must be between 1 and 32, got {0}")]
    BadBitWidth(u32),
    #[error("quantization scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("value {value} outside the {bits}-bit {kind} range")]
    OutOfRange {
        value: i64,
        bits: u32,
        kind: &'static str,
    },
    #[error("channel {channel}: thresholds must be strictly ascending and finite")]
    UnsortedThresholds { channel: usize },
    #[error("channel {channel}: {found} thresholds, {out_bits}-bit output needs {expected}")]
    ThresholdCount {
        channel: usize,
        out_bits: u32,
        expected: usize,
        found: usize,
    },
    #[error("affine scale is zero on channel {channel}")]
    ZeroScale { channel: usize },
    #[error("affine parameter vector has length {found}, expected 1 or {channels}")]
    ParamLength { channels: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tensors disagree on quantization scale ({0} vs {1})")]
    ScaleMismatch(f64, f64),
}

/// Uniform integer quantizer: integer `q` stands for the real `q * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub scale: f64,
    pub signed: bool,
}

impl QuantSpec {
    pub fn new(bits: u32, scale: f64, signed: bool) -> Result<Self, QuantError> {
        let spec = Self {
            bits,
            scale,
            signed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn unsigned(bits: u32, scale: f64) -> Result<Self, QuantError> {
        Self::new(bits, scale, false)
    }

    pub fn signed(bits: u32, scale: f64) -> Result<Self, QuantError> {
        Self::new(bits, scale, true)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !(1..=32).contains(&self.bits) {
            return Err(QuantError::BadBitWidth(self.bits));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(QuantError::BadScale(self.scale));
        }
        Ok(())
    }

    pub fn min(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn max(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    /// Thresholds a MultiThreshold needs to produce every level: `2^N - 1`.
    pub fn num_thresholds(&self) -> usize {
        (1usize << self.bits) - 1
    }

    pub fn contains(&self, q: i64) -> bool {
        (self.min()..=self.max()).contains(&q)
    }

    fn kind(&self) -> &'static str {
        if self.signed {
            "signed"
        } else {
            "unsigned"
        }
    }
}

/// Integer tensor `[channels][height][width]` whose values all lie in the
/// range of its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct IntTensor {
    data: Array3<i64>,
    spec: QuantSpec,
}

impl IntTensor {
    pub fn new(data: Array3<i64>, spec: QuantSpec) -> Result<Self, QuantError> {
        spec.validate()?;
        if let Some(&bad) = data.iter().find(|&&v| !spec.contains(v)) {
            return Err(QuantError::OutOfRange {
                value: bad,
                bits: spec.bits,
                kind: spec.kind(),
            });
        }
        Ok(Self { data, spec })
    }

    pub fn data(&self) -> &Array3<i64> {
        &self.data
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn into_data(self) -> Array3<i64> {
        self.data
    }
}

/// `clamp(floor(x / scale + 1/2))` into the spec range (ties round up).
pub fn quantize(x: &Array3<f64>, spec: QuantSpec) -> IntTensor {
    let (lo, hi) = (spec.min(), spec.max());
    let data = x.mapv(|v| {
        let q = (v / spec.scale + 0.5).floor();
        if q.is_nan() {
            0
        } else {
            (q.clamp(lo as f64, hi as f64)) as i64
        }
    });
    IntTensor { data, spec }
}

pub fn dequantize(t: &IntTensor) -> Array3<f64> {
    t.data.mapv(|q| q as f64 * t.spec.scale)
}

/// One channel of a MultiThreshold.
///
/// Ascending channels output `count(t <= x)`. Inverted channels, which
/// appear after absorbing a negative scale, output `n - count(t < x)`; both
/// are nondecreasing-count forms over ascending threshold storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChannel {
    pub thresholds: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub inverted: bool,
}

impl ThresholdChannel {
    pub fn ascending(thresholds: Vec<f64>) -> Self {
        Self {
            thresholds,
            inverted: false,
        }
    }

    #[inline]
    pub fn level(&self, x: f64) -> i64 {
        let t = &self.thresholds;
        if self.inverted {
            (t.len() - t.partition_point(|&ti| ti < x)) as i64
        } else {
            t.partition_point(|&ti| ti <= x) as i64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiThresholdOp {
    pub channels: Vec<ThresholdChannel>,
    pub out_bits: u32,
    #[serde(default)]
    pub out_bias: i64,
}

impl MultiThresholdOp {
    /// Validates that every channel holds `2^out_bits - 1` strictly ascending
    /// finite thresholds.
    pub fn new(
        channels: Vec<ThresholdChannel>,
        out_bits: u32,
        out_bias: i64,
    ) -> Result<Self, QuantError> {
        let op = Self {
            channels,
            out_bits,
            out_bias,
        };
        op.validate()?;
        Ok(op)
    }

    pub fn from_thresholds(per_channel: Vec<Vec<f64>>, out_bits: u32) -> Result<Self, QuantError> {
        Self::new(
            per_channel.into_iter().map(ThresholdChannel::ascending).collect(),
            out_bits,
            0,
        )
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !(1..=16).contains(&self.out_bits) {
            return Err(QuantError::BadBitWidth(self.out_bits));
        }
        let expected = (1usize << self.out_bits) - 1;
        for (c, ch) in self.channels.iter().enumerate() {
            if ch.thresholds.len() != expected {
                return Err(QuantError::ThresholdCount {
                    channel: c,
                    out_bits: self.out_bits,
                    expected,
                    found: ch.thresholds.len(),
                });
            }
            let sorted = ch.thresholds.iter().all(|t| t.is_finite())
                && ch.thresholds.windows(2).all(|w| w[0] < w[1]);
            if !sorted {
                return Err(QuantError::UnsortedThresholds { channel: c });
            }
        }
        Ok(())
    }

    /// ReLU followed by the uniform quantizer of `spec`, for inputs expressed
    /// in real units: level `k` is reached at `(k - 1/2) * scale`. Signed
    /// specs use a negative bias so level 0 sits at zero.
    pub fn uniform(channels: usize, spec: QuantSpec) -> Self {
        let n = spec.num_thresholds();
        let offset = spec.min();
        let thresholds: Vec<f64> = (0..n)
            .map(|i| (i as f64 + offset as f64 + 0.5) * spec.scale)
            .collect();
        Self {
            channels: vec![ThresholdChannel::ascending(thresholds); channels],
            out_bits: spec.bits,
            out_bias: offset,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_thresholds(&self) -> usize {
        (1usize << self.out_bits) - 1
    }

    /// Output integer range spec with unit scale.
    pub fn out_range(&self) -> (i64, i64) {
        (self.out_bias, self.out_bias + self.num_thresholds() as i64)
    }

    pub fn apply(&self, x: f64, channel: usize) -> i64 {
        multithreshold(x, self, channel)
    }

    pub fn apply_tensor(&self, x: &Array3<f64>) -> Result<Array3<i64>, QuantError> {
        let c = x.shape()[0];
        if c != self.channels.len() && self.channels.len() != 1 {
            return Err(QuantError::Shape(format!(
                "MultiThreshold has {} channels, input has {}",
                self.channels.len(),
                c
            )));
        }
        let mut out = Array3::<i64>::zeros(x.raw_dim());
        for (ci, (src, mut dst)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
            let ch = if self.channels.len() == 1 { 0 } else { ci };
            dst.zip_mut_with(&src, |d, &v| *d = multithreshold(v, self, ch));
        }
        Ok(out)
    }
}

/// Bias plus the number of thresholds at or below `x` on `channel`.
pub fn multithreshold(x: f64, op: &MultiThresholdOp, channel: usize) -> i64 {
    op.out_bias + op.channels[channel].level(x)
}

fn broadcast(params: &[f64], channels: usize) -> Result<Vec<f64>, QuantError> {
    match params.len() {
        1 => Ok(vec![params[0]; channels]),
        n if n == channels => Ok(params.to_vec()),
        n => Err(QuantError::ParamLength {
            channels,
            found: n,
        }),
    }
}

/// Fold `a*x + b` into the thresholds so that the returned op applied to `x`
/// equals `op` applied to `a*x + b`. `a` and `b` hold one value per channel
/// or a single broadcast value.
pub fn absorb_affine(
    op: &MultiThresholdOp,
    a: &[f64],
    b: &[f64],
) -> Result<MultiThresholdOp, QuantError> {
    let n = op.channels.len();
    let a = broadcast(a, n)?;
    let b = broadcast(b, n)?;
    let mut channels = Vec::with_capacity(n);
    for (c, ch) in op.channels.iter().enumerate() {
        let (ac, bc) = (a[c], b[c]);
        if ac == 0.0 {
            return Err(QuantError::ZeroScale { channel: c });
        }
        let mut thresholds: Vec<f64> = ch.thresholds.iter().map(|&t| (t - bc) / ac).collect();
        let mut inverted = ch.inverted;
        if ac < 0.0 {
            thresholds.reverse();
            inverted = !inverted;
        }
        channels.push(ThresholdChannel {
            thresholds,
            inverted,
        });
    }
    Ok(MultiThresholdOp {
        channels,
        out_bits: op.out_bits,
        out_bias: op.out_bias,
    })
}

/// Image matrix for a `kh x kw` kernel: one column per output position
/// (row-major), rows ordered `(ky, kx, channel)` with channel fastest.
/// Out-of-bounds positions read as zero padding.
pub fn im2col<T: LinalgScalar>(
    input: &Array3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Array2<T>, QuantError> {
    let (c, h, w) = input.dim();
    let (oh, ow) = output_size(h, w, kh, kw, stride, pad)?;
    let mut cols = Array2::<T>::zeros((kh * kw * c, oh * ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let col = oy * ow + ox;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (ky * kw + kx) * c;
                    for ci in 0..c {
                        cols[[base + ci, col]] = input[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Filter matrix with one row per output channel, columns in the same
/// `(ky, kx, channel)` order as [`im2col`].
pub fn filter_matrix<T: LinalgScalar>(weights: &Array4<T>) -> Array2<T> {
    let (oc, ic, kh, kw) = weights.dim();
    let mut m = Array2::<T>::zeros((oc, kh * kw * ic));
    for o in 0..oc {
        for ky in 0..kh {
            for kx in 0..kw {
                for ci in 0..ic {
                    m[[o, (ky * kw + kx) * ic + ci]] = weights[[o, ci, ky, kx]];
                }
            }
        }
    }
    m
}

pub fn output_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize), QuantError> {
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(QuantError::Shape("stride and kernel must be positive".into()));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if kh > ph || kw > pw {
        return Err(QuantError::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        )));
    }
    Ok(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

/// 2-D convolution as filter-matrix x image-matrix. Weights are
/// `[out_ch][in_ch][kh][kw]`; the result is `[out_ch][out_h][out_w]`.
pub fn conv2d<T: LinalgScalar>(
    input: &Array3<T>,
    weights: &Array4<T>,
    stride: usize,
    pad: usize,
) -> Result<Array3<T>, QuantError> {
    let (c, h, w) = input.dim();
    let (oc, ic, kh, kw) = weights.dim();
    if ic != c {
        return Err(QuantError::Shape(format!(
            "weights expect {ic} input channels, tensor has {c}"
        )));
    }
    let (oh, ow) = output_size(h, w, kh, kw, stride, pad)?;
    let cols = im2col(input, kh, kw, stride, pad)?;
    let prod = filter_matrix(weights).dot(&cols);
    prod.into_shape_with_order((oc, oh, ow))
        .map_err(|e| QuantError::Shape(e.to_string()))
}

/// Exact integer convolution of a quantized tensor. Accumulators are `i64`
/// and never saturate.
pub fn conv_int(
    input: &IntTensor,
    weights: &Array4<i64>,
    stride: usize,
    pad: usize,
) -> Result<Array3<i64>, QuantError> {
    conv2d(&input.data, weights, stride, pad)
}

/// Split along channels into consecutive groups of `sizes`.
pub fn split_channels(t: &IntTensor, sizes: &[usize]) -> Result<Vec<IntTensor>, QuantError> {
    split_array(&t.data, sizes)?
        .into_iter()
        .map(|data| Ok(IntTensor { data, spec: t.spec }))
        .collect()
}

pub fn split_array<T: Clone>(t: &Array3<T>, sizes: &[usize]) -> Result<Vec<Array3<T>>, QuantError> {
    let total: usize = sizes.iter().sum();
    if total != t.shape()[0] {
        return Err(QuantError::Shape(format!(
            "split sizes sum to {total}, tensor has {} channels",
            t.shape()[0]
        )));
    }
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&n| {
            let part = t.slice(s![start..start + n, .., ..]).to_owned();
            start += n;
            part
        })
        .collect())
}

/// Channel concatenation. Inputs must agree on spatial size and scale; bit
/// widths may differ and the result uses the narrowest container holding
/// every input range.
pub fn concat_channels(ts: &[IntTensor]) -> Result<IntTensor, QuantError> {
    let first = ts
        .first()
        .ok_or_else(|| QuantError::Shape("concat of zero tensors".into()))?;
    let scale = first.spec.scale;
    let signed = ts.iter().any(|t| t.spec.signed);
    let mut bits = 0;
    for t in ts {
        if t.spec.scale != scale {
            return Err(QuantError::ScaleMismatch(scale, t.spec.scale));
        }
        // An unsigned input inside a signed container needs one extra bit.
        let need = t.spec.bits + u32::from(signed && !t.spec.signed);
        bits = bits.max(need);
    }
    let data = concat_arrays(&ts.iter().map(|t| t.data.view()).collect::<Vec<_>>())?;
    Ok(IntTensor {
        data,
        spec: QuantSpec {
            bits,
            scale,
            signed,
        },
    })
}

pub fn concat_arrays<T: Clone>(
    parts: &[ndarray::ArrayView3<'_, T>],
) -> Result<Array3<T>, QuantError> {
    let Some(first) = parts.first() else {
        return Err(QuantError::Shape("concat of zero tensors".into()));
    };
    let spatial = &first.shape()[1..];
    if let Some(bad) = parts.iter().find(|p| &p.shape()[1..] != spatial) {
        return Err(QuantError::Shape(format!(
            "concat spatial dims {:?} vs {:?}",
            spatial,
            &bad.shape()[1..]
        )));
    }
    ndarray::concatenate(Axis(0), parts).map_err(|e| QuantError::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn op135() -> MultiThresholdOp {
        MultiThresholdOp::from_thresholds(vec![vec![1.0, 3.0, 5.0]], 2).unwrap()
    }

    /// Direct nested-loop convolution used as the reference.
    pub(crate) fn conv_naive(x: &Array3<i64>, w: &Array4<i64>, stride: usize, pad: usize) -> Array3<i64> {
        let (c, h, wd) = x.dim();
        let (oc, _, kh, kw) = w.dim();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Array3::<i64>::zeros((oc, oh, ow));
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w[[o, ci, ky, kx]] * x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[o, oy, ox]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn multithreshold_examples() {
        let op = op135();
        assert_eq!(multithreshold(0.0, &op, 0), 0);
        assert_eq!(multithreshold(4.0, &op, 0), 2);
        assert_eq!(multithreshold(10.0, &op, 0), 3);
        // boundary: a threshold equal to the input counts
        assert_eq!(multithreshold(3.0, &op, 0), 2);
    }

    #[test]
    fn threshold_validation() {
        assert!(matches!(
            MultiThresholdOp::from_thresholds(vec![vec![1.0, 1.0, 5.0]], 2),
            Err(QuantError::UnsortedThresholds { channel: 0 })
        ));
        assert!(matches!(
            MultiThresholdOp::from_thresholds(vec![vec![1.0, 2.0]], 2),
            Err(QuantError::ThresholdCount { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn identity_affine_is_noop() {
        let op = op135();
        assert_eq!(absorb_affine(&op, &[1.0], &[0.0]).unwrap(), op);
    }

    #[test]
    fn absorb_example_on_small_grid() {
        let op = op135();
        let folded = absorb_affine(&op, &[2.0], &[1.0]).unwrap();
        assert_eq!(folded.channels[0].thresholds, vec![0.0, 1.0, 2.0]);
        for x in -1..=3 {
            let x = x as f64;
            assert_eq!(multithreshold(x, &folded, 0), multithreshold(2.0 * x + 1.0, &op, 0));
        }
    }

    #[test]
    fn absorb_negative_scale_twice_restores_direction() {
        let op = op135();
        let once = absorb_affine(&op, &[-2.0], &[1.0]).unwrap();
        assert!(once.channels[0].inverted);
        let twice = absorb_affine(&once, &[-0.5], &[3.0]).unwrap();
        assert!(!twice.channels[0].inverted);
        for x in -40..=40 {
            let x = f64::from(x) * 0.25;
            let inner = -0.5 * x + 3.0;
            assert_eq!(
                multithreshold(x, &twice, 0),
                multithreshold(-2.0 * inner + 1.0, &op, 0)
            );
        }
    }

    #[test]
    fn zero_scale_is_rejected() {
        assert_eq!(
            absorb_affine(&op135(), &[0.0], &[1.0]),
            Err(QuantError::ZeroScale { channel: 0 })
        );
    }

    #[test]
    fn quantize_examples() {
        let spec = QuantSpec::unsigned(4, 0.5).unwrap();
        let q = quantize(&Array3::from_elem((1, 1, 1), 1.3), spec);
        assert_eq!(q.data()[[0, 0, 0]], 3);
        assert_eq!(dequantize(&q)[[0, 0, 0]], 1.5);
        assert_eq!(quantize(&Array3::zeros((1, 1, 1)), spec).data()[[0, 0, 0]], 0);
        assert_eq!(quantize(&Array3::from_elem((1, 1, 1), 100.0), spec).data()[[0, 0, 0]], 15);
    }

    #[test]
    fn spec_ranges() {
        let u = QuantSpec::unsigned(4, 1.0).unwrap();
        assert_eq!((u.min(), u.max(), u.num_thresholds()), (0, 15, 15));
        let s = QuantSpec::signed(4, 1.0).unwrap();
        assert_eq!((s.min(), s.max()), (-8, 7));
        assert!(QuantSpec::unsigned(0, 1.0).is_err());
        assert!(QuantSpec::unsigned(4, 0.0).is_err());
        assert!(IntTensor::new(Array3::from_elem((1, 1, 1), 16), u).is_err());
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let x = Array::from_shape_fn((1, 3, 4), |(_, y, x)| (y * 4 + x) as i64);
        let w = Array4::from_elem((1, 1, 1, 1), 1i64);
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn two_by_two_kernel_on_two_by_three_input() {
        // Two input and two output channels, 2x3 input, 2x2 kernel.
        let x = Array::from_shape_vec((2, 2, 3), vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]).unwrap();
        let w = Array::from_shape_vec(
            (2, 2, 2, 2),
            vec![1, 0, -1, 2, 3, 1, 0, -2, 2, 2, 1, -1, 0, 1, 1, 0],
        )
        .unwrap();
        let cols = im2col(&x, 2, 2, 1, 0).unwrap();
        assert_eq!(cols.dim(), (8, 2));
        // First column: filter context at (0, 0), channels interleaved.
        assert_eq!(cols.column(0).to_vec(), vec![1, 7, 2, 8, 4, 10, 5, 11]);
        let fm = filter_matrix(&w);
        assert_eq!(fm.row(0).to_vec(), vec![1, 3, 0, 1, -1, 0, 2, -2]);
        let out = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(out, conv_naive(&x, &w, 1, 0));
        // Hand check of output channel 0 at (0, 0):
        // 1*1 + 0*2 + -1*4 + 2*5 + 3*7 + 1*8 + 0*10 + -2*11 = 14
        assert_eq!(out[[0, 0, 0]], 14);
    }

    #[test]
    fn random_convolutions_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = QuantSpec::unsigned(4, 1.0).unwrap();
        for _ in 0..30 {
            let (c, oc) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            let (h, w) = (rng.gen_range(3..=9), rng.gen_range(3..=9));
            let x = Array::from_shape_fn((c, h, w), |_| rng.gen_range(0..16i64));
            let k = Array::from_shape_fn((oc, c, 3, 3), |_| rng.gen_range(-8..8i64));
            let t = IntTensor::new(x.clone(), spec).unwrap();
            let got = conv_int(&t, &k, 1, 1).unwrap();
            assert_eq!(got, conv_naive(&x, &k, 1, 1));
            let bound = (c * 9 * 8 * 15) as i64;
            assert!(got.iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Array3::<i64>::zeros((2, 3, 3));
        assert!(conv2d(&x, &Array4::<i64>::zeros((1, 3, 1, 1)), 1, 0).is_err());
        assert!(conv2d(&x, &Array4::<i64>::zeros((1, 2, 5, 5)), 1, 0).is_err());
        assert!(conv2d(&x, &Array4::<i64>::zeros((1, 2, 1, 1)), 0, 0).is_err());
    }

    #[test]
    fn concat_mixed_widths() {
        let a = IntTensor::new(Array3::from_elem((2, 2, 2), 15), QuantSpec::unsigned(4, 0.1).unwrap()).unwrap();
        let b = IntTensor::new(Array3::from_elem((1, 2, 2), 31), QuantSpec::unsigned(5, 0.1).unwrap()).unwrap();
        let cat = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.spec().bits, 5);
        assert_eq!(cat.channels(), 3);
        assert_eq!(cat.data()[[0, 0, 0]], 15);
        assert_eq!(cat.data()[[2, 1, 1]], 31);
        assert_eq!(concat_channels(std::slice::from_ref(&a)).unwrap(), a);

        let parts = split_channels(&cat, &[2, 1]).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
        assert!(split_channels(&cat, &[1, 1]).is_err());
    }

    #[test]
    fn concat_rejects_mismatches() {
        let a = IntTensor::new(Array3::zeros((1, 2, 2)), QuantSpec::unsigned(4, 0.1).unwrap()).unwrap();
        let b = IntTensor::new(Array3::zeros((1, 2, 2)), QuantSpec::unsigned(4, 0.2).unwrap()).unwrap();
        let c = IntTensor::new(Array3::zeros((1, 3, 2)), QuantSpec::unsigned(4, 0.1).unwrap()).unwrap();
        assert!(matches!(concat_channels(&[a.clone(), b]), Err(QuantError::ScaleMismatch(..))));
        assert!(matches!(concat_channels(&[a, c]), Err(QuantError::Shape(_))));
    }

    #[test]
    fn signed_unsigned_concat_widens() {
        let a = IntTensor::new(Array3::from_elem((1, 1, 1), 15), QuantSpec::unsigned(4, 1.0).unwrap()).unwrap();
        let b = IntTensor::new(Array3::from_elem((1, 1, 1), -8), QuantSpec::signed(4, 1.0).unwrap()).unwrap();
        let cat = concat_channels(&[a, b]).unwrap();
        assert_eq!((cat.spec().bits, cat.spec().signed), (5, true));
        assert!(IntTensor::new(cat.data().clone(), cat.spec()).is_ok());
    }

    fn ascending(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::btree_set(-1000i32..1000, n)
            .prop_map(|s| s.into_iter().map(|v| f64::from(v) * 0.1).collect())
    }

    proptest! {
        #[test]
        fn multithreshold_is_monotone(t in ascending(7), x in -200.0..200.0f64, dx in 0.0..50.0f64) {
            let op = MultiThresholdOp::from_thresholds(vec![t], 3).unwrap();
            prop_assert!(multithreshold(x, &op, 0) <= multithreshold(x + dx, &op, 0));
        }

        #[test]
        fn absorbed_affine_matches_on_integer_grid(
            t in ascending(15), a in 0.05..8.0f64, neg in any::<bool>(), b in -60.0..60.0f64
        ) {
            let a = if neg { -a } else { a };
            let op = MultiThresholdOp::from_thresholds(vec![t], 4).unwrap();
            let folded = absorb_affine(&op, &[a], &[b]).unwrap();
            for x in -64..=64 {
                let x = f64::from(x);
                prop_assert_eq!(multithreshold(a * x + b, &op, 0), multithreshold(x, &folded, 0));
            }
        }

        #[test]
        fn quantize_round_trip(vals in proptest::collection::vec(0.0..7.5f64, 1..20), scale in 0.01..2.0f64) {
            let spec = QuantSpec::unsigned(4, scale).unwrap();
            let x = Array3::from_shape_vec((1, 1, vals.len()), vals.iter().map(|v| v * scale * 2.0).collect()).unwrap();
            let q = quantize(&x, spec);
            let back = dequantize(&q);
            for (a, b) in x.iter().zip(back.iter()) {
                prop_assert!((a - b).abs() <= scale / 2.0 + 1e-12);
            }
            prop_assert_eq!(quantize(&back, spec), q);
        }

        #[test]
        fn uniform_threshold_op_matches_quantize(v in -20.0..20.0f64, scale in 0.05..3.0f64, signed in any::<bool>()) {
            let spec = QuantSpec::new(4, scale, signed).unwrap();
            let op = MultiThresholdOp::uniform(1, spec);
            let q = quantize(&Array3::from_elem((1, 1, 1), v), spec).data()[[0, 0, 0]];
            prop_assert_eq!(multithreshold(v, &op, 0), q);
        }
    }
}
