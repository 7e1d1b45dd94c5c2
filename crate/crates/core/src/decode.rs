//! Anchor-free head decoding: distribution-to-distance reduction, per-cell
//! box construction with a joint class score, score thresholding and NMS.

use std::cmp::Ordering;

use thiserror::Error;

use crate::geometry::{iou, BoundingBox};

pub const STRIDES: [u32; 3] = [8, 16, 32];
pub const DEFAULT_DFL_BINS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("head stride {0} is not one of 8, 16, 32")]
    UnknownStride(u32),
    #[error("head with stride {0} given more than once")]
    DuplicateStride(u32),
    #[error("no head with stride {0}")]
    MissingStride(u32),
    #[error("head has {0} channels, need at least 5 (4 box + classes)")]
    TooFewChannels(usize),
    #[error("head data has {found} values, shape needs {expected}")]
    DataLength { expected: usize, found: usize },
    #[error("stride {stride} head is {width}x{height} cells, input {input_width}x{input_height} px needs {expected_w}x{expected_h}")]
    ShapeMismatch {
        stride: u32,
        width: usize,
        height: usize,
        input_width: u32,
        input_height: u32,
        expected_w: usize,
        expected_h: usize,
    },
    #[error("raw head channel count {channels} does not fit 4 x {bins} box bins plus classes")]
    BadDflLayout { channels: usize, bins: usize },
}

/// One detection head: `channels x height x width` logits, channel-major.
/// Channels 0..4 are box-side distances (left, top, right, bottom) in stride
/// units; the rest are class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMap {
    pub stride: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl HeadMap {
    pub fn new(
        stride: u32,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, DecodeError> {
        if channels < 5 {
            return Err(DecodeError::TooFewChannels(channels));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(DecodeError::DataLength {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            stride,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(stride: u32, channels: usize, height: usize, width: usize) -> Self {
        Self {
            stride,
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.channels - 4
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

/// Expected bin index under the softmax of `logits`.
pub fn dfl_expect(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut norm = 0.0;
    let mut acc = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        let e = (l - max).exp();
        norm += e;
        acc += i as f64 * e;
    }
    acc / norm
}

/// Reduce a raw head with `4 * bins + classes` channels (four consecutive
/// groups of `bins` logits, one per box side) to the `4 + classes` layout
/// that [`decode_heads`] consumes.
pub fn reduce_dfl(raw: &HeadMap, bins: usize) -> Result<HeadMap, DecodeError> {
    if bins < 2 || raw.channels <= 4 * bins {
        return Err(DecodeError::BadDflLayout {
            channels: raw.channels,
            bins,
        });
    }
    let classes = raw.channels - 4 * bins;
    let mut out = HeadMap::zeros(raw.stride, 4 + classes, raw.height, raw.width);
    let mut logits = vec![0.0f64; bins];
    for y in 0..raw.height {
        for x in 0..raw.width {
            for side in 0..4 {
                for (b, l) in logits.iter_mut().enumerate() {
                    *l = f64::from(raw.at(side * bins + b, y, x));
                }
                out.set(side, y, x, dfl_expect(&logits) as f32);
            }
            for c in 0..classes {
                out.set(4 + c, y, x, raw.at(4 * bins + c, y, x));
            }
        }
    }
    Ok(out)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Check that `maps` hold exactly one head per stride in {8, 16, 32} sized
/// for an `input_width x input_height` image. Returns them ordered by stride.
pub fn check_heads(
    maps: &[HeadMap],
    input_width: u32,
    input_height: u32,
) -> Result<Vec<&HeadMap>, DecodeError> {
    let mut by_stride: [Option<&HeadMap>; 3] = [None; 3];
    for m in maps {
        let slot = STRIDES
            .iter()
            .position(|&s| s == m.stride)
            .ok_or(DecodeError::UnknownStride(m.stride))?;
        if by_stride[slot].is_some() {
            return Err(DecodeError::DuplicateStride(m.stride));
        }
        if m.channels < 5 {
            return Err(DecodeError::TooFewChannels(m.channels));
        }
        let expected_w = (input_width / m.stride) as usize;
        let expected_h = (input_height / m.stride) as usize;
        if m.width != expected_w || m.height != expected_h {
            return Err(DecodeError::ShapeMismatch {
                stride: m.stride,
                width: m.width,
                height: m.height,
                input_width,
                input_height,
                expected_w,
                expected_h,
            });
        }
        by_stride[slot] = Some(m);
    }
    by_stride
        .iter()
        .zip(STRIDES)
        .map(|(m, s)| m.ok_or(DecodeError::MissingStride(s)))
        .collect()
}

/// Every cell of every head as a box, before any score threshold. Order:
/// stride ascending, then row-major cells.
pub fn candidates(
    maps: &[HeadMap],
    input_width: u32,
    input_height: u32,
) -> Result<Vec<BoundingBox>, DecodeError> {
    let heads = check_heads(maps, input_width, input_height)?;
    let (w, h) = (f64::from(input_width), f64::from(input_height));
    let mut out = Vec::with_capacity(heads.iter().map(|m| m.width * m.height).sum());
    for m in heads {
        let stride = f64::from(m.stride);
        for cy in 0..m.height {
            for cx in 0..m.width {
                let (u, v) = ((cx as f64 + 0.5) * stride, (cy as f64 + 0.5) * stride);
                // Negative distances are not meaningful; treat them as zero.
                let d = |c: usize| f64::from(m.at(c, cy, cx)).max(0.0) * stride;
                let (class_id, logit) = (4..m.channels)
                    .map(|c| (c - 4, m.at(c, cy, cx)))
                    .fold((0usize, f32::NEG_INFINITY), |best, cur| {
                        if cur.1 > best.1 {
                            cur
                        } else {
                            best
                        }
                    });
                let b = BoundingBox {
                    x_min: u - d(0),
                    y_min: v - d(1),
                    x_max: u + d(2),
                    y_max: v + d(3),
                    score: sigmoid(f64::from(logit)),
                    class_id: class_id as u32,
                };
                out.push(b.clip(w, h));
            }
        }
    }
    Ok(out)
}

/// Decode all heads and keep boxes scoring at least `score_thresh`.
pub fn decode_heads(
    maps: &[HeadMap],
    input_width: u32,
    input_height: u32,
    score_thresh: f64,
) -> Result<Vec<BoundingBox>, DecodeError> {
    let mut boxes = candidates(maps, input_width, input_height)?;
    boxes.retain(|b| b.score >= score_thresh);
    Ok(boxes)
}

/// Greedy non-maximum suppression. Output is in descending score order; ties
/// keep input order.
pub fn nms(boxes: &[BoundingBox], iou_thresh: f64, class_aware: bool) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| desc_score(&boxes[a], &boxes[b]));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for i in order {
        let cand = &boxes[i];
        let suppressed = kept.iter().any(|k| {
            (!class_aware || k.class_id == cand.class_id) && iou(k, cand) > iou_thresh
        });
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

fn desc_score(a: &BoundingBox, b: &BoundingBox) -> Ordering {
    b.score.total_cmp(&a.score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heads(w: u32, h: u32, classes: usize) -> Vec<HeadMap> {
        STRIDES
            .iter()
            .map(|&s| HeadMap::zeros(s, 4 + classes, (h / s) as usize, (w / s) as usize))
            .collect()
    }

    /// Selection-based greedy reference: repeatedly take the best remaining
    /// box and strike everything it suppresses.
    pub(crate) fn nms_reference(boxes: &[BoundingBox], thr: f64, class_aware: bool) -> Vec<BoundingBox> {
        let mut alive = vec![true; boxes.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] && best.is_none_or(|b| boxes[i].score > boxes[b].score) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            out.push(boxes[b]);
            for j in 0..boxes.len() {
                if alive[j]
                    && (!class_aware || boxes[j].class_id == boxes[b].class_id)
                    && iou(&boxes[b], &boxes[j]) > thr
                {
                    alive[j] = false;
                }
            }
        }
        out
    }

    #[test]
    fn dfl_degenerate_and_uniform() {
        let mut logits = vec![0.0; 16];
        logits[3] = 1e4;
        assert_eq!(dfl_expect(&logits), 3.0);
        assert_eq!(dfl_expect(&[0.0; 16]), 7.5);
    }

    #[test]
    fn dfl_two_bins() {
        // softmax(0, ln 3) = (1/4, 3/4) => E = 3/4
        assert!((dfl_expect(&[0.0, 3f64.ln()]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn candidate_count_for_320x192() {
        let maps = heads(320, 192, 80);
        assert_eq!(candidates(&maps, 320, 192).unwrap().len(), 40 * 24 + 20 * 12 + 10 * 6);
    }

    #[test]
    fn very_negative_logits_give_nothing() {
        let mut maps = heads(320, 192, 80);
        for m in &mut maps {
            for c in 4..84 {
                for y in 0..m.height {
                    for x in 0..m.width {
                        m.set(c, y, x, -1e4);
                    }
                }
            }
        }
        assert!(decode_heads(&maps, 320, 192, 1e-9).unwrap().is_empty());
    }

    #[test]
    fn single_cell_box() {
        let mut maps = heads(320, 192, 80);
        for m in &mut maps {
            for v in m.data.iter_mut() {
                *v = -1e4;
            }
        }
        let m = &mut maps[0];
        for side in 0..4 {
            m.set(side, 0, 0, 1.0);
        }
        m.set(4 + 17, 0, 0, 0.0);
        let out = decode_heads(&maps, 320, 192, 0.25).unwrap();
        assert_eq!(out.len(), 1);
        let b = out[0];
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (0.0, 0.0, 12.0, 12.0));
        assert_eq!(b.score, 0.5);
        assert_eq!(b.class_id, 17);
    }

    #[test]
    fn stride_errors() {
        let mut maps = heads(320, 192, 2);
        maps.pop();
        assert_eq!(candidates(&maps, 320, 192), Err(DecodeError::MissingStride(32)));
        let mut maps = heads(320, 192, 2);
        maps[2].stride = 8;
        assert_eq!(candidates(&maps, 320, 192), Err(DecodeError::DuplicateStride(8)));
        let mut maps = heads(320, 192, 2);
        maps[0].stride = 4;
        assert_eq!(candidates(&maps, 320, 192), Err(DecodeError::UnknownStride(4)));
        assert!(matches!(
            candidates(&heads(320, 192, 2), 640, 192),
            Err(DecodeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dfl_reduction_feeds_decoder() {
        let bins = 4;
        let mut raw = HeadMap::zeros(8, 4 * bins + 3, 2, 2);
        // left side distribution peaked at bin 2, the others uniform (1.5)
        raw.set(2, 1, 1, 1e4);
        let red = reduce_dfl(&raw, bins).unwrap();
        assert_eq!(red.channels, 7);
        assert_eq!(red.at(0, 1, 1), 2.0);
        assert_eq!(red.at(1, 1, 1), 1.5);
        assert!(reduce_dfl(&raw, 8).is_err());
    }

    #[test]
    fn identical_boxes_keep_higher_score() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.8);
        let b = a.with_score(0.9);
        let out = nms(&[a, b], 0.45, true);
        assert_eq!(out, vec![b]);
    }

    #[test]
    fn disjoint_boxes_survive_in_score_order() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.3);
        let b = BoundingBox::new(20.0, 0.0, 30.0, 10.0).with_score(0.9);
        let c = BoundingBox::new(40.0, 0.0, 50.0, 10.0).with_score(0.6);
        assert_eq!(nms(&[a, b, c], 0.45, false), vec![b, c, a]);
    }

    #[test]
    fn class_aware_keeps_other_classes() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.9);
        let b = a.with_score(0.8).with_class(1);
        assert_eq!(nms(&[a, b], 0.45, true).len(), 2);
        assert_eq!(nms(&[a, b], 0.45, false).len(), 1);
    }

    #[test]
    fn matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let boxes: Vec<BoundingBox> = (0..50)
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
                    let (w, h) = (rng.gen_range(5.0..40.0), rng.gen_range(5.0..40.0));
                    BoundingBox::new(x, y, x + w, y + h)
                        .with_score(rng.gen())
                        .with_class(rng.gen_range(0..3))
                })
                .collect();
            for aware in [false, true] {
                assert_eq!(nms(&boxes, 0.45, aware), nms_reference(&boxes, 0.45, aware));
            }
        }
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<BoundingBox>> {
        proptest::collection::vec(
            (0.0..100.0f64, 0.0..100.0f64, 1.0..40.0f64, 1.0..40.0f64, 0.0..1.0f64, 0u32..3)
                .prop_map(|(x, y, w, h, s, c)| BoundingBox::new(x, y, x + w, y + h).with_score(s).with_class(c)),
            0..40,
        )
    }

    proptest! {
        #[test]
        fn nms_is_idempotent_subset(boxes in arb_boxes(), thr in 0.0..1.0f64, aware in any::<bool>()) {
            let once = nms(&boxes, thr, aware);
            prop_assert!(once.iter().all(|k| boxes.contains(k)));
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    if !aware || a.class_id == b.class_id {
                        prop_assert!(iou(a, b) <= thr);
                    }
                }
            }
            prop_assert_eq!(nms(&once, thr, aware), once);
        }

        #[test]
        fn decoded_boxes_are_clipped_and_threshold_monotone(
            seed in any::<u64>(), lo in 0.0..1.0f64, extra in 0.0..1.0f64
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut maps = heads(64, 32, 3);
            for m in &mut maps {
                for v in m.data.iter_mut() {
                    *v = rng.gen_range(-4.0..4.0);
                }
            }
            let a = decode_heads(&maps, 64, 32, lo).unwrap();
            let b = decode_heads(&maps, 64, 32, (lo + extra).min(1.0)).unwrap();
            prop_assert!(b.len() <= a.len());
            for bx in &a {
                prop_assert!(bx.x_min >= 0.0 && bx.y_min >= 0.0 && bx.x_max <= 64.0 && bx.y_max <= 32.0);
            }
        }
    }
}
