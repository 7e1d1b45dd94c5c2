//! CLEAR MOT accuracy and COCO-style detection mAP.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::assignment::solve_lap;
use crate::geometry::{iou, BoundingBox};

/// Default IoU a ground-truth/hypothesis pair needs to count as a match.
pub const DEFAULT_MOT_GATE: f64 = 0.5;
/// Cost given to pairs below the gate so the solver only uses them when it
/// has to; such pairs are discarded afterwards.
const MASKED_COST: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("duplicate {kind} id {id} in frame")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("MOTA is undefined without ground-truth objects")]
    NoGroundTruth,
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("detection score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("{dets} detection images but {gts} ground-truth images")]
    ImageCount { dets: usize, gts: usize },
    #[error("IoU gate {0} outside (0, 1]")]
    BadGate(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FrameCounts {
    pub gt: u64,
    pub matches: u64,
    pub misses: u64,
    pub false_positives: u64,
    pub id_switches: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MotTotals {
    pub frames: u64,
    pub gt: u64,
    pub matches: u64,
    pub misses: u64,
    pub false_positives: u64,
    pub id_switches: u64,
}

impl MotTotals {
    /// `1 - (FN + FP + IDSW) / g`. Can be negative.
    pub fn mota(&self) -> Result<f64, MetricsError> {
        if self.gt == 0 {
            return Err(MetricsError::NoGroundTruth);
        }
        let errors = self.misses + self.false_positives + self.id_switches;
        Ok(1.0 - errors as f64 / self.gt as f64)
    }
}

/// Per-sequence CLEAR MOT state.
#[derive(Debug, Clone)]
pub struct MotAccumulator {
    gate: f64,
    frames: Vec<FrameCounts>,
    /// Track last matched to each ground-truth id, for switch detection.
    last_match: HashMap<u64, u64>,
    /// Matches of the previous frame, kept when still above the gate.
    previous: HashMap<u64, u64>,
}

impl Default for MotAccumulator {
    fn default() -> Self {
        Self::new(DEFAULT_MOT_GATE).expect("default gate is valid")
    }
}

fn check_unique(items: &[(u64, BoundingBox)], kind: &'static str) -> Result<(), MetricsError> {
    let mut seen = HashSet::with_capacity(items.len());
    for (id, _) in items {
        if !seen.insert(*id) {
            return Err(MetricsError::DuplicateId { kind, id: *id });
        }
    }
    Ok(())
}

impl MotAccumulator {
    pub fn new(gate: f64) -> Result<Self, MetricsError> {
        if !(gate > 0.0 && gate <= 1.0) {
            return Err(MetricsError::BadGate(gate));
        }
        Ok(Self {
            gate,
            frames: Vec::new(),
            last_match: HashMap::new(),
            previous: HashMap::new(),
        })
    }

    pub fn frames(&self) -> &[FrameCounts] {
        &self.frames
    }

    /// Score one frame. Previous correspondences that still overlap are kept
    /// first; the remaining objects are matched by maximum total IoU.
    pub fn step(
        &mut self,
        gt: &[(u64, BoundingBox)],
        hyp: &[(u64, BoundingBox)],
    ) -> Result<FrameCounts, MetricsError> {
        check_unique(gt, "ground-truth")?;
        check_unique(hyp, "hypothesis")?;
        let hyp_index: HashMap<u64, usize> = hyp.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();

        let mut gt_used = vec![false; gt.len()];
        let mut hyp_used = vec![false; hyp.len()];
        let mut pairs: Vec<(u64, u64)> = Vec::new();
        for (gi, (gid, gbox)) in gt.iter().enumerate() {
            let Some(&hid) = self.previous.get(gid) else { continue };
            let Some(&hi) = hyp_index.get(&hid) else { continue };
            if iou(gbox, &hyp[hi].1) >= self.gate {
                gt_used[gi] = true;
                hyp_used[hi] = true;
                pairs.push((*gid, hid));
            }
        }

        let free_gt: Vec<usize> = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
        let free_hyp: Vec<usize> = (0..hyp.len()).filter(|&i| !hyp_used[i]).collect();
        if !free_gt.is_empty() && !free_hyp.is_empty() {
            let cost: Vec<Vec<f64>> = free_gt
                .iter()
                .map(|&g| {
                    free_hyp
                        .iter()
                        .map(|&h| {
                            let o = iou(&gt[g].1, &hyp[h].1);
                            if o >= self.gate {
                                1.0 - o
                            } else {
                                MASKED_COST
                            }
                        })
                        .collect()
                })
                .collect();
            let solved = solve_lap(&cost).expect("finite rectangular cost matrix");
            for (r, c) in solved {
                if cost[r][c] < MASKED_COST {
                    pairs.push((gt[free_gt[r]].0, hyp[free_hyp[c]].0));
                }
            }
        }

        let mut counts = FrameCounts {
            gt: gt.len() as u64,
            matches: pairs.len() as u64,
            misses: (gt.len() - pairs.len()) as u64,
            false_positives: (hyp.len() - pairs.len()) as u64,
            id_switches: 0,
        };
        self.previous.clear();
        for &(g, h) in &pairs {
            if let Some(prev) = self.last_match.insert(g, h) {
                if prev != h {
                    counts.id_switches += 1;
                }
            }
            self.previous.insert(g, h);
        }
        self.frames.push(counts);
        Ok(counts)
    }

    /// Append another sequence's frames; totals become pooled sums.
    pub fn merge(&mut self, other: &MotAccumulator) {
        self.frames.extend_from_slice(&other.frames);
    }

    pub fn totals(&self) -> MotTotals {
        self.frames.iter().fold(
            MotTotals {
                frames: self.frames.len() as u64,
                ..MotTotals::default()
            },
            |mut t, f| {
                t.gt += f.gt;
                t.matches += f.matches;
                t.misses += f.misses;
                t.false_positives += f.false_positives;
                t.id_switches += f.id_switches;
                t
            },
        )
    }

    pub fn mota(&self) -> Result<f64, MetricsError> {
        self.totals().mota()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrCurvePoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

fn check_images(dets: &[Vec<BoundingBox>], gts: &[Vec<BoundingBox>]) -> Result<(), MetricsError> {
    if dets.len() != gts.len() {
        return Err(MetricsError::ImageCount {
            dets: dets.len(),
            gts: gts.len(),
        });
    }
    for d in dets.iter().flatten() {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(MetricsError::ScoreOutOfRange(d.score));
        }
    }
    Ok(())
}

/// Detections of one class ranked by score, each flagged true or false
/// positive; plus the class's ground-truth count.
fn ranked_matches(
    dets: &[Vec<BoundingBox>],
    gts: &[Vec<BoundingBox>],
    iou_thresh: f64,
    class_id: u32,
) -> (Vec<(f64, bool)>, usize) {
    let mut ranked: Vec<(usize, &BoundingBox)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let class_gts: Vec<Vec<&BoundingBox>> = gts
        .iter()
        .map(|g| g.iter().filter(|b| b.class_id == class_id).collect())
        .collect();
    let n_gt = class_gts.iter().map(Vec::len).sum();
    let mut taken: Vec<Vec<bool>> = class_gts.iter().map(|g| vec![false; g.len()]).collect();
    let flags = ranked
        .into_iter()
        .map(|(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in class_gts[img].iter().enumerate() {
                if taken[img][gi] {
                    continue;
                }
                let o = iou(d, g);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                taken[img][gi] = true;
            }
            (d.score, best.is_some())
        })
        .collect();
    (flags, n_gt)
}

/// Raw precision/recall after each ranked detection of `class_id`.
pub fn pr_curve(
    dets: &[Vec<BoundingBox>],
    gts: &[Vec<BoundingBox>],
    iou_thresh: f64,
    class_id: u32,
) -> Result<Vec<PrCurvePoint>, MetricsError> {
    check_images(dets, gts)?;
    let (flags, n_gt) = ranked_matches(dets, gts, iou_thresh, class_id);
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(flags
        .into_iter()
        .map(|(score, hit)| {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            PrCurvePoint {
                score,
                precision: tp as f64 / (tp + fp) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            }
        })
        .collect())
}

/// 101-point interpolated AP. `None` when the class has no ground truth.
/// `dets[i]` and `gts[i]` belong to the same image.
pub fn average_precision(
    dets: &[Vec<BoundingBox>],
    gts: &[Vec<BoundingBox>],
    iou_thresh: f64,
    class_id: u32,
) -> Result<Option<f64>, MetricsError> {
    let curve = pr_curve(dets, gts, iou_thresh, class_id)?;
    let n_gt: usize = gts.iter().flatten().filter(|b| b.class_id == class_id).count();
    if n_gt == 0 {
        return Ok(None);
    }
    let recall: Vec<f64> = curve.iter().map(|p| p.recall).collect();
    let mut precision: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|i| {
            let r = f64::from(i) / 100.0;
            let k = recall.partition_point(|&x| x < r);
            precision.get(k).copied().unwrap_or(0.0)
        })
        .sum();
    Ok(Some(total / 101.0))
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CocoSummary {
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    /// `(class, AP averaged over thresholds)`.
    pub per_class: Vec<(u32, f64)>,
}

/// Mean AP over ground-truth classes and the ten COCO IoU thresholds.
pub fn coco_summary(
    dets: &[Vec<BoundingBox>],
    gts: &[Vec<BoundingBox>],
) -> Result<CocoSummary, MetricsError> {
    check_images(dets, gts)?;
    let classes: BTreeSet<u32> = gts.iter().flatten().map(|b| b.class_id).collect();
    if classes.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let thresholds = coco_thresholds();
    let mut per_class = Vec::new();
    let (mut at50, mut at75) = (0.0, 0.0);
    for &c in &classes {
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| average_precision(dets, gts, t, c).map(|ap| ap.expect("class has ground truth")))
            .collect::<Result<_, _>>()?;
        at50 += aps[0];
        at75 += aps[5];
        per_class.push((c, aps.iter().sum::<f64>() / aps.len() as f64));
    }
    let n = classes.len() as f64;
    Ok(CocoSummary {
        map: per_class.iter().map(|(_, ap)| ap).sum::<f64>() / n,
        map50: at50 / n,
        map75: at75 / n,
        per_class,
    })
}

pub fn coco_map(dets: &[Vec<BoundingBox>], gts: &[Vec<BoundingBox>]) -> Result<f64, MetricsError> {
    coco_summary(dets, gts).map(|s| s.map)
}
