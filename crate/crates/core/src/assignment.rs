//! Linear assignment (Hungarian algorithm) and IoU-gated track/detection
//! association.

use thiserror::Error;

use crate::geometry::{iou, BoundingBox};

#[derive(Debug, Error, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix row {row} has {found} columns, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Minimum-cost one-to-one assignment of rows to columns.
///
/// Returns `min(m, n)` `(row, col)` pairs sorted by row. Shortest augmenting
/// paths with dual potentials, O(m²n). Columns are scanned in index order and
/// the first strictly smaller reduced cost wins, so the output is a pure
/// function of the input matrix.
pub fn solve_lap(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>, AssignmentError> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let cols = cost[0].len();
    for (r, row) in cost.iter().enumerate() {
        if row.len() != cols {
            return Err(AssignmentError::Ragged {
                row: r,
                expected: cols,
                found: row.len(),
            });
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(AssignmentError::NonFinite { row: r, col: c });
        }
    }
    if cols == 0 {
        return Ok(Vec::new());
    }

    if rows <= cols {
        Ok(hungarian(rows, cols, |r, c| cost[r][c]))
    } else {
        let mut pairs: Vec<(usize, usize)> = hungarian(cols, rows, |r, c| cost[c][r])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Potential-based Hungarian method for `n <= m`; `a(i, j)` is the cost of
/// row `i`, column `j`.
fn hungarian(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    // 1-based with column 0 as the virtual root of each augmenting tree.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentResult {
    /// `(track_index, detection_index)`
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Match detections to tracks by maximum total IoU. Pairs whose IoU falls
/// below `iou_min` after solving are split back into unmatched tracks and
/// detections.
pub fn associate(
    tracks: &[BoundingBox],
    detections: &[BoundingBox],
    iou_min: f64,
) -> AssignmentResult {
    let cost: Vec<Vec<f64>> = tracks
        .iter()
        .map(|t| detections.iter().map(|d| -iou(t, d)).collect())
        .collect();
    // IoU is always finite and rows are uniform, so the solver cannot fail.
    let pairs = solve_lap(&cost).unwrap_or_default();

    let mut track_taken = vec![false; tracks.len()];
    let mut det_taken = vec![false; detections.len()];
    let mut matches = Vec::with_capacity(pairs.len());
    for (t, d) in pairs {
        if -cost[t][d] >= iou_min {
            track_taken[t] = true;
            det_taken[d] = true;
            matches.push((t, d));
        }
    }
    AssignmentResult {
        matches,
        unmatched_tracks: (0..tracks.len()).filter(|&t| !track_taken[t]).collect(),
        unmatched_detections: (0..detections.len()).filter(|&d| !det_taken[d]).collect(),
    }
}
