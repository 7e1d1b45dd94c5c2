//! Tracking-by-detection toolkit.
//!
//! SORT tracking over YOLO-style anchor-free detections, CLEAR MOT and COCO
//! mAP scoring, and executable models of a quantized streaming accelerator:
//! MultiThreshold requantization, affine streamlining passes over an operator
//! graph, and a cycle-level FIFO simulator used to size stream buffers.

pub mod assignment;
pub mod dataflow;
pub mod decode;
pub mod geometry;
pub mod io;
pub mod kalman;
pub mod metrics;
pub mod quantcore;
pub mod streamline;
pub mod synthetic;
pub mod tracker;

pub use assignment::{associate, solve_lap, AssignmentResult};
pub use geometry::{area, iou, BoundingBox};
pub use kalman::{KalmanConfig, TrackState};
pub use tracker::{Sort, SortConfig, Track, TrackOutput};
