//! SORT lifecycle: predict every track, associate by IoU, correct matched
//! tracks, spawn tracks for leftover detections and retire stale ones.

use thiserror::Error;

use crate::assignment::associate;
use crate::geometry::BoundingBox;
use crate::kalman::{self, KalmanConfig, TrackState};

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("frame index {got} is not after the previous frame {previous}")]
    NonIncreasingFrame { previous: u64, got: u64 },
    #[error("invalid tracker configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortConfig {
    /// Frames a track may go unmatched before it is deleted.
    pub max_age: u32,
    /// Consecutive updates before a track is reported.
    pub min_hits: u32,
    pub iou_min: f64,
    /// Report young tracks while `frame_index <= min_hits`.
    pub emit_warmup: bool,
    pub kalman: KalmanConfig,
}

impl Default for SortConfig {
    fn default() -> Self {
        Self {
            max_age: 1,
            min_hits: 3,
            iou_min: 0.3,
            emit_warmup: true,
            kalman: KalmanConfig::default(),
        }
    }
}

impl SortConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.max_age < 1 {
            return Err(TrackerError::Config("max_age must be >= 1".into()));
        }
        if self.min_hits < 1 {
            return Err(TrackerError::Config("min_hits must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_min) {
            return Err(TrackerError::Config(format!(
                "iou_min {} outside [0, 1]",
                self.iou_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub state: TrackState,
    /// Consecutive frames with a matched detection, counting the one that
    /// spawned the track.
    pub hits: u32,
    pub age: u32,
    pub time_since_update: u32,
    pub class_id: u32,
}

impl Track {
    pub fn bbox(&self) -> BoundingBox {
        // The scale floor keeps s > 0; r only comes from valid measurements.
        kalman::state_to_box(&self.state)
            .unwrap_or_else(|_| {
                let (u, v) = (self.state.x[0], self.state.x[1]);
                BoundingBox::new(u, v, u, v)
            })
            .with_class(self.class_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub id: u64,
    pub bbox: BoundingBox,
    pub class_id: u32,
}

#[derive(Debug, Clone)]
pub struct Sort {
    cfg: SortConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u64>,
}

impl Sort {
    pub fn new(cfg: SortConfig) -> Result<Self, TrackerError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
        })
    }

    pub fn config(&self) -> &SortConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Process one frame of detections and return the confirmed tracks that
    /// were matched this frame, ordered by id.
    pub fn step(
        &mut self,
        detections: &[BoundingBox],
        frame_index: u64,
    ) -> Result<Vec<TrackOutput>, TrackerError> {
        if let Some(previous) = self.last_frame {
            if frame_index <= previous {
                return Err(TrackerError::NonIncreasingFrame {
                    previous,
                    got: frame_index,
                });
            }
        }
        self.last_frame = Some(frame_index);
        let kcfg = &self.cfg.kalman;

        for t in &mut self.tracks {
            t.state = kalman::predict(&t.state, kcfg);
            t.age += 1;
            t.time_since_update += 1;
        }

        let predicted: Vec<BoundingBox> = self.tracks.iter().map(Track::bbox).collect();
        let assoc = associate(&predicted, detections, self.cfg.iou_min);

        for &(ti, di) in &assoc.matches {
            let det = &detections[di];
            let Ok(z) = kalman::box_to_measurement(det) else {
                continue;
            };
            let track = &mut self.tracks[ti];
            // A failed correction leaves the track coasting on its prediction.
            if let Ok(state) = kalman::update(&track.state, &z, kcfg) {
                track.hits = if track.time_since_update > 1 {
                    1
                } else {
                    track.hits + 1
                };
                track.state = state;
                track.time_since_update = 0;
                track.class_id = det.class_id;
            }
        }

        for &di in &assoc.unmatched_detections {
            let det = &detections[di];
            let Ok(state) = TrackState::from_box(det, kcfg) else {
                continue;
            };
            self.tracks.push(Track {
                id: self.next_id,
                state,
                hits: 1,
                age: 0,
                time_since_update: 0,
                class_id: det.class_id,
            });
            self.next_id += 1;
        }

        let warmup = self.cfg.emit_warmup && frame_index <= u64::from(self.cfg.min_hits);
        let mut out: Vec<TrackOutput> = self
            .tracks
            .iter()
            .filter(|t| t.time_since_update == 0 && (t.hits >= self.cfg.min_hits || warmup))
            .map(|t| TrackOutput {
                id: t.id,
                bbox: t.bbox(),
                class_id: t.class_id,
            })
            .collect();
        out.sort_by_key(|o| o.id);

        let max_age = self.cfg.max_age;
        self.tracks.retain(|t| t.time_since_update <= max_age);
        Ok(out)
    }

    /// Drop every track and forget the last frame index. Ids keep counting
    /// up so they stay unique across sequences.
    pub fn reset(&mut self) {
        self.tracks.clear();
        self.last_frame = None;
    }

    /// Like [`Sort::reset`] but also restarts ids at 1.
    pub fn reset_ids(&mut self) {
        self.reset();
        self.next_id = 1;
    }
}
