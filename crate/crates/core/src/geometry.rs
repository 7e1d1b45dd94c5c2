//! Axis-aligned boxes and overlap measures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box corners out of order: ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvertedCorners {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("box score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("non-finite box coordinate")]
    NonFinite,
}

/// Corner-form box in pixel coordinates with a detection score and class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub class_id: u32,
}

impl BoundingBox {
    /// Box with score 1 and class 0. Corners are not validated; use
    /// [`BoundingBox::try_new`] for untrusted input.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            score: 1.0,
            class_id: 0,
        }
    }

    pub fn try_new(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        score: f64,
        class_id: u32,
    ) -> Result<Self, GeometryError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
            score,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max, self.score];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.x_max < self.x_min || self.y_max < self.y_min {
            return Err(GeometryError::InvertedCorners {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
            });
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(GeometryError::ScoreOutOfRange(self.score));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
            ..*self
        }
    }

    /// Clamp all corners into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
            ..*self
        }
    }
}

pub fn area(b: &BoundingBox) -> f64 {
    b.width().max(0.0) * b.height().max(0.0)
}

/// Intersection over union. Two boxes whose union has zero area overlap by
/// convention 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
