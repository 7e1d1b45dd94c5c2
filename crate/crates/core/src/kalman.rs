//! Constant-velocity Kalman filter over box state.
//!
//! The state is `[u, v, s, r, du, dv, ds]`: box centre, area, aspect ratio
//! (width / height) and per-frame velocities of centre and area. The aspect
//! ratio is modelled as constant.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::geometry::BoundingBox;

pub type StateVector = SVector<f64, 7>;
pub type Measurement = SVector<f64, 4>;
pub type StateCovariance = SMatrix<f64, 7, 7>;

/// Lower bound on the area component of any predicted or corrected state.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum KalmanError {
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("box has non-positive area (width {width}, height {height})")]
    NonPositiveArea { width: f64, height: f64 },
    #[error("state has non-positive scale {scale} or aspect {aspect}")]
    NonPositiveState { scale: f64, aspect: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanConfig {
    pub transition: SMatrix<f64, 7, 7>,
    pub observation: SMatrix<f64, 4, 7>,
    pub process_noise: SMatrix<f64, 7, 7>,
    pub measurement_noise: SMatrix<f64, 4, 4>,
    pub initial_covariance: SMatrix<f64, 7, 7>,
}

impl KalmanConfig {
    /// Constant-velocity model with diagonal noise terms.
    pub fn with_diagonals(p0: [f64; 7], q: [f64; 7], r: [f64; 4]) -> Self {
        let mut transition = SMatrix::<f64, 7, 7>::identity();
        // u += du, v += dv, s += ds
        for i in 0..3 {
            transition[(i, i + 4)] = 1.0;
        }
        let mut observation = SMatrix::<f64, 4, 7>::zeros();
        for i in 0..4 {
            observation[(i, i)] = 1.0;
        }
        Self {
            transition,
            observation,
            process_noise: SMatrix::from_diagonal(&SVector::from(q)),
            measurement_noise: SMatrix::from_diagonal(&SVector::from(r)),
            initial_covariance: SMatrix::from_diagonal(&SVector::from(p0)),
        }
    }
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self::with_diagonals(
            [10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4],
            [1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4],
            [1.0, 1.0, 10.0, 10.0],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub x: StateVector,
    pub p: StateCovariance,
}

impl TrackState {
    /// Fresh state at a measurement with zero velocities and the configured
    /// initial covariance.
    pub fn from_measurement(z: &Measurement, cfg: &KalmanConfig) -> Self {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<4>(0).copy_from(z);
        Self {
            x,
            p: cfg.initial_covariance,
        }
    }

    pub fn from_box(b: &BoundingBox, cfg: &KalmanConfig) -> Result<Self, KalmanError> {
        Ok(Self::from_measurement(&box_to_measurement(b)?, cfg))
    }

    pub fn measurement(&self) -> Measurement {
        self.x.fixed_rows::<4>(0).into_owned()
    }
}

pub fn predict(state: &TrackState, cfg: &KalmanConfig) -> TrackState {
    let f = &cfg.transition;
    let mut x = f * state.x;
    if x[2] <= 0.0 {
        x[2] = SCALE_FLOOR;
    }
    let p = f * state.p * f.transpose() + cfg.process_noise;
    TrackState {
        x,
        p: symmetrize(&p),
    }
}

pub fn update(
    state: &TrackState,
    z: &Measurement,
    cfg: &KalmanConfig,
) -> Result<TrackState, KalmanError> {
    let h = &cfg.observation;
    let innovation = z - h * state.x;
    let s = h * state.p * h.transpose() + cfg.measurement_noise;
    let s_inv = s.try_inverse().ok_or(KalmanError::SingularInnovation)?;
    if !s_inv.iter().all(|v| v.is_finite()) {
        return Err(KalmanError::SingularInnovation);
    }
    let gain = state.p * h.transpose() * s_inv;
    let mut x = state.x + gain * innovation;
    if x[2] <= 0.0 {
        x[2] = SCALE_FLOOR;
    }
    let p = (StateCovariance::identity() - gain * h) * state.p;
    Ok(TrackState {
        x,
        p: symmetrize(&p),
    })
}

fn symmetrize(p: &StateCovariance) -> StateCovariance {
    (p + p.transpose()) * 0.5
}

/// `[u, v, s, r]` for a corner-form box.
pub fn box_to_measurement(b: &BoundingBox) -> Result<Measurement, KalmanError> {
    let (w, h) = (b.width(), b.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(KalmanError::NonPositiveArea {
            width: w,
            height: h,
        });
    }
    let (u, v) = b.center();
    Ok(Measurement::new(u, v, w * h, w / h))
}

/// Corner-form box for the position part of a state. Score is 1, class 0.
pub fn state_to_box(state: &TrackState) -> Result<BoundingBox, KalmanError> {
    measurement_to_box(&state.measurement())
}

pub fn measurement_to_box(z: &Measurement) -> Result<BoundingBox, KalmanError> {
    let (u, v, s, r) = (z[0], z[1], z[2], z[3]);
    if !(s > 0.0 && r > 0.0) {
        return Err(KalmanError::NonPositiveState {
            scale: s,
            aspect: r,
        });
    }
    let w = (s * r).sqrt();
    let h = s / w;
    Ok(BoundingBox::new(
        u - 0.5 * w,
        v - 0.5 * h,
        u + 0.5 * w,
        v + 0.5 * h,
    ))
}
