//! Guidance-weight schedules.
//!
//! Timestep convention: `t = T` is pure noise (the first denoising step) and
//! `t = 0` is the final data sample. A scheduler is "increasing" when its
//! weight grows as `t` walks from `T` down to `0`.
//!
//! The weight `ω` is the difference coefficient of the guided prediction
//! `ε̂ = ε_c + ω(ε_c − ε_u)`. Pipelines that use the scale `g` in
//! `ε̂ = ε_u + g(ε_c − ε_u)` convert with [`omega_from_pipeline_scale`].

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("timestep {t} outside [0, {horizon}]")]
    Domain { t: f64, horizon: u32 },
    #[error("shape `{0}` has no heuristic raw curve")]
    UnsupportedShape(&'static str),
    #[error("invalid schedule parameter: {0}")]
    InvalidParam(String),
}

/// Half-open timestep range `[start, end)`. A range whose `end` equals the
/// horizon also covers `t = T`, so a partition of `[0, T]` into ranges leaves
/// no timestep uncovered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroInterval {
    pub start: f64,
    pub end: f64,
}

impl ZeroInterval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    fn contains(&self, t: f64, horizon: f64) -> bool {
        self.start <= t && (t < self.end || (self.end == horizon && t == horizon))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleShape {
    Static,
    Linear,
    InvLinear,
    Cosine,
    Sine,
    /// `invlinear` below `T/2`, `linear` above. The name follows the usual
    /// naming of this scheduler even though, plotted against `t`, the curve
    /// peaks in the middle.
    VShape,
    LambdaShape,
    PowerCosine {
        s: f64,
    },
    ClampLinear {
        c: f64,
    },
    ClampCosine {
        c: f64,
    },
    PiecewiseZero {
        base: Box<ScheduleShape>,
        intervals: Vec<ZeroInterval>,
    },
}

/// Serializable tag for the non-composite shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Static,
    Linear,
    Invlinear,
    Cosine,
    Sine,
    Vshape,
    Lambda,
    Pcs,
    ClampLinear,
    ClampCosine,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 10] = [
        ShapeKind::Static,
        ShapeKind::Linear,
        ShapeKind::Invlinear,
        ShapeKind::Cosine,
        ShapeKind::Sine,
        ShapeKind::Vshape,
        ShapeKind::Lambda,
        ShapeKind::Pcs,
        ShapeKind::ClampLinear,
        ShapeKind::ClampCosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Static => "static",
            ShapeKind::Linear => "linear",
            ShapeKind::Invlinear => "invlinear",
            ShapeKind::Cosine => "cosine",
            ShapeKind::Sine => "sine",
            ShapeKind::Vshape => "vshape",
            ShapeKind::Lambda => "lambda",
            ShapeKind::Pcs => "pcs",
            ShapeKind::ClampLinear => "clamp-linear",
            ShapeKind::ClampCosine => "clamp-cosine",
        }
    }

    pub fn parse(name: &str) -> Option<ShapeKind> {
        ShapeKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn takes_param(self) -> bool {
        matches!(
            self,
            ShapeKind::Pcs | ShapeKind::ClampLinear | ShapeKind::ClampCosine
        )
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl ScheduleShape {
    /// Builds a shape from its tag and optional parameter (`s` for pcs, `c`
    /// for the clamps).
    pub fn from_kind(kind: ShapeKind, param: Option<f64>) -> Result<Self, SchedError> {
        let need = |p: Option<f64>| {
            p.ok_or_else(|| SchedError::InvalidParam(format!("shape `{kind}` needs a parameter")))
        };
        if !kind.takes_param() && param.is_some() {
            return Err(SchedError::InvalidParam(format!(
                "shape `{kind}` takes no parameter"
            )));
        }
        let shape = match kind {
            ShapeKind::Static => ScheduleShape::Static,
            ShapeKind::Linear => ScheduleShape::Linear,
            ShapeKind::Invlinear => ScheduleShape::InvLinear,
            ShapeKind::Cosine => ScheduleShape::Cosine,
            ShapeKind::Sine => ScheduleShape::Sine,
            ShapeKind::Vshape => ScheduleShape::VShape,
            ShapeKind::Lambda => ScheduleShape::LambdaShape,
            ShapeKind::Pcs => ScheduleShape::PowerCosine { s: need(param)? },
            ShapeKind::ClampLinear => ScheduleShape::ClampLinear { c: need(param)? },
            ShapeKind::ClampCosine => ScheduleShape::ClampCosine { c: need(param)? },
        };
        Ok(shape)
    }

    pub fn kind(&self) -> ShapeKind {
        match self {
            ScheduleShape::Static => ShapeKind::Static,
            ScheduleShape::Linear => ShapeKind::Linear,
            ScheduleShape::InvLinear => ShapeKind::Invlinear,
            ScheduleShape::Cosine => ShapeKind::Cosine,
            ScheduleShape::Sine => ShapeKind::Sine,
            ScheduleShape::VShape => ShapeKind::Vshape,
            ScheduleShape::LambdaShape => ShapeKind::Lambda,
            ScheduleShape::PowerCosine { .. } => ShapeKind::Pcs,
            ScheduleShape::ClampLinear { .. } => ShapeKind::ClampLinear,
            ScheduleShape::ClampCosine { .. } => ShapeKind::ClampCosine,
            ScheduleShape::PiecewiseZero { base, .. } => base.kind(),
        }
    }

    pub fn param(&self) -> Option<f64> {
        match self {
            ScheduleShape::PowerCosine { s } => Some(*s),
            ScheduleShape::ClampLinear { c } | ScheduleShape::ClampCosine { c } => Some(*c),
            ScheduleShape::PiecewiseZero { base, .. } => base.param(),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ScheduleShape::PiecewiseZero { .. } => "piecewise-zero",
            other => other.kind().name(),
        }
    }

    fn is_heuristic(&self) -> bool {
        matches!(
            self,
            ScheduleShape::Static
                | ScheduleShape::Linear
                | ScheduleShape::InvLinear
                | ScheduleShape::Cosine
                | ScheduleShape::Sine
                | ScheduleShape::VShape
                | ScheduleShape::LambdaShape
        )
    }

    fn validate(&self, horizon: u32) -> Result<(), SchedError> {
        match self {
            ScheduleShape::PowerCosine { s } if !(*s > 0.0 && s.is_finite()) => Err(
                SchedError::InvalidParam(format!("pcs power must be positive, got {s}")),
            ),
            ScheduleShape::ClampLinear { c } | ScheduleShape::ClampCosine { c }
                if !(*c >= 0.0 && c.is_finite()) =>
            {
                Err(SchedError::InvalidParam(format!(
                    "clamp floor must be nonnegative, got {c}"
                )))
            }
            ScheduleShape::PiecewiseZero { base, intervals } => {
                if matches!(**base, ScheduleShape::PiecewiseZero { .. }) {
                    return Err(SchedError::InvalidParam(
                        "piecewise-zero base cannot itself be piecewise-zero".into(),
                    ));
                }
                base.validate(horizon)?;
                let t_max = f64::from(horizon);
                let mut sorted = intervals.clone();
                sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
                for iv in &sorted {
                    if !(0.0 <= iv.start && iv.start < iv.end && iv.end <= t_max) {
                        return Err(SchedError::InvalidParam(format!(
                            "interval [{}, {}) not inside [0, {horizon}]",
                            iv.start, iv.end
                        )));
                    }
                }
                for pair in sorted.windows(2) {
                    if pair[1].start < pair[0].end {
                        return Err(SchedError::InvalidParam(format!(
                            "intervals [{}, {}) and [{}, {}) overlap",
                            pair[0].start, pair[0].end, pair[1].start, pair[1].end
                        )));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn check_t(t: f64, horizon: u32) -> Result<(), SchedError> {
    if (0.0..=f64::from(horizon)).contains(&t) {
        Ok(())
    } else {
        Err(SchedError::Domain { t, horizon })
    }
}

/// Unnormalized curve `u(t)` of a heuristic shape.
pub fn raw_shape(shape: &ScheduleShape, t: f64, horizon: u32) -> Result<f64, SchedError> {
    check_t(t, horizon)?;
    let tt = f64::from(horizon);
    let linear = 1.0 - t / tt;
    let invlinear = t / tt;
    let u = match shape {
        ScheduleShape::Static => 1.0,
        ScheduleShape::Linear => linear,
        ScheduleShape::InvLinear => invlinear,
        ScheduleShape::Cosine => (PI * t / tt).cos() + 1.0,
        ScheduleShape::Sine => (PI * t / tt - PI / 2.0).sin() + 1.0,
        ScheduleShape::VShape => {
            if t < tt / 2.0 {
                invlinear
            } else {
                linear
            }
        }
        ScheduleShape::LambdaShape => {
            if t < tt / 2.0 {
                linear
            } else {
                invlinear
            }
        }
        other => return Err(SchedError::UnsupportedShape(other.name())),
    };
    Ok(u)
}

/// Constant `Z` with `(1/T)∫₀ᵀ Z·u(t) dt = 1`.
pub fn norm_constant(shape: &ScheduleShape) -> Result<f64, SchedError> {
    match shape {
        ScheduleShape::Static => Ok(1.0),
        ScheduleShape::Linear | ScheduleShape::InvLinear => Ok(2.0),
        ScheduleShape::Cosine | ScheduleShape::Sine => Ok(1.0),
        ScheduleShape::VShape => Ok(4.0),
        ScheduleShape::LambdaShape => Ok(4.0 / 3.0),
        other => Err(SchedError::UnsupportedShape(other.name())),
    }
}

/// Maps a pipeline-style guidance scale `g` (where `g = 1` means no guidance)
/// to the difference coefficient used throughout this crate.
pub fn omega_from_pipeline_scale(g: f64) -> f64 {
    g - 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSchedule {
    shape: ScheduleShape,
    total_weight: f64,
    horizon: u32,
}

impl GuidanceSchedule {
    pub fn new(shape: ScheduleShape, total_weight: f64, horizon: u32) -> Result<Self, SchedError> {
        if !(total_weight >= 0.0 && total_weight.is_finite()) {
            return Err(SchedError::InvalidParam(format!(
                "total weight must be finite and nonnegative, got {total_weight}"
            )));
        }
        if horizon == 0 {
            return Err(SchedError::InvalidParam("horizon must be positive".into()));
        }
        shape.validate(horizon)?;
        Ok(Self {
            shape,
            total_weight,
            horizon,
        })
    }

    pub fn constant(total_weight: f64, horizon: u32) -> Result<Self, SchedError> {
        Self::new(ScheduleShape::Static, total_weight, horizon)
    }

    pub fn shape(&self) -> &ScheduleShape {
        &self.shape
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    /// Guidance weight `ω(t)` for real `t ∈ [0, T]`.
    pub fn weight_at(&self, t: f64) -> Result<f64, SchedError> {
        check_t(t, self.horizon)?;
        Ok(shape_weight(
            &self.shape,
            self.total_weight,
            t,
            self.horizon,
        ))
    }

    pub fn discrete_weights(&self, timesteps: &[u32]) -> Result<Vec<f64>, SchedError> {
        timesteps
            .iter()
            .map(|&t| self.weight_at(f64::from(t)))
            .collect()
    }

    /// Relative deviation of the schedule's time-average from `ω`, by
    /// composite Simpson quadrature on `points` nodes (odd, ≥ 3).
    pub fn area_check(&self, points: usize) -> Result<f64, SchedError> {
        if points < 3 || points.is_multiple_of(2) {
            return Err(SchedError::InvalidParam(format!(
                "simpson quadrature needs an odd node count ≥ 3, got {points}"
            )));
        }
        let tt = f64::from(self.horizon);
        let intervals = points - 1;
        let h = tt / intervals as f64;
        let mut acc = 0.0;
        for i in 0..points {
            // last node pinned to T so rounding in i*h cannot leave the domain
            let t = if i == intervals { tt } else { i as f64 * h };
            let w = shape_weight(&self.shape, self.total_weight, t, self.horizon);
            let coef = if i == 0 || i == intervals {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += coef * w;
        }
        let mean = acc * h / 3.0 / tt;
        Ok((mean - self.total_weight).abs() / self.total_weight.max(f64::EPSILON))
    }
}

fn shape_weight(shape: &ScheduleShape, omega: f64, t: f64, horizon: u32) -> f64 {
    let tt = f64::from(horizon);
    match shape {
        ScheduleShape::PowerCosine { s } => {
            omega * (1.0 - (PI * ((tt - t) / tt).powf(*s)).cos()) / 2.0
        }
        ScheduleShape::ClampLinear { c } => {
            c.max(shape_weight(&ScheduleShape::Linear, omega, t, horizon))
        }
        ScheduleShape::ClampCosine { c } => {
            c.max(shape_weight(&ScheduleShape::Cosine, omega, t, horizon))
        }
        ScheduleShape::PiecewiseZero { base, intervals } => {
            if intervals.iter().any(|iv| iv.contains(t, tt)) {
                0.0
            } else {
                shape_weight(base, omega, t, horizon)
            }
        }
        heuristic => {
            debug_assert!(heuristic.is_heuristic());
            let z = norm_constant(heuristic).expect("heuristic shape");
            let u = raw_shape(heuristic, t, horizon).expect("t checked by caller");
            z * omega * u
        }
    }
}
