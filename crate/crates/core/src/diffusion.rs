//! Forward noising, the guided noise combination, and DDPM/DDIM samplers.
//!
//! `γ(t)` is the cumulative signal fraction: `x_t = √γ(t)·x_0 + √(1−γ(t))·ε`,
//! with `γ(0) = 1` (clean) and `γ(T) ≈ 0` (pure noise).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{fill_normal, LabRng};
use crate::sched::{GuidanceSchedule, SchedError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: expected length {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("timestep {t} outside the valid range for this operation")]
    Domain { t: u32 },
    #[error("γ({t}) = 0 at a noisy timestep; cannot invert the forward process")]
    NumericalDomain { t: u32 },
    #[error("sampler diverged at timestep {t}: non-finite state")]
    Divergence { t: u32 },
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Sched(#[from] SchedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    LinearBeta,
    CosineAlpha,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    horizon: u32,
    gamma: Vec<f64>,
}

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    pub fn new(kind: NoiseKind, horizon: u32) -> Result<Self, DiffusionError> {
        if horizon < 10 {
            return Err(DiffusionError::Config(format!(
                "noise schedule horizon must be ≥ 10, got {horizon}"
            )));
        }
        let n = horizon as usize;
        let betas: Vec<f64> = match kind {
            NoiseKind::LinearBeta => (0..n)
                .map(|i| {
                    LINEAR_BETA_START
                        + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (n - 1) as f64
                })
                .collect(),
            NoiseKind::CosineAlpha => {
                let f = |t: f64| {
                    ((t / n as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0)
                        .cos()
                        .powi(2)
                };
                (1..=n)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(COSINE_MAX_BETA))
                    .collect()
            }
        };
        let mut gamma = Vec::with_capacity(n + 1);
        gamma.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            gamma.push(acc);
        }
        Ok(Self { horizon, gamma })
    }

    /// Builds a schedule from an explicit `γ(0..=T)` table.
    pub fn from_gamma(gamma: Vec<f64>) -> Result<Self, DiffusionError> {
        if gamma.len() < 2 {
            return Err(DiffusionError::Config(
                "γ table needs at least two entries".into(),
            ));
        }
        if gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(DiffusionError::Config("γ values must lie in [0, 1]".into()));
        }
        if gamma.windows(2).any(|w| w[1] >= w[0]) {
            return Err(DiffusionError::Config(
                "γ must be strictly decreasing".into(),
            ));
        }
        Ok(Self {
            horizon: (gamma.len() - 1) as u32,
            gamma,
        })
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn gamma(&self, t: u32) -> f64 {
        self.gamma[t as usize]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    /// Per-step `β_t = 1 − γ(t)/γ(t−1)`, `t ≥ 1`.
    pub fn beta(&self, t: u32) -> f64 {
        1.0 - self.gamma[t as usize] / self.gamma[t as usize - 1]
    }

    fn check_t(&self, t: u32) -> Result<(), DiffusionError> {
        if t <= self.horizon {
            Ok(())
        } else {
            Err(DiffusionError::Domain { t })
        }
    }
}

fn check_len(expected: usize, actual: usize) -> Result<(), DiffusionError> {
    if expected == actual {
        Ok(())
    } else {
        Err(DiffusionError::Shape { expected, actual })
    }
}

pub fn forward_diffuse(
    x0: &[f64],
    t: u32,
    eps: &[f64],
    ns: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    check_len(x0.len(), eps.len())?;
    ns.check_t(t)?;
    let g = ns.gamma(t);
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// `ε_c + w·(ε_c − ε_u)`.
pub fn cfg_combine(eps_c: &[f64], eps_u: &[f64], w: f64) -> Result<Vec<f64>, DiffusionError> {
    check_len(eps_c.len(), eps_u.len())?;
    Ok(eps_c
        .iter()
        .zip(eps_u)
        .map(|(c, u)| c + w * (c - u))
        .collect())
}

/// Clean-sample estimate `(x_t − √(1−γ)·ε̂)/√γ`, optionally clipped to
/// `[−clip, clip]`.
pub fn predict_x0(
    x_t: &[f64],
    eps_hat: &[f64],
    t: u32,
    ns: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Vec<f64>, DiffusionError> {
    check_len(x_t.len(), eps_hat.len())?;
    ns.check_t(t)?;
    let g = ns.gamma(t);
    if g <= 0.0 {
        return Err(DiffusionError::NumericalDomain { t });
    }
    let (sg, sn) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0 = (x - sn * e) / sg;
            match clip {
                Some(c) => x0.clamp(-c, c),
                None => x0,
            }
        })
        .collect())
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`. When clipping
/// is on, the noise direction is re-derived from the clipped `x̂0` so the
/// re-projected state stays consistent with it.
pub fn ddim_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: u32,
    t_prev: u32,
    ns: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Vec<f64>, DiffusionError> {
    if t_prev > t {
        return Err(DiffusionError::Domain { t: t_prev });
    }
    let x0 = predict_x0(x_t, eps_hat, t, ns, clip)?;
    let gp = ns.gamma(t_prev);
    let (a, b) = (gp.sqrt(), (1.0 - gp).sqrt());
    if clip.is_none() {
        return Ok(x0.iter().zip(eps_hat).map(|(x, e)| a * x + b * e).collect());
    }
    let g = ns.gamma(t);
    let (sg, sn) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(x0
        .iter()
        .zip(eps_hat)
        .zip(x_t)
        .map(|((x, e), xt)| {
            let e = if sn > 0.0 { (xt - sg * x) / sn } else { *e };
            a * x + b * e
        })
        .collect())
}

/// Mean of the DDPM posterior `q(x_{t−1} | x_t, x̂_0)`.
pub fn ddpm_posterior_mean(
    x_t: &[f64],
    eps_hat: &[f64],
    t: u32,
    ns: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Vec<f64>, DiffusionError> {
    if t == 0 {
        return Err(DiffusionError::Domain { t });
    }
    let x0 = predict_x0(x_t, eps_hat, t, ns, clip)?;
    let (g, gp, beta) = (ns.gamma(t), ns.gamma(t - 1), ns.beta(t));
    let c0 = gp.sqrt() * beta / (1.0 - g);
    let ct = (1.0 - beta).sqrt() * (1.0 - gp) / (1.0 - g);
    Ok(x0.iter().zip(x_t).map(|(a, x)| c0 * a + ct * x).collect())
}

/// Posterior standard deviation `√β̃_t`, with `β̃_t = β_t(1−γ(t−1))/(1−γ(t))`.
pub fn ddpm_sigma(t: u32, ns: &NoiseSchedule) -> f64 {
    let (g, gp, beta) = (ns.gamma(t), ns.gamma(t - 1), ns.beta(t));
    (beta * (1.0 - gp) / (1.0 - g)).sqrt()
}

/// Ancestral DDPM update from `t` to `t − 1`; no noise is injected at `t = 1`.
pub fn ddpm_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: u32,
    ns: &NoiseSchedule,
    clip: Option<f64>,
    rng: &mut LabRng,
) -> Result<Vec<f64>, DiffusionError> {
    let mut mean = ddpm_posterior_mean(x_t, eps_hat, t, ns, clip)?;
    if t > 1 {
        let sigma = ddpm_sigma(t, ns);
        let mut z = vec![0.0; mean.len()];
        fill_normal(rng, &mut z);
        for (m, zi) in mean.iter_mut().zip(&z) {
            *m += sigma * zi;
        }
    }
    Ok(mean)
}

/// Class label or the null token used for the unconditional branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Class(usize),
    Null,
}

/// Batched noise predictor `ε_θ(x_t, t, c)`. `x` holds `conds.len()` rows of
/// length [`NoisePredictor::dim`]; all rows share the timestep.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;
    fn predict(&self, x: &[f64], t: u32, conds: &[Condition]) -> Result<Vec<f64>, DiffusionError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// DDIM step count; ignored by DDPM, which visits every timestep.
    pub steps: u32,
    /// Clip for the predicted clean sample; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self::ddim(50)
    }
}

impl SamplerSpec {
    pub fn ddim(steps: u32) -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps,
            clip: Some(3.0),
        }
    }

    pub fn ddpm() -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            steps: 0,
            clip: Some(3.0),
        }
    }
}

/// Timesteps visited from `T` down to `0`, both included. DDIM uses a
/// uniform stride rounded to the nearest integer.
pub fn visit_timesteps(sampler: &SamplerSpec, horizon: u32) -> Result<Vec<u32>, DiffusionError> {
    match sampler.kind {
        SamplerKind::Ddpm => Ok((0..=horizon).rev().collect()),
        SamplerKind::Ddim => {
            let steps = sampler.steps;
            if steps == 0 || steps > horizon {
                return Err(DiffusionError::Config(format!(
                    "ddim steps must be in 1..={horizon}, got {steps}"
                )));
            }
            let (tt, n) = (u64::from(horizon), u64::from(steps));
            Ok((0..=n)
                .map(|i| ((tt * (n - i) + n / 2) / n) as u32)
                .collect())
        }
    }
}

/// States from `t = T` to `t = 0`; the first entry is the initial noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(u32, Vec<f64>)>,
}

impl Trajectory {
    pub fn timesteps(&self) -> Vec<u32> {
        self.states.iter().map(|(t, _)| *t).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Final samples, one row per condition.
    pub samples: Vec<Vec<f64>>,
    pub trajectories: Option<Vec<Trajectory>>,
}

/// Guided sampling of a batch. Row `i` draws all of its randomness from
/// `rngs[i]` (initial noise first, then one draw per stochastic step), so the
/// result for a row does not depend on how rows are batched.
pub fn sample_batch<M: NoisePredictor + ?Sized>(
    model: &M,
    conds: &[Condition],
    sched: &GuidanceSchedule,
    sampler: &SamplerSpec,
    ns: &NoiseSchedule,
    rngs: &mut [LabRng],
    record: bool,
) -> Result<SampleOutput, DiffusionError> {
    let n = conds.len();
    check_len(n, rngs.len())?;
    if sched.horizon() != ns.horizon() {
        return Err(DiffusionError::Config(format!(
            "guidance horizon {} differs from noise horizon {}",
            sched.horizon(),
            ns.horizon()
        )));
    }
    let d = model.dim();
    let visits = visit_timesteps(sampler, ns.horizon())?;

    let mut x = vec![0.0; n * d];
    for (row, rng) in x.chunks_mut(d).zip(rngs.iter_mut()) {
        fill_normal(rng, row);
    }
    let mut trajectories: Option<Vec<Trajectory>> = record.then(|| {
        x.chunks(d)
            .map(|row| Trajectory {
                states: vec![(visits[0], row.to_vec())],
            })
            .collect()
    });
    let null_conds = vec![Condition::Null; n];

    for pair in visits.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let w = sched.weight_at(f64::from(t))?;
        let eps_c = model.predict(&x, t, conds)?;
        check_len(n * d, eps_c.len())?;
        let eps_hat = if w == 0.0 {
            eps_c
        } else {
            let eps_u = model.predict(&x, t, &null_conds)?;
            cfg_combine(&eps_c, &eps_u, w)?
        };
        let mut next = Vec::with_capacity(n * d);
        for (i, rng) in rngs.iter_mut().enumerate() {
            let xs = &x[i * d..(i + 1) * d];
            let es = &eps_hat[i * d..(i + 1) * d];
            let row = match sampler.kind {
                SamplerKind::Ddim => ddim_step(xs, es, t, t_prev, ns, sampler.clip)?,
                SamplerKind::Ddpm => ddpm_step(xs, es, t, ns, sampler.clip, rng)?,
            };
            next.extend(row);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::Divergence { t: t_prev });
        }
        x = next;
        if let Some(trajs) = trajectories.as_mut() {
            for (traj, row) in trajs.iter_mut().zip(x.chunks(d)) {
                traj.states.push((t_prev, row.to_vec()));
            }
        }
    }

    Ok(SampleOutput {
        samples: x.chunks(d).map(<[f64]>::to_vec).collect(),
        trajectories,
    })
}

/// Single-sample convenience wrapper over [`sample_batch`].
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    cond: Condition,
    sched: &GuidanceSchedule,
    sampler: &SamplerSpec,
    ns: &NoiseSchedule,
    rng: &mut LabRng,
    record: bool,
) -> Result<(Vec<f64>, Option<Trajectory>), DiffusionError> {
    let mut rngs = [rng.clone()];
    let out = sample_batch(model, &[cond], sched, sampler, ns, &mut rngs, record)?;
    *rng = rngs[0].clone();
    let x = out.samples.into_iter().next().expect("one row");
    Ok((x, out.trajectories.map(|mut t| t.remove(0))))
}
