//! Conditional MLP noise predictor, trained with the simple ε-prediction
//! objective, condition dropout and Adam.

mod adam;
mod io;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use io::{load_params, read_params, save_params, write_params, FormatError};
pub use tensor::{ShapeError, Tensor};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{Condition, DiffusionError, NoisePredictor, NoiseSchedule};
use crate::rng::{fill_normal, seeded, LabRng};
use tensor::gemm;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Sinusoidal timestep embedding: `[sin(t·f₀), cos(t·f₀), sin(t·f₁), …]`
/// with frequencies spaced geometrically from `1` down to `10⁻⁴`.
pub fn time_embedding(t: u32, dim: usize) -> Result<Vec<f64>, NnError> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(NnError::Config(format!(
            "time embedding dim must be even and ≥ 2, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    write_time_embedding(t, dim, &mut out);
    Ok(out)
}

fn write_time_embedding(t: u32, dim: usize, out: &mut Vec<f64>) {
    let half = dim / 2;
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10_000f64.powf(-(i as f64) / (half - 1) as f64)
        };
        let arg = f64::from(t) * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub class_dim: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            hidden: vec![128, 128],
            time_dim: 32,
            class_dim: 16,
            classes,
        }
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.dim == 0 || self.classes == 0 || self.class_dim == 0 {
            return Err(NnError::Config(
                "dim, classes and class_dim must be positive".into(),
            ));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(NnError::Config(format!(
                "time_dim must be even and ≥ 2, got {}",
                self.time_dim
            )));
        }
        if self.hidden.contains(&0) {
            return Err(NnError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.dim + self.time_dim + self.class_dim
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden);
        widths.push(self.dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name, value, grad }
    }
}

/// `ε_θ(x_t, t, c)`: an MLP over `[x, time_embedding(t), class_embedding(c)]`
/// with SiLU between layers. The class table has `classes + 1` rows; the
/// last row is the null token.
///
/// A skip term `g(t)·x` is added to the MLP output, with the gain
/// `g(t) = gate_w · time_embedding(t) + gate_b` linear in the time
/// embedding. Narrow hidden layers cannot carry the near-identity map from
/// `x_t` to `ε`; the skip can. Because `g` ignores the condition it
/// cancels in `ε_c − ε_u`.
///
/// Parameter order: `w0, b0, w1, b1, …, gate_w, gate_b, class_embedding`.
/// Weight `wℓ` is stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: Architecture,
    params: Vec<Param>,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Activations kept for the backward pass.
struct ForwardCache {
    /// Layer inputs, `inputs[0]` being the assembled network input.
    inputs: Vec<Tensor>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Tensor>,
}

impl Denoiser {
    /// Fresh model with uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)`
    /// for weights and biases, and `U(−1, 1)` for the class table.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut rng = seeded(seed);
        let mut params = Vec::new();
        for (l, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Param::new(
                format!("w{l}"),
                Tensor::from_vec(&[fan_in, fan_out], w).expect("sized"),
            ));
            params.push(Param::new(
                format!("b{l}"),
                Tensor::from_vec(&[fan_out], b).expect("sized"),
            ));
        }
        let gate_w = (0..arch.time_dim)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        params.push(Param::new(
            "gate_w".into(),
            Tensor::from_vec(&[arch.time_dim], gate_w).expect("sized"),
        ));
        params.push(Param::new(
            "gate_b".into(),
            Tensor::from_vec(&[1], vec![1.0]).expect("sized"),
        ));
        let rows = arch.classes + 1;
        let emb = (0..rows * arch.class_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        params.push(Param::new(
            "class_embedding".into(),
            Tensor::from_vec(&[rows, arch.class_dim], emb).expect("sized"),
        ));
        Ok(Self { arch, params })
    }

    pub(crate) fn from_parts(arch: Architecture, values: Vec<Tensor>) -> Self {
        let names = Self::param_names(&arch);
        let params = names
            .into_iter()
            .zip(values)
            .map(|(n, v)| Param::new(n, v))
            .collect();
        Self { arch, params }
    }

    pub(crate) fn param_shapes(arch: &Architecture) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for (fan_in, fan_out) in arch.layer_dims() {
            shapes.push(vec![fan_in, fan_out]);
            shapes.push(vec![fan_out]);
        }
        shapes.push(vec![arch.time_dim]);
        shapes.push(vec![1]);
        shapes.push(vec![arch.classes + 1, arch.class_dim]);
        shapes
    }

    fn param_names(arch: &Architecture) -> Vec<String> {
        let layers = arch.layer_dims().len();
        let mut names: Vec<String> = (0..layers)
            .flat_map(|l| [format!("w{l}"), format!("b{l}")])
            .collect();
        names.extend(["gate_w".into(), "gate_b".into(), "class_embedding".into()]);
        names
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn class_embedding(&self) -> &Tensor {
        &self.params.last().expect("class table").value
    }

    /// Row of the class table used for `cond`; the null token is row `classes`.
    pub fn embedding_row(&self, cond: Condition) -> Result<usize, NnError> {
        match cond {
            Condition::Null => Ok(self.arch.classes),
            Condition::Class(k) if k < self.arch.classes => Ok(k),
            Condition::Class(k) => Err(NnError::Input(format!(
                "unknown class id {k} (model has {} classes)",
                self.arch.classes
            ))),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    fn layer_count(&self) -> usize {
        (self.params.len() - 3) / 2
    }

    fn gate_index(&self) -> usize {
        self.params.len() - 3
    }

    /// Skip gain `g(t)` for every row of an assembled input.
    fn gains(&self, input: &Tensor) -> Vec<f64> {
        let (d, td) = (self.arch.dim, self.arch.time_dim);
        let gw = self.params[self.gate_index()].value.data();
        let gb = self.params[self.gate_index() + 1].value.data()[0];
        (0..input.rows())
            .map(|i| {
                let te = &input.row(i)[d..d + td];
                gb + gw.iter().zip(te).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    fn assemble_input(
        &self,
        x: &[f64],
        ts: &[u32],
        conds: &[Condition],
    ) -> Result<Tensor, NnError> {
        let d = self.arch.dim;
        let n = conds.len();
        if x.len() != n * d || ts.len() != n {
            return Err(NnError::Input(format!(
                "expected {n} rows of dim {d}, got {} values and {} timesteps",
                x.len(),
                ts.len()
            )));
        }
        let emb = self.class_embedding();
        let mut data = Vec::with_capacity(n * self.arch.input_width());
        let mut cached: Option<(u32, Vec<f64>)> = None;
        for ((row, &t), &c) in x.chunks(d).zip(ts).zip(conds) {
            let erow = self.embedding_row(c)?;
            data.extend_from_slice(row);
            match &cached {
                Some((ct, te)) if *ct == t => data.extend_from_slice(te),
                _ => {
                    let mut te = Vec::with_capacity(self.arch.time_dim);
                    write_time_embedding(t, self.arch.time_dim, &mut te);
                    data.extend_from_slice(&te);
                    cached = Some((t, te));
                }
            }
            data.extend_from_slice(emb.row(erow));
        }
        Ok(Tensor::from_vec(&[n, self.arch.input_width()], data).expect("sized"))
    }

    fn run(&self, input: Tensor, keep: bool) -> (Tensor, Option<ForwardCache>) {
        let layers = self.layer_count();
        let n = input.rows();
        let mut cache = keep.then(|| ForwardCache {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers.saturating_sub(1)),
        });
        let mut h = input;
        for l in 0..layers {
            let w = &self.params[2 * l].value;
            let b = &self.params[2 * l + 1].value;
            let out_w = w.cols();
            let mut z = Tensor::zeros(&[n, out_w]);
            for i in 0..n {
                z.row_mut(i).copy_from_slice(b.data());
            }
            gemm(&h, false, w, false, 1.0, &mut z);
            let last = l + 1 == layers;
            let next = if last {
                z.clone()
            } else {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = silu(*v));
                a
            };
            if let Some(c) = cache.as_mut() {
                c.inputs.push(h);
                if !last {
                    c.pre.push(z);
                }
            }
            h = next;
        }
        (h, cache)
    }

    /// Batched forward pass: `x` holds one row of length `dim` per entry of
    /// `ts`/`conds`.
    pub fn forward_batch(
        &self,
        x: &[f64],
        ts: &[u32],
        conds: &[Condition],
    ) -> Result<Vec<f64>, NnError> {
        let input = self.assemble_input(x, ts, conds)?;
        let gains = self.gains(&input);
        let (y, _) = self.run(input, false);
        Ok(skip(y.into_vec(), x, &gains))
    }

    pub fn forward(&self, x: &[f64], t: u32, cond: Condition) -> Result<Vec<f64>, NnError> {
        self.forward_batch(x, &[t], &[cond])
    }

    /// Accumulates `∂loss/∂θ` into the gradient slots given `∂loss/∂output`.
    fn backward(&mut self, cache: ForwardCache, conds: &[Condition], mut delta: Tensor) {
        let layers = self.layer_count();
        let n = delta.rows();
        for l in (0..layers).rev() {
            let input = &cache.inputs[l];
            gemm(
                input,
                true,
                &delta,
                false,
                1.0,
                &mut self.params[2 * l].grad,
            );
            let gb = self.params[2 * l + 1].grad.data_mut();
            for i in 0..n {
                for (g, d) in gb.iter_mut().zip(delta.row(i)) {
                    *g += d;
                }
            }
            let w = &self.params[2 * l].value;
            let mut dh = Tensor::zeros(&[n, w.rows()]);
            gemm(&delta, false, w, true, 0.0, &mut dh);
            if l > 0 {
                let pre = &cache.pre[l - 1];
                for (g, z) in dh.data_mut().iter_mut().zip(pre.data()) {
                    *g *= silu_grad(*z);
                }
            }
            delta = dh;
        }
        let off = self.arch.dim + self.arch.time_dim;
        let cd = self.arch.class_dim;
        let rows: Vec<usize> = conds
            .iter()
            .map(|&c| self.embedding_row(c).expect("validated in forward"))
            .collect();
        let table = &mut self.params.last_mut().expect("class table").grad;
        for (i, r) in rows.into_iter().enumerate() {
            let src = &delta.row(i)[off..off + cd];
            for (g, d) in table.row_mut(r).iter_mut().zip(src) {
                *g += d;
            }
        }
    }

    /// Mean over the batch of `‖ε_θ(x_t, t, c) − ε‖²/d`.
    pub fn loss(&self, batch: &LossBatch) -> Result<f64, NnError> {
        let pred = self.forward_batch(&batch.x_t, &batch.t, &batch.conds)?;
        Ok(mse(&pred, &batch.eps, batch.len(), self.arch.dim))
    }

    /// Loss on `batch`; gradients are accumulated into the slots.
    pub fn loss_and_grads_on(&mut self, batch: &LossBatch) -> Result<f64, NnError> {
        if batch.is_empty() {
            return Err(NnError::Input("empty batch".into()));
        }
        let input = self.assemble_input(&batch.x_t, &batch.t, &batch.conds)?;
        let gains = self.gains(&input);
        let (y, cache) = self.run(input, true);
        let cache = cache.expect("kept");
        let pred = skip(y.into_vec(), &batch.x_t, &gains);
        let n = batch.len();
        let (d, td) = (self.arch.dim, self.arch.time_dim);
        let loss = mse(&pred, &batch.eps, n, d);
        let scale = 2.0 / (n * d) as f64;
        let delta: Vec<f64> = pred
            .iter()
            .zip(&batch.eps)
            .map(|(p, e)| scale * (p - e))
            .collect();
        let gi = self.gate_index();
        for (i, (dr, xr)) in delta.chunks(d).zip(batch.x_t.chunks(d)).enumerate() {
            let dg: f64 = dr.iter().zip(xr).map(|(a, b)| a * b).sum();
            let te = &cache.inputs[0].row(i)[d..d + td];
            for (g, t) in self.params[gi].grad.data_mut().iter_mut().zip(te) {
                *g += dg * t;
            }
            self.params[gi + 1].grad.data_mut()[0] += dg;
        }
        let delta = Tensor::from_vec(&[n, d], delta).expect("sized");
        self.backward(cache, &batch.conds, delta);
        Ok(loss)
    }

    /// Draws timesteps, noise and condition dropout for `items`, then
    /// returns the batch-mean loss with gradients accumulated.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &mut self,
        items: &[(&[f64], usize)],
        ns: &NoiseSchedule,
        p_uncond: f64,
        rng: &mut R,
    ) -> Result<f64, NnError> {
        let batch = LossBatch::draw(items, ns, p_uncond, rng)?;
        self.loss_and_grads_on(&batch)
    }
}

fn skip(mut y: Vec<f64>, x: &[f64], gains: &[f64]) -> Vec<f64> {
    let d = x.len() / gains.len().max(1);
    for ((yr, xr), g) in y.chunks_mut(d.max(1)).zip(x.chunks(d.max(1))).zip(gains) {
        for (a, b) in yr.iter_mut().zip(xr) {
            *a += g * b;
        }
    }
    y
}

fn mse(pred: &[f64], target: &[f64], n: usize, d: usize) -> f64 {
    let sq: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, e)| (p - e) * (p - e))
        .sum();
    sq / (n * d) as f64
}

impl NoisePredictor for Denoiser {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn predict(&self, x: &[f64], t: u32, conds: &[Condition]) -> Result<Vec<f64>, DiffusionError> {
        let ts = vec![t; conds.len()];
        self.forward_batch(x, &ts, conds)
            .map_err(|e| DiffusionError::Model(e.to_string()))
    }
}

/// A fully drawn training batch: noisy inputs, timesteps, (possibly
/// dropped) conditions and the target noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub x_t: Vec<f64>,
    pub t: Vec<u32>,
    pub conds: Vec<Condition>,
    pub eps: Vec<f64>,
}

impl LossBatch {
    /// Per item: `t ~ U{1..T}`, `ε ~ N(0, I)`, label replaced by the null
    /// token with probability `p_uncond`, then `x_t` by forward diffusion.
    pub fn draw<R: Rng + ?Sized>(
        items: &[(&[f64], usize)],
        ns: &NoiseSchedule,
        p_uncond: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if items.is_empty() {
            return Err(NnError::Input("empty batch".into()));
        }
        if !(0.0..1.0).contains(&p_uncond) {
            return Err(NnError::Config(format!(
                "p_uncond must be in [0, 1), got {p_uncond}"
            )));
        }
        let d = items[0].0.len();
        let mut out = LossBatch {
            x_t: Vec::with_capacity(items.len() * d),
            t: Vec::with_capacity(items.len()),
            conds: Vec::with_capacity(items.len()),
            eps: vec![0.0; items.len() * d],
        };
        for (i, (x0, label)) in items.iter().enumerate() {
            if x0.len() != d {
                return Err(NnError::Input("batch items differ in dimension".into()));
            }
            let t = rng.random_range(1..=ns.horizon());
            let eps = &mut out.eps[i * d..(i + 1) * d];
            fill_normal(rng, eps);
            let dropped = p_uncond > 0.0 && rng.random::<f64>() < p_uncond;
            let g = ns.gamma(t);
            let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
            out.x_t
                .extend(x0.iter().zip(eps.iter()).map(|(x, e)| a * x + b * e));
            out.t.push(t);
            out.conds.push(if dropped {
                Condition::Null
            } else {
                Condition::Class(*label)
            });
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub p_uncond: f64,
    pub adam: AdamConfig,
    /// Learning-rate shape over the run.
    pub lr_schedule: LrSchedule,
    /// Decay of the weight moving average copied into the model at the
    /// end; `0` keeps the raw weights.
    pub ema_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            steps: 3000,
            p_uncond: 0.1,
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            ema_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.steps == 0 {
            return Err(NnError::Config(
                "lr, batch_size and steps must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(NnError::Config(format!(
                "p_uncond must be in [0, 1), got {}",
                self.p_uncond
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(NnError::Config(format!(
                "ema_decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Trains on `(x, label)` rows sampled uniformly with replacement.
pub fn train(
    model: &mut Denoiser,
    data: &[f64],
    labels: &[usize],
    ns: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport, NnError> {
    cfg.validate()?;
    let d = model.arch.dim;
    if labels.is_empty() || data.len() != labels.len() * d {
        return Err(NnError::Input(
            "training data does not match model dimension".into(),
        ));
    }
    let mut rng = seeded(cfg.seed);
    let mut adam = AdamState::new(model, cfg.adam.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut ema: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|p| p.value.data().to_vec())
        .collect();
    for step in 0..cfg.steps {
        let items: Vec<(&[f64], usize)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..labels.len());
                (&data[i * d..(i + 1) * d], labels[i])
            })
            .collect();
        let loss = model.loss_and_grads(&items, ns, cfg.p_uncond, &mut rng)?;
        adam.step(model, cfg.lr_schedule.at(cfg.lr, step, cfg.steps));
        losses.push(loss);
        if cfg.ema_decay > 0.0 {
            // warm-up keeps the average from remembering the initialization
            let k = step as f64;
            let decay = cfg.ema_decay.min((1.0 + k) / (10.0 + k));
            for (avg, p) in ema.iter_mut().zip(&model.params) {
                for (a, v) in avg.iter_mut().zip(p.value.data()) {
                    *a = decay * *a + (1.0 - decay) * v;
                }
            }
        }
    }
    if cfg.ema_decay > 0.0 {
        for (avg, p) in ema.into_iter().zip(&mut model.params) {
            p.value.data_mut().copy_from_slice(&avg);
        }
    }
    Ok(TrainReport { losses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradProbe {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients
    /// from being judged on pure rounding noise.
    pub fn relative_error(&self) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        if diff == 0.0 {
            return 0.0;
        }
        diff / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

/// Analytic gradient of `batch`'s loss against a central difference with
/// step `h` for one parameter entry.
pub fn probe_gradient(
    model: &mut Denoiser,
    batch: &LossBatch,
    param: usize,
    index: usize,
    h: f64,
) -> Result<GradProbe, NnError> {
    model.zero_grads();
    model.loss_and_grads_on(batch)?;
    let analytic = model.params[param].grad.data()[index];
    model.zero_grads();
    let orig = model.params[param].value.data()[index];
    model.params[param].value.data_mut()[index] = orig + h;
    let up = model.loss(batch)?;
    model.params[param].value.data_mut()[index] = orig - h;
    let down = model.loss(batch)?;
    model.params[param].value.data_mut()[index] = orig;
    Ok(GradProbe {
        param,
        index,
        analytic,
        numeric: (up - down) / (2.0 * h),
    })
}

/// Largest relative error over `probe_count` parameter entries chosen
/// uniformly (parameter tensor first, then entry) for a fixed `batch`.
pub fn grad_check<R: Rng + ?Sized>(
    model: &mut Denoiser,
    batch: &LossBatch,
    probe_count: usize,
    h: f64,
    rng: &mut R,
) -> Result<f64, NnError> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NnError::Config(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    model.zero_grads();
    model.loss_and_grads_on(batch)?;
    let grads: Vec<Tensor> = model.params.iter().map(|p| p.grad.clone()).collect();
    model.zero_grads();
    let mut worst: f64 = 0.0;
    for _ in 0..probe_count {
        let param = rng.random_range(0..model.params.len());
        let index = rng.random_range(0..model.params[param].value.len());
        let orig = model.params[param].value.data()[index];
        model.params[param].value.data_mut()[index] = orig + h;
        let up = model.loss(batch)?;
        model.params[param].value.data_mut()[index] = orig - h;
        let down = model.loss(batch)?;
        model.params[param].value.data_mut()[index] = orig;
        let probe = GradProbe {
            param,
            index,
            analytic: grads[param].data()[index],
            numeric: (up - down) / (2.0 * h),
        };
        worst = worst.max(probe.relative_error());
    }
    Ok(worst)
}

/// Draws a small random batch (8 items, `x₀ ~ N(0, 0.5²)`, uniform labels,
/// `p_uncond = 0.5`) and runs [`grad_check`] on it.
pub fn grad_check_random(
    model: &mut Denoiser,
    ns: &NoiseSchedule,
    probe_count: usize,
    h: f64,
    rng: &mut LabRng,
) -> Result<f64, NnError> {
    let d = model.arch.dim;
    let k = model.arch.classes;
    let rows: Vec<(Vec<f64>, usize)> = (0..8)
        .map(|_| {
            let mut x = vec![0.0; d];
            fill_normal(rng, &mut x);
            x.iter_mut().for_each(|v| *v *= 0.5);
            (x, rng.random_range(0..k))
        })
        .collect();
    let items: Vec<(&[f64], usize)> = rows.iter().map(|(x, l)| (x.as_slice(), *l)).collect();
    let batch = LossBatch::draw(&items, ns, 0.5, rng)?;
    grad_check(model, &batch, probe_count, h, rng)
}
