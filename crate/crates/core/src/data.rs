//! Synthetic labelled datasets, feature embeddings and the oracle classifier
//! used to score condition adherence.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, normal_vec, seeded};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in `{field}`: {detail}")]
    Format { field: &'static str, detail: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

fn config(msg: impl Into<String>) -> DataError {
    DataError::Config(msg.into())
}

/// Rows of dimension `dim` stored contiguously, each with a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    classes: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        dim: usize,
        classes: usize,
        data: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        if dim == 0 || labels.is_empty() {
            return Err(config("dataset must be nonempty with positive dimension"));
        }
        if data.len() != dim * labels.len() {
            return Err(config(format!(
                "{} values do not form {} rows of dim {dim}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            dim,
            classes,
            data,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.data.chunks(self.dim).zip(self.labels.iter().copied())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            dim: self.dim,
            classes: self.classes,
            data,
            labels,
        }
    }

    /// 90/10 train/held-out split: after a seeded shuffle, every tenth
    /// position is held out.
    pub fn split(&self, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seeded(seed));
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (pos, idx) in order.into_iter().enumerate() {
            if pos % 10 == 9 {
                held.push(idx);
            } else {
                train.push(idx);
            }
        }
        (self.subset(&train), self.subset(&held))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoGaussiansSpec {
    pub n: usize,
    pub side: usize,
    pub mu_low: f64,
    pub mu_high: f64,
    pub sigma: f64,
}

impl Default for TwoGaussiansSpec {
    fn default() -> Self {
        Self {
            n: 50_000,
            side: 32,
            mu_low: -0.5,
            mu_high: 0.5,
            sigma: 0.2,
        }
    }
}

/// `n/2` images per class with i.i.d. pixels `N(μ_class, σ²)` clipped to
/// `[−1, 1]`. Label 0 is the dark class. Rows alternate 0, 1, 0, 1, ….
pub fn gen_two_gaussians(spec: &TwoGaussiansSpec, seed: u64) -> Result<LabeledDataset, DataError> {
    let TwoGaussiansSpec {
        n,
        side,
        mu_low,
        mu_high,
        sigma,
    } = *spec;
    if n < 2 || n % 2 != 0 {
        return Err(config(format!("n must be even and ≥ 2, got {n}")));
    }
    if side == 0 || !(sigma > 0.0) || !(mu_low < mu_high) {
        return Err(config("need side > 0, sigma > 0 and mu_low < mu_high"));
    }
    let dim = side * side;
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut clipped = 0usize;
    for i in 0..n {
        let label = i % 2;
        let mu = if label == 0 { mu_low } else { mu_high };
        for z in normal_vec(&mut rng, dim) {
            let v = mu + sigma * z;
            if !(-1.0..=1.0).contains(&v) {
                clipped += 1;
            }
            data.push(v.clamp(-1.0, 1.0));
        }
        labels.push(label);
    }
    let rate = clipped as f64 / (n * dim) as f64;
    if rate > 0.01 {
        warn!(
            "two-gaussians clipped {:.2}% of pixels to [-1, 1]",
            100.0 * rate
        );
    }
    LabeledDataset::new(dim, 2, data, labels)
}

/// Isotropic 2-D (or any-D) mixture; labels assigned round-robin.
pub fn gen_gmm(
    n: usize,
    centers: &[Vec<f64>],
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if centers.len() < 2 {
        return Err(config("need at least two centers"));
    }
    let dim = centers[0].len();
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(config("centers must share a positive dimension"));
    }
    if !(sigma > 0.0) || n == 0 {
        return Err(config("need sigma > 0 and n > 0"));
    }
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % centers.len();
        for (c, z) in centers[k].iter().zip(normal_vec(&mut rng, dim)) {
            data.push(c + sigma * z);
        }
        labels.push(k);
    }
    LabeledDataset::new(dim, centers.len(), data, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoGaussians(TwoGaussiansSpec),
    Gmm {
        n: usize,
        centers: Vec<Vec<f64>>,
        sigma: f64,
    },
    /// A dataset file written by [`save_dataset`]; the seed is ignored.
    File {
        path: std::path::PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoGaussians(TwoGaussiansSpec::default())
    }
}

impl DatasetSpec {
    pub fn generate(&self, seed: u64) -> Result<LabeledDataset, DataError> {
        match self {
            DatasetSpec::TwoGaussians(s) => gen_two_gaussians(s, seed),
            DatasetSpec::Gmm { n, centers, sigma } => gen_gmm(*n, centers, *sigma, seed),
            DatasetSpec::File { path } => load_dataset(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbedSpec {
    /// Features are the raw coordinates; for low-dimensional data.
    Identity,
    /// `[mean(x), std(x), P·x]` with a seeded Gaussian projection `P` of
    /// `k` rows scaled by `1/√d`.
    MomentsProj {
        k: usize,
        #[serde(default = "default_embed_seed")]
        seed: u64,
    },
}

fn default_embed_seed() -> u64 {
    0x5EED
}

impl Default for EmbedSpec {
    fn default() -> Self {
        EmbedSpec::MomentsProj {
            k: 32,
            seed: default_embed_seed(),
        }
    }
}

/// Materialized embedding for inputs of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    spec: EmbedSpec,
    dim: usize,
    projection: Vec<f64>,
}

impl Embedder {
    pub fn new(spec: EmbedSpec, dim: usize) -> Result<Self, DataError> {
        let projection = match spec {
            EmbedSpec::Identity => {
                if dim > 8 {
                    return Err(config(format!(
                        "identity embedding is for dim ≤ 8, got {dim}"
                    )));
                }
                Vec::new()
            }
            EmbedSpec::MomentsProj { k, seed } => {
                if k == 0 {
                    return Err(config("projection width must be positive"));
                }
                let scale = 1.0 / (dim as f64).sqrt();
                normal_vec(&mut seeded(derive_seed(seed, dim as u64)), k * dim)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect()
            }
        };
        Ok(Self {
            spec,
            dim,
            projection,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn output_dim(&self) -> usize {
        match self.spec {
            EmbedSpec::Identity => self.dim,
            EmbedSpec::MomentsProj { k, .. } => k + 2,
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "embedding input dimension");
        match self.spec {
            EmbedSpec::Identity => x.to_vec(),
            EmbedSpec::MomentsProj { .. } => {
                let n = x.len() as f64;
                let mean = x.iter().sum::<f64>() / n;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let mut out = Vec::with_capacity(self.output_dim());
                out.push(mean);
                out.push(var.sqrt());
                out.extend(
                    self.projection
                        .chunks(self.dim)
                        .map(|row| row.iter().zip(x).map(|(p, v)| p * v).sum::<f64>()),
                );
                out
            }
        }
    }

    pub fn embed_all<'a>(&self, rows: impl IntoIterator<Item = &'a [f64]>) -> Vec<Vec<f64>> {
        rows.into_iter().map(|r| self.embed(r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub iters: usize,
    pub lr: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: 0.5,
        }
    }
}

/// Multinomial logistic regression on standardized embedding features.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleClassifier {
    embedder: Embedder,
    feat_mean: Vec<f64>,
    feat_scale: Vec<f64>,
    /// `classes × features`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
    train_accuracy: f64,
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

impl OracleClassifier {
    /// Full-batch gradient descent on the mean cross-entropy.
    pub fn train(
        ds: &LabeledDataset,
        embed: EmbedSpec,
        spec: &OracleSpec,
        seed: u64,
    ) -> Result<Self, DataError> {
        if ds.classes() < 2 {
            return Err(config(format!(
                "oracle needs ≥ 2 classes, got {}",
                ds.classes()
            )));
        }
        if spec.iters == 0 || !(spec.lr > 0.0) {
            return Err(config("oracle needs iters ≥ 1 and lr > 0"));
        }
        let embedder = Embedder::new(embed, ds.dim())?;
        let feats = embedder.embed_all(ds.data().chunks(ds.dim()));
        let f = embedder.output_dim();
        let n = feats.len() as f64;
        let mut feat_mean = vec![0.0; f];
        for row in &feats {
            for (m, v) in feat_mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut feat_scale = vec![0.0; f];
        for row in &feats {
            for ((s, v), m) in feat_scale.iter_mut().zip(row).zip(&feat_mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut feat_scale {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 };
        }
        let std_feats: Vec<Vec<f64>> = feats
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&feat_mean)
                    .zip(&feat_scale)
                    .map(|((v, m), s)| (v - m) * s)
                    .collect()
            })
            .collect();

        let k = ds.classes();
        let mut rng = seeded(seed);
        let mut weights: Vec<f64> = (0..k * f).map(|_| rng.random_range(-0.01..0.01)).collect();
        let mut bias = vec![0.0; k];
        let mut probs = vec![0.0; k];
        for _ in 0..spec.iters {
            let mut gw = vec![0.0; k * f];
            let mut gb = vec![0.0; k];
            for (x, &y) in std_feats.iter().zip(ds.labels()) {
                for c in 0..k {
                    probs[c] = bias[c] + dot(&weights[c * f..(c + 1) * f], x);
                }
                softmax_in_place(&mut probs);
                for c in 0..k {
                    let g = probs[c] - if c == y { 1.0 } else { 0.0 };
                    gb[c] += g;
                    for (gwi, xi) in gw[c * f..(c + 1) * f].iter_mut().zip(x) {
                        *gwi += g * xi;
                    }
                }
            }
            for (w, g) in weights.iter_mut().zip(&gw) {
                *w -= spec.lr * g / n;
            }
            for (b, g) in bias.iter_mut().zip(&gb) {
                *b -= spec.lr * g / n;
            }
        }
        let mut oracle = Self {
            embedder,
            feat_mean,
            feat_scale,
            weights,
            bias,
            classes: k,
            train_accuracy: 0.0,
        };
        oracle.train_accuracy = oracle.accuracy(ds);
        Ok(oracle)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    /// Class posterior for one input row.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let feats = self.embedder.embed(x);
        self.posterior_from_features(&feats)
    }

    pub fn posterior_from_features(&self, feats: &[f64]) -> Vec<f64> {
        let f = feats.len();
        let z: Vec<f64> = feats
            .iter()
            .zip(&self.feat_mean)
            .zip(&self.feat_scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        let mut scores: Vec<f64> = (0..self.classes)
            .map(|c| self.bias[c] + dot(&self.weights[c * f..(c + 1) * f], &z))
            .collect();
        softmax_in_place(&mut scores);
        scores
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.posterior(x))
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> f64 {
        let hits = ds.rows().filter(|(x, y)| self.predict(x) == *y).count();
        hits as f64 / ds.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
            if p > best.1 {
                (i, p)
            } else {
                best
            }
        })
        .0
}

// Dataset file: magic "GLABDAT\0", version u8 = 1, dim u32, classes u32,
// n u64, then n·dim f64 LE values and n u32 LE labels.
pub const DATASET_MAGIC: &[u8; 8] = b"GLABDAT\0";
pub const DATASET_VERSION: u8 = 1;

pub fn write_dataset<W: Write>(ds: &LabeledDataset, mut w: W) -> io::Result<()> {
    let mut buf = Vec::with_capacity(25 + ds.data.len() * 8 + ds.len() * 4);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.push(DATASET_VERSION);
    buf.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for v in &ds.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn format_err(field: &'static str, detail: impl Into<String>) -> DataError {
    DataError::Format {
        field,
        detail: detail.into(),
    }
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<LabeledDataset, DataError> {
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let take = |pos: &mut usize, len: usize, field: &'static str| -> Result<&[u8], DataError> {
        let end = *pos + len;
        let s = raw
            .get(*pos..end)
            .ok_or_else(|| format_err(field, "file truncated"))?;
        *pos = end;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 8, "magic")? != DATASET_MAGIC {
        return Err(format_err("magic", "not a dataset file"));
    }
    let version = take(&mut pos, 1, "version")?[0];
    if version != DATASET_VERSION {
        return Err(format_err(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let dim = u32_at(take(&mut pos, 4, "dim")?);
    let classes = u32_at(take(&mut pos, 4, "classes")?);
    let n = u64::from_le_bytes(take(&mut pos, 8, "n")?.try_into().expect("8 bytes")) as usize;
    let values = take(&mut pos, n * dim * 8, "values")?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = take(&mut pos, n * 4, "labels")?
        .chunks_exact(4)
        .map(u32_at)
        .collect();
    if pos != raw.len() {
        return Err(format_err("labels", "trailing bytes"));
    }
    LabeledDataset::new(dim, classes, values, labels)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset, DataError> {
    read_dataset(io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_two_gaussians(n: usize) -> TwoGaussiansSpec {
        TwoGaussiansSpec {
            n,
            side: 8,
            ..TwoGaussiansSpec::default()
        }
    }

    #[test]
    fn two_gaussians_class_means() {
        let spec = small_two_gaussians(400);
        let ds = gen_two_gaussians(&spec, 1).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(ds.dim(), 64);
        let class0: Vec<f64> = ds
            .rows()
            .filter(|r| r.1 == 0)
            .flat_map(|r| r.0.to_vec())
            .collect();
        let mean = class0.iter().sum::<f64>() / class0.len() as f64;
        let tol = 3.0 * 0.2 / ((200 * 64) as f64).sqrt();
        assert!((mean + 0.5).abs() <= tol, "{mean}");
        assert!(ds.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(ds.labels().iter().filter(|&&l| l == 1).count(), 200);
    }

    #[test]
    fn two_gaussians_edge_cases() {
        let ds = gen_two_gaussians(&small_two_gaussians(2), 3).unwrap();
        assert_eq!(ds.labels(), &[0, 1]);
        assert!(gen_two_gaussians(&small_two_gaussians(3), 3).is_err());
        let bad = TwoGaussiansSpec {
            sigma: 0.0,
            ..small_two_gaussians(4)
        };
        assert!(gen_two_gaussians(&bad, 0).is_err());
        let a = gen_two_gaussians(&small_two_gaussians(10), 5).unwrap();
        let b = gen_two_gaussians(&small_two_gaussians(10), 5).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_dataset(&a, &mut ba).unwrap();
        write_dataset(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn gmm_statistics() {
        let centers = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
        let ds = gen_gmm(10_000, &centers, 0.1, 2).unwrap();
        for (k, c) in centers.iter().enumerate() {
            let pts: Vec<&[f64]> = ds.rows().filter(|r| r.1 == k).map(|r| r.0).collect();
            for j in 0..2 {
                let m = pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64;
                assert!((m - c[j]).abs() < 0.05);
            }
        }
        let one_each = gen_gmm(2, &centers, 0.1, 2).unwrap();
        assert_eq!(one_each.labels(), &[0, 1]);
        assert!(gen_gmm(5, &[], 0.1, 0).is_err());
        assert_eq!(
            gen_gmm(7, &centers, 0.1, 9).unwrap(),
            gen_gmm(7, &centers, 0.1, 9).unwrap()
        );
    }

    #[test]
    fn embedding_examples() {
        let id = Embedder::new(EmbedSpec::Identity, 2).unwrap();
        assert_eq!(id.embed(&[0.5, -2.0]), vec![0.5, -2.0]);
        assert!(Embedder::new(EmbedSpec::Identity, 64).is_err());

        let e = Embedder::new(EmbedSpec::MomentsProj { k: 6, seed: 1 }, 16).unwrap();
        let c = e.embed(&[0.25; 16]);
        assert_eq!(c.len(), 8);
        assert!((c[0] - 0.25).abs() < 1e-15 && c[1] == 0.0);

        let x = normal_vec(&mut seeded(4), 16);
        let zero = e.embed(&[0.0; 16]);
        let base = e.embed(&x);
        let scaled = e.embed(&x.iter().map(|v| 3.0 * v).collect::<Vec<_>>());
        for j in 2..8 {
            assert!(((scaled[j] - zero[j]) - 3.0 * (base[j] - zero[j])).abs() < 1e-12);
        }
        assert_eq!(
            e,
            Embedder::new(EmbedSpec::MomentsProj { k: 6, seed: 1 }, 16).unwrap()
        );
    }

    #[test]
    fn oracle_separates_two_gaussians() {
        let ds = gen_two_gaussians(&small_two_gaussians(400), 7).unwrap();
        let (train, held) = ds.split(1);
        assert_eq!((train.len(), held.len()), (360, 40));
        let oracle =
            OracleClassifier::train(&train, EmbedSpec::default(), &OracleSpec::default(), 0)
                .unwrap();
        assert!(oracle.train_accuracy() >= 0.999);
        assert!(oracle.accuracy(&held) >= 0.999);
        for (x, _) in held.rows() {
            let p = oracle.posterior(x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert_eq!(oracle.predict(&[-0.5; 64]), 0);
        assert_eq!(oracle.predict(&[0.5; 64]), 1);
    }

    #[test]
    fn oracle_rejects_single_class() {
        let ds = LabeledDataset::new(2, 1, vec![0.0, 1.0], vec![0]).unwrap();
        assert!(
            OracleClassifier::train(&ds, EmbedSpec::Identity, &OracleSpec::default(), 0).is_err()
        );
    }

    #[test]
    fn dataset_file_round_trip_and_errors() {
        let ds = gen_gmm(5, &[vec![0.0, 1.0], vec![2.0, 3.0]], 0.5, 1).unwrap();
        let mut b = Vec::new();
        write_dataset(&ds, &mut b).unwrap();
        assert_eq!(read_dataset(b.as_slice()).unwrap(), ds);
        assert!(read_dataset(&b[..b.len() - 2]).is_err());
        let mut v = b.clone();
        v[8] = 2;
        let err = read_dataset(v.as_slice()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
