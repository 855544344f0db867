//! Sample-quality metrics and trajectory analysis.

use thiserror::Error;

use crate::data::{argmax, OracleClassifier};
use crate::diffusion::Trajectory;
use crate::linalg::{spectral_map, sym_eigen, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("input error: {0}")]
    Input(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Mean vector and covariance matrix of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (`n − 1`) covariance.
pub fn gaussian_stats<V: AsRef<[f64]>>(features: &[V]) -> Result<GaussianStats, EvalError> {
    if features.len() < 2 {
        return Err(EvalError::Input(format!(
            "need ≥ 2 samples for covariance, got {}",
            features.len()
        )));
    }
    let d = features[0].as_ref().len();
    if features.iter().any(|f| f.as_ref().len() != d) {
        return Err(EvalError::Shape("feature vectors differ in length".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for f in features {
        for ((c, v), m) in centered.iter_mut().zip(f.as_ref()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(GaussianStats { mean, cov })
}

/// Principal square root of a symmetric PSD matrix; eigenvalues in
/// `[−1e−10, 0)` are treated as zero.
pub fn matrix_sqrt_psd(a: &Matrix) -> Result<Matrix, EvalError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        }
        .into());
    }
    let asym = a.max_asymmetry();
    if asym > 1e-9 {
        return Err(LinalgError::NotSymmetric(asym).into());
    }
    let eig = sym_eigen(a)?;
    Ok(spectral_map(&eig, |l| l.max(0.0).sqrt()))
}

/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a^{½} Σ_b Σ_a^{½})^{½})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, EvalError> {
    if a.dim() != b.dim() || a.cov.rows() != b.cov.rows() {
        return Err(EvalError::Shape(format!(
            "stats dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = matrix_sqrt_psd(&a.cov)?;
    let mut inner = sa.matmul(&b.cov).matmul(&sa);
    inner.symmetrize();
    let cross = matrix_sqrt_psd(&inner)?;
    let fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(if (-1e-8..0.0).contains(&fd) {
        0.0
    } else {
        fd.max(0.0)
    })
}

/// Fraction of samples whose oracle argmax equals the intended label.
pub fn adherence<V: AsRef<[f64]>>(
    oracle: &OracleClassifier,
    samples: &[(V, usize)],
) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Input("no samples".into()));
    }
    let hits = samples
        .iter()
        .filter(|(x, y)| oracle.predict(x.as_ref()) == *y)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// `exp(mean_x KL(p(y|x) ‖ p̄))` from per-sample posteriors.
pub fn is_from_posteriors(posteriors: &[Vec<f64>]) -> Result<f64, EvalError> {
    if posteriors.len() < 2 {
        return Err(EvalError::Input(
            "inception-score analog needs ≥ 2 samples".into(),
        ));
    }
    let k = posteriors[0].len();
    let n = posteriors.len() as f64;
    let mut marginal = vec![0.0; k];
    for p in posteriors {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let mean_kl = posteriors
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, mi)| pi * (pi / mi).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

pub fn is_analog<V: AsRef<[f64]>>(
    oracle: &OracleClassifier,
    samples: &[V],
) -> Result<f64, EvalError> {
    let post: Vec<Vec<f64>> = samples
        .iter()
        .map(|x| oracle.posterior(x.as_ref()))
        .collect();
    is_from_posteriors(&post)
}

/// Per group: population standard deviation of each dimension, averaged over
/// dimensions. Returns the mean over groups.
pub fn diversity<V: AsRef<[f64]>>(groups: &[Vec<V>]) -> Result<f64, EvalError> {
    if groups.is_empty() {
        return Err(EvalError::Input("no groups".into()));
    }
    let mut total = 0.0;
    for g in groups {
        if g.len() < 2 {
            return Err(EvalError::Input(format!(
                "group of {} vectors; need ≥ 2",
                g.len()
            )));
        }
        let d = g[0].as_ref().len();
        let n = g.len() as f64;
        let mut acc = 0.0;
        for j in 0..d {
            let mean = g.iter().map(|v| v.as_ref()[j]).sum::<f64>() / n;
            let var = g
                .iter()
                .map(|v| (v.as_ref()[j] - mean).powi(2))
                .sum::<f64>()
                / n;
            acc += var.sqrt();
        }
        total += acc / d as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Top-`k` principal axes of a data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit rows.
    pub components: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
}

pub fn pca_fit<V: AsRef<[f64]>>(data: &[V], k: usize) -> Result<Pca, EvalError> {
    let dim = data.first().map(|v| v.as_ref().len()).unwrap_or(0);
    if k == 0 || k > dim {
        return Err(EvalError::Config(format!(
            "need 1 ≤ k ≤ dim ({dim}), got k = {k}"
        )));
    }
    if data.len() < k + 1 {
        return Err(EvalError::Input(format!(
            "need ≥ {} samples for {k} components, got {}",
            k + 1,
            data.len()
        )));
    }
    let stats = gaussian_stats(data)?;
    let eig = sym_eigen(&stats.cov)?;
    let components = (0..k)
        .map(|c| {
            let mut v = eig.vectors.column(c);
            let pivot = v.iter().copied().fold(
                0.0f64,
                |best, x| if x.abs() > best.abs() { x } else { best },
            );
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(Pca {
        mean: stats.mean,
        components,
        explained: eig.values[..k].to_vec(),
    })
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((ci, xi), mi)| ci * (xi - mi))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, a) in self.components.iter().zip(coords) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += a * ci;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryDiagnostics {
    pub uturn_count: usize,
    pub wander_ratio: f64,
}

pub const UTURN_TAU: f64 = 0.5;
const MIN_STEP: f64 = 1e-9;

/// U-turns (consecutive displacements with cosine below `−tau`) and the
/// ratio of path length to net displacement, over already-projected states.
pub fn trajectory_diagnostics<V: AsRef<[f64]>>(
    states: &[V],
    tau: f64,
) -> Result<TrajectoryDiagnostics, EvalError> {
    if states.len() < 3 {
        return Err(EvalError::Input(format!(
            "trajectory needs ≥ 3 states, got {}",
            states.len()
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(EvalError::Config(format!(
            "tau must be in (0, 1), got {tau}"
        )));
    }
    let disp: Vec<Vec<f64>> = states
        .windows(2)
        .map(|w| {
            w[1].as_ref()
                .iter()
                .zip(w[0].as_ref())
                .map(|(b, a)| b - a)
                .collect()
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut uturns = 0;
    for pair in disp.windows(2) {
        let (na, nb) = (norm(&pair[0]), norm(&pair[1]));
        if na < MIN_STEP || nb < MIN_STEP {
            continue;
        }
        let cos = pair[0]
            .iter()
            .zip(&pair[1])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (na * nb);
        if cos < -tau {
            uturns += 1;
        }
    }
    let path: f64 = disp.iter().map(|d| norm(d)).sum();
    let first = states[0].as_ref();
    let last = states[states.len() - 1].as_ref();
    let net = norm(
        &last
            .iter()
            .zip(first)
            .map(|(b, a)| b - a)
            .collect::<Vec<_>>(),
    );
    Ok(TrajectoryDiagnostics {
        uturn_count: uturns,
        wander_ratio: path / net.max(1e-12),
    })
}

/// Diagnostics after projecting every state with `pca` (when given).
pub fn diagnose_trajectory(
    traj: &Trajectory,
    pca: Option<&Pca>,
    tau: f64,
) -> Result<TrajectoryDiagnostics, EvalError> {
    let states: Vec<Vec<f64>> = traj
        .states
        .iter()
        .map(|(_, x)| match pca {
            Some(p) => p.project(x),
            None => x.clone(),
        })
        .collect();
    trajectory_diagnostics(&states, tau)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Index of the posterior argmax; re-exported for metric consumers.
pub fn predicted_class(posterior: &[f64]) -> usize {
    argmax(posterior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gmm, EmbedSpec, OracleSpec};
    use crate::rng::{normal_vec, seeded};

    fn stats_1d(mu: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mean: vec![mu],
            cov: Matrix::from_diag(&[var]),
        }
    }

    #[test]
    fn gaussian_stats_examples() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.cov, Matrix::from_diag(&[2.0, 0.0]));
        let same = gaussian_stats(&[[1.5, 2.0]; 4]).unwrap();
        assert_eq!(same.cov, Matrix::zeros(2, 2));
        let pts = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]];
        let rev: Vec<_> = pts.iter().rev().cloned().collect();
        let (a, b) = (gaussian_stats(&pts).unwrap(), gaussian_stats(&rev).unwrap());
        assert!(a.cov.sub(&b.cov).frobenius() < 1e-15);
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn sqrt_examples() {
        assert!(
            matrix_sqrt_psd(&Matrix::identity(3))
                .unwrap()
                .sub(&Matrix::identity(3))
                .frobenius()
                < 1e-15
        );
        let r = matrix_sqrt_psd(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(r, Matrix::from_diag(&[2.0, 3.0]));
        let mut asym = Matrix::identity(2);
        asym[(0, 1)] = 1e-6;
        assert!(matrix_sqrt_psd(&asym).is_err());
    }

    #[test]
    fn sqrt_of_constructed_psd() {
        // QᵀDQ with Q from the eigenvectors of a random symmetric matrix
        let raw = Matrix::from_rows(8, 8, normal_vec(&mut seeded(1), 64));
        let q = sym_eigen(&raw.add(&raw.transpose())).unwrap().vectors;
        let d = Matrix::from_diag(&[5.0, 3.0, 2.0, 1.0, 0.5, 0.1, 1e-3, 0.0]);
        let a = q.transpose().matmul(&d).matmul(&q);
        let mut a = a;
        a.symmetrize();
        let r = matrix_sqrt_psd(&a).unwrap();
        assert!(r.max_asymmetry() < 1e-12);
        let resid = r.matmul(&r).sub(&a).frobenius();
        assert!(resid <= 1e-8 * a.frobenius().max(1.0), "{resid}");
        assert!(sym_eigen(&r).unwrap().values.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn frechet_closed_forms() {
        assert_eq!(
            frechet_distance(&stats_1d(0.3, 2.0), &stats_1d(0.3, 2.0)).unwrap(),
            0.0
        );
        assert!(
            (frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs()
                < 1e-12
        );
        assert!(
            (frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs()
                < 1e-12
        );
        let two = GaussianStats {
            mean: vec![0.0, 0.0],
            cov: Matrix::identity(2),
        };
        assert!(frechet_distance(&stats_1d(0.0, 1.0), &two).is_err());
    }

    #[test]
    fn adherence_and_is() {
        let centers = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
        let ds = gen_gmm(400, &centers, 0.1, 3).unwrap();
        let oracle =
            OracleClassifier::train(&ds, EmbedSpec::Identity, &OracleSpec::default(), 0).unwrap();
        let good: Vec<(Vec<f64>, usize)> = ds.rows().map(|(x, y)| (x.to_vec(), y)).collect();
        assert!(adherence(&oracle, &good).unwrap() >= 0.999);
        let flipped: Vec<(Vec<f64>, usize)> =
            good.iter().map(|(x, y)| (x.clone(), 1 - y)).collect();
        assert!(adherence(&oracle, &flipped).unwrap() <= 0.001);
        assert_eq!(adherence(&oracle, &[(vec![1.0, 0.0], 1)]).unwrap(), 1.0);
        assert!(adherence::<Vec<f64>>(&oracle, &[]).is_err());

        let xs: Vec<Vec<f64>> = good.iter().map(|(x, _)| x.clone()).collect();
        let is = is_analog(&oracle, &xs).unwrap();
        assert!(is > 1.9 && is <= 2.0, "{is}");
        assert_eq!(is_analog(&oracle, &[[0.3, 0.1]; 5]).unwrap(), 1.0);
    }

    #[test]
    fn is_binary_limit() {
        for delta in [1e-2, 1e-4, 1e-8] {
            let mut post = vec![vec![1.0 - delta, delta]; 5];
            post.extend(vec![vec![delta, 1.0 - delta]; 5]);
            let v = is_from_posteriors(&post).unwrap();
            assert!(v <= 2.0 && v > 2.0 - 20.0 * delta.sqrt(), "{delta}: {v}");
        }
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&[vec![vec![1.0, 2.0]; 3]]).unwrap(), 0.0);
        assert_eq!(diversity(&[vec![vec![0.0], vec![2.0]]]).unwrap(), 1.0);
        let g = vec![vec![vec![0.3, 1.0], vec![-0.2, 4.0], vec![1.1, 0.0]]];
        let scaled: Vec<Vec<Vec<f64>>> = g
            .iter()
            .map(|grp| {
                grp.iter()
                    .map(|v| v.iter().map(|x| 2.5 * x).collect())
                    .collect()
            })
            .collect();
        assert!((diversity(&scaled).unwrap() - 2.5 * diversity(&g).unwrap()).abs() < 1e-12);
        assert!(diversity(&[vec![vec![1.0]]]).is_err());
    }

    #[test]
    fn pca_examples() {
        // points on the line through (1, 1) direction (3, 4)/5
        let line: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let s = i as f64 * 0.37 - 3.0;
                vec![1.0 + 0.6 * s, 1.0 + 0.8 * s]
            })
            .collect();
        let p = pca_fit(&line, 1).unwrap();
        let cos = p.components[0][0] * 0.6 + p.components[0][1] * 0.8;
        assert!(cos.abs() >= 1.0 - 1e-8);
        assert!(p.components[0][1] > 0.0, "largest entry made positive");
        assert!(p.project(&p.mean).iter().all(|v| v.abs() < 1e-12));

        let cloud: Vec<Vec<f64>> = normal_vec(&mut seeded(6), 60)
            .chunks(3)
            .map(<[f64]>::to_vec)
            .collect();
        let full = pca_fit(&cloud, 3).unwrap();
        for a in &cloud {
            for b in &cloud {
                let d0: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let (pa, pb) = (full.project(a), full.project(b));
                let d1: f64 = pa
                    .iter()
                    .zip(&pb)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d0 - d1).abs() < 1e-8);
            }
        }
        assert!(pca_fit(&cloud, 4).is_err());
        assert!(pca_fit(&cloud[..2], 2).is_err());
    }

    #[test]
    fn trajectory_examples() {
        let straight: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let d = trajectory_diagnostics(&straight, UTURN_TAU).unwrap();
        assert_eq!(d.uturn_count, 0);
        assert!((d.wander_ratio - 1.0).abs() < 1e-12);

        let a = vec![0.0, 0.0];
        let b = vec![1.0, 1.0];
        let d = trajectory_diagnostics(&[a.clone(), b.clone(), a, b], 0.5).unwrap();
        assert_eq!(d.uturn_count, 2);
        assert!((d.wander_ratio - 3.0).abs() < 1e-12);

        let mut wins = 0;
        for seed in 0..3 {
            let mut rng = seeded(seed);
            let mut pos = vec![0.0, 0.0];
            let mut walk = vec![pos.clone()];
            for _ in 0..100 {
                let step = normal_vec(&mut rng, 2);
                pos = pos.iter().zip(&step).map(|(p, s)| p + s).collect();
                walk.push(pos.clone());
            }
            if trajectory_diagnostics(&walk, 0.5).unwrap().wander_ratio > 2.0 {
                wins += 1;
            }
        }
        assert!(wins >= 2);
        assert!(trajectory_diagnostics(&[vec![0.0], vec![1.0]], 0.5).is_err());
        assert!(trajectory_diagnostics(&straight, 1.5).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
