//! Post-hoc confidence scores. Every score is oriented so that larger means
//! more in-distribution.
//!
//! Distance scores ([`GaussianBank`], [`ValidationBank`]) consume a latent
//! representation; [`msp_score`] and [`energy_score`] consume classifier
//! logits only.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, softmax_in_place};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_inverse, quadratic_form};

/// Relative shrinkage coefficients tried in order, each scaled by
/// `trace(Σ) / d`. The unshrunk covariance is tried before the ladder.
const SHRINKAGE_LADDER: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

pub const VALIDATION_BANK_CAP: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFunction {
    Msp,
    Maha,
    Energy,
    Cosine,
}

impl ScoreFunction {
    pub const ALL: [ScoreFunction; 4] = [Self::Msp, Self::Maha, Self::Energy, Self::Cosine];

    pub fn is_distance(self) -> bool {
        matches!(self, Self::Maha | Self::Cosine)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Msp => "msp",
            Self::Maha => "maha",
            Self::Energy => "energy",
            Self::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScoreFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown score function {s:?}")))
    }
}

/// `max_y softmax(logits)_y`.
pub fn msp_score(logits: &[f64]) -> f64 {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ_k exp(logit_k)`.
pub fn energy_score(logits: &[f64]) -> f64 {
    log_sum_exp(logits)
}

/// Class means with a shared, shrunk covariance for Mahalanobis scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBank {
    dim: usize,
    means: Vec<Vec<f64>>,
    covariance: Vec<f64>,
    precision: Vec<f64>,
    shrinkage: f64,
}

impl GaussianBank {
    /// Fits class means and the pooled within-class covariance
    /// `(1/N) Σ_i (z_i − μ_{y_i})(z_i − μ_{y_i})ᵀ + εI`.
    pub fn fit(latents: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        if latents.len() != labels.len() || latents.is_empty() {
            return Err(Error::Fit(format!(
                "{} latents for {} labels",
                latents.len(),
                labels.len()
            )));
        }
        let dim = latents[0].len();
        if dim == 0 || latents.iter().any(|z| z.len() != dim) {
            return Err(Error::Fit("latents must share a positive dimension".into()));
        }
        if latents.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Fit("non-finite latent".into()));
        }
        let mut counts = vec![0usize; num_classes];
        let mut means = vec![vec![0.0; dim]; num_classes];
        for (z, &y) in latents.iter().zip(labels) {
            if y >= num_classes {
                return Err(Error::Fit(format!("label {y} out of range for {num_classes} classes")));
            }
            counts[y] += 1;
            means[y].iter_mut().zip(z).for_each(|(m, v)| *m += v);
        }
        if let Some(k) = counts.iter().position(|&c| c < 2) {
            return Err(Error::Fit(format!(
                "class {k} has {} examples, need at least 2",
                counts[k]
            )));
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for (z, &y) in latents.iter().zip(labels) {
            centered
                .iter_mut()
                .zip(z.iter().zip(&means[y]))
                .for_each(|(c, (v, m))| *c = v - m);
            for i in 0..dim {
                let ci = centered[i];
                cov[i * dim..(i + 1) * dim]
                    .iter_mut()
                    .zip(&centered)
                    .for_each(|(s, &cj)| *s += ci * cj);
            }
        }
        let n = latents.len() as f64;
        cov.iter_mut().for_each(|v| *v /= n);
        for i in 0..dim {
            for j in 0..i {
                let s = 0.5 * (cov[i * dim + j] + cov[j * dim + i]);
                cov[i * dim + j] = s;
                cov[j * dim + i] = s;
            }
        }
        let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
        let scale = if trace > 0.0 { trace / dim as f64 } else { 1.0 };
        // Shrinking a well-posed Σ would break affine equivariance of the
        // distance, so εI is only added when some Cholesky pivot falls below
        // the smallest ladder rung.
        let floor = SHRINKAGE_LADDER[0] * scale;
        let unshrunk = cholesky(&cov, dim).filter(|l| (0..dim).all(|i| l[i * dim + i].powi(2) >= floor));
        if let Some(l) = unshrunk {
            let precision = cholesky_inverse(&l, dim);
            return Ok(Self {
                dim,
                means,
                covariance: cov,
                precision,
                shrinkage: 0.0,
            });
        }
        for coeff in SHRINKAGE_LADDER {
            let eps = coeff * scale;
            let mut shrunk = cov.clone();
            (0..dim).for_each(|i| shrunk[i * dim + i] += eps);
            if let Some(l) = cholesky(&shrunk, dim) {
                let precision = cholesky_inverse(&l, dim);
                return Ok(Self {
                    dim,
                    means,
                    covariance: shrunk,
                    precision,
                    shrinkage: eps,
                });
            }
        }
        Err(Error::Fit(format!(
            "covariance not positive definite even with shrinkage {}",
            SHRINKAGE_LADDER[SHRINKAGE_LADDER.len() - 1] * scale
        )))
    }

    /// Reassembles a bank from stored parts, refactoring the covariance.
    pub fn from_parts(dim: usize, means: Vec<Vec<f64>>, covariance: Vec<f64>, shrinkage: f64) -> Result<Self> {
        if covariance.len() != dim * dim || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Fit("inconsistent gaussian bank dimensions".into()));
        }
        let l = cholesky(&covariance, dim).ok_or_else(|| Error::Fit("stored covariance is not SPD".into()))?;
        let precision = cholesky_inverse(&l, dim);
        Ok(Self {
            dim,
            means,
            covariance,
            precision,
            shrinkage,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Shared covariance, shrinkage included.
    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// `(z − μ_k)ᵀ Σ⁻¹ (z − μ_k)`.
    pub fn mahalanobis(&self, z: &[f64], class: usize) -> f64 {
        let d: Vec<f64> = z.iter().zip(&self.means[class]).map(|(a, b)| a - b).collect();
        quadratic_form(&self.precision, &d)
    }

    /// `−min_k MD_k(z)`.
    pub fn score(&self, z: &[f64]) -> f64 {
        let min = (0..self.means.len())
            .map(|k| self.mahalanobis(z, k))
            .fold(f64::INFINITY, f64::min);
        -min
    }
}

/// Unit-normalised validation representations for cosine scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationBank {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

fn normalized(z: &[f64]) -> Option<Vec<f64>> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| z.iter().map(|v| v / norm).collect())
}

impl ValidationBank {
    /// Keeps at most `cap` representations, chosen by a seeded shuffle when
    /// there are more.
    pub fn build(latents: &[Vec<f64>], cap: usize, seed: u64) -> Result<Self> {
        if latents.is_empty() || cap == 0 {
            return Err(Error::Score("validation bank needs at least one row".into()));
        }
        let mut idx: Vec<usize> = (0..latents.len()).collect();
        if latents.len() > cap {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(cap);
            idx.sort_unstable();
        }
        let rows = idx
            .into_iter()
            .map(|i| {
                normalized(&latents[i]).ok_or_else(|| Error::Score(format!("validation latent {i} has zero norm")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    /// Wraps rows that are already unit-normalised.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Score("validation rows must share a positive dimension".into()));
        }
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `max_i cos(z, z_i)`.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        let u = normalized(z).ok_or_else(|| Error::Score("cosine score of a zero-norm vector".into()))?;
        Ok(self
            .rows
            .iter()
            .map(|r| r.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Scores every example under each requested function.
pub fn score_examples(
    functions: &[ScoreFunction],
    logits: &[Vec<f64>],
    representations: &[Vec<f64>],
    gaussian: &GaussianBank,
    validation: &ValidationBank,
) -> Result<BTreeMap<ScoreFunction, Vec<f64>>> {
    functions
        .iter()
        .map(|&f| {
            let scores = match f {
                ScoreFunction::Msp => logits.iter().map(|l| msp_score(l)).collect(),
                ScoreFunction::Energy => logits.iter().map(|l| energy_score(l)).collect(),
                ScoreFunction::Maha => representations.iter().map(|z| gaussian.score(z)).collect(),
                ScoreFunction::Cosine => representations
                    .iter()
                    .map(|z| validation.score(z))
                    .collect::<Result<Vec<_>>>()?,
            };
            Ok((f, scores))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msp_examples() {
        assert_eq!(msp_score(&[0.0, 0.0]), 0.5);
        assert!((msp_score(&[10.0, 0.0]) - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-15);
        assert!((msp_score(&[10.0, 0.0]) - 0.99995).abs() < 1e-5);
        assert_eq!(msp_score(&[1.5, -0.25, 3.0]), msp_score(&[8.5, 6.75, 10.0]));
    }

    #[test]
    fn energy_examples() {
        assert!((energy_score(&[1.0, 1.0]) - (1.0 + 2f64.ln())).abs() < 1e-12);
        assert!((energy_score(&[100.0, 0.0]) - 100.0).abs() < 1e-12);
        let e = energy_score(&[0.3, -1.2, 2.0]);
        assert!((energy_score(&[5.3, 3.8, 7.0]) - (e + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn single_class_square() {
        let z = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]];
        let bank = GaussianBank::fit(&z, &[0; 4], 1).unwrap();
        assert_eq!(bank.means()[0], vec![1.0, 1.0]);
        // Σ = diag(1, 1) is well posed, so no shrinkage is added.
        assert_eq!(bank.shrinkage(), 0.0);
        let c = bank.covariance();
        assert_eq!((c[0], c[3]), (1.0, 1.0));
        assert_eq!((c[1], c[2]), (0.0, 0.0));
    }

    #[test]
    fn euclidean_case() {
        let bank = GaussianBank::from_parts(2, vec![vec![0.0, 0.0]], vec![1.0, 0.0, 0.0, 1.0], 0.0).unwrap();
        assert_eq!(bank.score(&[3.0, 4.0]), -25.0);
        assert_eq!(bank.score(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn pooled_equals_shared_spread() {
        let base = [[-1.0, 0.5], [1.0, -0.5], [0.5, 1.0], [-0.5, -1.0]];
        let mut z = Vec::new();
        let mut y = Vec::new();
        for (k, shift) in [[0.0, 0.0], [10.0, -3.0]].iter().enumerate() {
            for b in &base {
                z.push(vec![b[0] + shift[0], b[1] + shift[1]]);
                y.push(k);
            }
        }
        let pooled = GaussianBank::fit(&z, &y, 2).unwrap();
        let single = GaussianBank::fit(&z[..4], &y[..4], 1).unwrap();
        for (a, b) in pooled.covariance().iter().zip(single.covariance()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_errors() {
        let z = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(matches!(GaussianBank::fit(&z, &[0, 0, 1], 2), Err(Error::Fit(_))));
        assert!(matches!(GaussianBank::fit(&z, &[0, 0, 5], 2), Err(Error::Fit(_))));
    }

    #[test]
    fn rank_deficient_covariance_is_shrunk() {
        // All spread along the first axis: Σ is singular without shrinkage.
        let z = vec![vec![0.0, 1.0], vec![2.0, 1.0], vec![4.0, 1.0]];
        let bank = GaussianBank::fit(&z, &[0, 0, 0], 1).unwrap();
        // Σ = diag(8/3, 0) and trace/d = 4/3, so the first rung succeeds.
        assert!((bank.shrinkage() - 1e-6 * 4.0 / 3.0).abs() < 1e-18);
        assert!(bank.score(&[2.0, 1.0]).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let bank = ValidationBank::build(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]], 10, 0).unwrap();
        assert!((bank.score(&[0.0, 5.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bank.score(&[0.0, 0.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(bank.score(&[0.0; 3]), Err(Error::Score(_))));
        for r in bank.rows() {
            assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_bank_caps_deterministically() {
        let z: Vec<Vec<f64>> = (1..=50).map(|i| vec![i as f64, 1.0]).collect();
        let a = ValidationBank::build(&z, 10, 3).unwrap();
        let b = ValidationBank::build(&z, 10, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
    }

    #[test]
    fn parse_function_names() {
        assert_eq!("Maha".parse::<ScoreFunction>().unwrap(), ScoreFunction::Maha);
        assert!("odin".parse::<ScoreFunction>().is_err());
    }
}
