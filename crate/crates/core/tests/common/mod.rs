#![allow(dead_code)]

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ood_core::autodiff::Tensor;
use ood_core::encoder::EncoderConfig;
use ood_core::harness::synthetic::{write_synthetic, SyntheticSpec};
use ood_core::harness::{load_dataset, Dataset, RunConfig};
use ood_core::scoring::GaussianBank;
use ood_core::vi_head::ViHeadConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn tiny_encoder(layers: usize, d_model: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        d_model,
        heads: 2,
        ffn_dim: 2 * d_model,
        max_len: 64,
        ..Default::default()
    }
}

pub fn tiny_head(latent_dim: usize, num_classes: usize) -> ViHeadConfig {
    ViHeadConfig {
        latent_dim,
        decoder_hidden: 8,
        num_classes,
        anneal_fraction: 0.5,
    }
}

/// Small but learnable synthetic task written under `dir`.
pub fn small_dataset(dir: &Path, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        train: 160,
        val: 40,
        test: 60,
        ood: 60,
        seed,
        ..Default::default()
    };
    load_dataset(&write_synthetic(dir, &spec).unwrap()).unwrap()
}

/// A fast 64-bit run configuration for harness tests.
pub fn small_run(seed: u64) -> RunConfig {
    RunConfig {
        encoder: EncoderConfig {
            layers: 3,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            max_len: 32,
            ..Default::default()
        },
        head: ViHeadConfig {
            latent_dim: 4,
            decoder_hidden: 16,
            ..Default::default()
        },
        epochs: 3,
        learning_rate: 3e-3,
        batch_size: 16,
        seed,
        precision: ood_core::autodiff::DType::F64,
        ..Default::default()
    }
}

/// Mean over all (ID, OOD) pairs of 1 / ½ / 0.
pub fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in id {
        for &b in ood {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / 2.0 / (id.len() * ood.len()) as f64
}

/// Sweeps every observed score as a threshold and keeps the largest one
/// that admits at least 95% of ID scores.
pub fn brute_far95(id: &[f64], ood: &[f64]) -> f64 {
    let mut best: Option<f64> = None;
    for &t in id.iter().chain(ood) {
        let tp = id.iter().filter(|&&s| s >= t).count();
        if 100 * tp >= 95 * id.len() && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the minimum score always qualifies");
    ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64
}

/// Builds the precision-recall staircase from scratch: for each distinct
/// threshold (descending), recall step times precision at that threshold.
pub fn brute_aupr(id: &[f64], ood: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = id.iter().filter(|&&s| s >= t).count() as f64;
        let fp = ood.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / id.len() as f64;
        if tp + fp > 0.0 {
            area += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    area
}

pub fn brute_accuracy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut correct = 0;
    for (row, &y) in logits.iter().zip(labels) {
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        correct += usize::from(best == y);
    }
    correct as f64 / labels.len() as f64
}

/// Random score pairs with values drawn from a small grid so ties occur.
pub fn tied_scores(rng: &mut impl Rng, max_len: usize) -> (Vec<f64>, Vec<f64>) {
    let n1 = rng.random_range(1..=max_len);
    let n0 = rng.random_range(1..=max_len);
    let grid = rng.random_range(3..40);
    let shift = rng.random_range(0..grid / 2 + 1);
    let id = (0..n1).map(|_| rng.random_range(0..grid) as f64 / 4.0).collect();
    let ood = (0..n0)
        .map(|_| rng.random_range(0..grid) as f64 / 4.0 - shift as f64 / 8.0)
        .collect();
    (id, ood)
}

/// Gaussian classes around random centers with a near-identity spread.
pub fn well_conditioned_cloud(r: &mut impl Rng, n: usize, k: usize, d: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| r.random_range(-3.0..3.0)).collect())
        .collect();
    let mix = DMatrix::<f64>::from_fn(d, d, |_, _| r.random_range(-0.2..0.2)) + DMatrix::identity(d, d);
    let latents = (0..n)
        .map(|i| {
            let e = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(r));
            (&mix * e).iter().zip(&centers[i % k]).map(|(a, c)| a + c).collect()
        })
        .collect();
    (latents, (0..n).map(|i| i % k).collect())
}

/// Random invertible map `Q₁ · diag(σ) · Q₂` with singular values spread
/// log-uniformly so that the condition number is at most `kappa`.
pub fn conditioned_map(r: &mut impl Rng, d: usize, kappa: f64) -> DMatrix<f64> {
    let mut orth = || {
        DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut *r))
            .qr()
            .q()
    };
    let (q1, q2) = (orth(), orth());
    let half = kappa.ln() / 2.0;
    let sv = DVector::<f64>::from_fn(d, |i, _| {
        let t = if d == 1 {
            0.0
        } else {
            i as f64 / (d - 1) as f64 * 2.0 - 1.0
        };
        (t * half).exp()
    });
    q1 * DMatrix::from_diagonal(&sv) * q2
}

pub fn worst_affine_change(seed: u64, kappa: f64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let d = 2 + trial % 7;
        // Well-conditioned within-class spread; the scored points are fresh
        // draws from the same classes, as test latents would be.
        let (cloud, labels) = well_conditioned_cloud(&mut r, 400, 2, d);
        let (latents, probes) = cloud.split_at(300);
        let labels = &labels[..300];
        let a = conditioned_map(&mut r, d, kappa);
        let shift = DVector::<f64>::from_fn(d, |_, _| r.random_range(-2.0..2.0));
        let map = |x: &[f64]| -> Vec<f64> { (&a * DVector::from_column_slice(x) + &shift).iter().copied().collect() };
        let mapped: Vec<Vec<f64>> = latents.iter().map(|x| map(x)).collect();
        let before = GaussianBank::fit(latents, labels, 2).unwrap();
        let after = GaussianBank::fit(&mapped, labels, 2).unwrap();
        for z in probes {
            worst = worst.max((before.score(z) - after.score(&map(z))).abs());
        }
    }
    worst
}
