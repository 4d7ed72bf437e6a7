//! Variational head trained on top of the encoder.
//!
//! The head models `p(x, y)` through a latent `z`:
//!
//! - posterior `q(z | x) = N(μ, diag σ²)`, with `μ` and `log σ²` produced by
//!   two separate affine maps of the last `[CLS]` state;
//! - prior `p(z) = N(0, I)`;
//! - decoder `p(x_target | z)`, a single feed-forward block whose Gaussian
//!   unit-variance likelihood reduces to mean squared error;
//! - classifier `p(y | z)`, one affine map to `K` logits.
//!
//! The reconstruction target is a convex combination of all `[CLS]` states,
//! weighted by the softmax of a learnable logit vector. Training minimises
//! `ce + β · (recon + kl)` where `β` rises linearly from 0 to 1.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::encoder::{EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::layers::Linear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViHeadConfig {
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    /// Number of ID classes; 0 means "take it from the training data".
    pub num_classes: usize,
    /// Fraction of all training steps over which β ramps from 0 to 1.
    pub anneal_fraction: f64,
}

impl Default for ViHeadConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            decoder_hidden: 128,
            num_classes: 0,
            anneal_fraction: 0.5,
        }
    }
}

impl ViHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.latent_dim == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("latent and decoder dims must be positive".into()));
        }
        if !(self.anneal_fraction >= 0.0 && self.anneal_fraction.is_finite()) {
            return Err(Error::Config(format!(
                "anneal_fraction must be a non-negative number, got {}",
                self.anneal_fraction
            )));
        }
        Ok(())
    }
}

/// KL annealing weight: `min(1, step / (fraction · total_steps))`.
pub fn anneal_beta(step: usize, total_steps: usize, fraction: f64) -> f64 {
    let horizon = fraction * total_steps as f64;
    if horizon <= 0.0 {
        return 1.0;
    }
    (step as f64 / horizon).clamp(0.0, 1.0)
}

/// Raw logits of the layer-combination vector and the simplex weights they
/// induce.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationVector {
    pub logits: Vec<f64>,
}

impl CombinationVector {
    pub fn weights(&self) -> Vec<f64> {
        let mut w = self.logits.clone();
        softmax_in_place(&mut w);
        w
    }
}

/// One example's diagonal-Gaussian posterior and the sample drawn from it.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
}

impl VariationalPosterior {
    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − log σ²)`.
pub fn kl_to_standard_normal(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Source of the reparameterisation noise `ε`.
#[derive(Clone, Debug)]
pub enum Noise {
    /// Standard normal draws; exactly one `ε` per example per pass.
    Gaussian(ChaCha8Rng),
    /// `ε = 0`, so `z = μ`. Deterministic inference mode.
    Zero,
    /// The same `ε` (length `latent_dim`) for every row.
    Fixed(Vec<f64>),
}

impl Noise {
    fn draw<T: Real>(&mut self, rows: usize, dim: usize) -> Result<Vec<T>> {
        match self {
            Noise::Gaussian(rng) => Ok((0..rows * dim).map(|_| T::of(StandardNormal.sample(rng))).collect()),
            Noise::Zero => Ok(vec![T::zero(); rows * dim]),
            Noise::Fixed(eps) if eps.len() == dim => {
                Ok((0..rows).flat_map(|_| eps.iter().map(|&e| T::of(e))).collect())
            }
            Noise::Fixed(eps) => Err(Error::Shape {
                op: "noise",
                lhs: vec![dim],
                rhs: vec![eps.len()],
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
}

/// Tape handles of a batched posterior pass.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
}

/// Everything a joint-objective loss evaluation produces.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub posterior: PosteriorVars,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decoder {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViHead {
    cfg: ViHeadConfig,
    layers: usize,
    d_model: usize,
    pub combination: ParamId,
    pub mu: Linear,
    pub log_var: Linear,
    pub decoder: Decoder,
    pub classifier: Linear,
}

impl ViHead {
    pub fn new<T: Real, R: Rng>(
        cfg: &ViHeadConfig,
        encoder: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, dz) = (encoder.d_model, cfg.latent_dim);
        let combination = store.add("head.combination", Tensor::zeros(&[encoder.layers]));
        Ok(Self {
            cfg: cfg.clone(),
            layers: encoder.layers,
            d_model: d,
            combination,
            mu: Linear::new(store, "head.posterior.mu", d, dz, rng),
            log_var: Linear::new(store, "head.posterior.log_var", d, dz, rng),
            decoder: Decoder {
                hidden: Linear::new(store, "head.decoder.hidden", dz, cfg.decoder_hidden, rng),
                out: Linear::new(store, "head.decoder.out", cfg.decoder_hidden, d, rng),
            },
            classifier: Linear::new(store, "head.classifier", dz, cfg.num_classes, rng),
        })
    }

    pub fn config(&self) -> &ViHeadConfig {
        &self.cfg
    }

    pub fn combination_vector<T: Real>(&self, store: &ParamStore<T>) -> CombinationVector {
        CombinationVector {
            logits: store.get(self.combination).data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Softmax weights `s` as a `[1, L]` tape value.
    pub fn combination_weights<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let raw = tape.param(store, self.combination)?;
        let raw = tape.reshape(raw, &[1, self.layers])?;
        tape.softmax(raw)
    }

    /// `x_target = Σ_l s_l · h_l` over per-layer `[B, d]` states.
    pub fn build_target<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, layers: &[Var]) -> Result<Var> {
        if layers.len() != self.layers {
            return Err(Error::Shape {
                op: "build_target",
                lhs: vec![self.layers],
                rhs: vec![layers.len()],
            });
        }
        let s = self.combination_weights(tape, store)?;
        combine_layers(tape, s, layers)
    }

    pub fn posterior<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        last_hidden: Var,
        noise: &mut Noise,
    ) -> Result<PosteriorVars> {
        let mu = self.mu.forward(tape, store, last_hidden)?;
        let log_var = self.log_var.forward(tape, store, last_hidden)?;
        let shape = tape.shape(mu).to_vec();
        let eps = Tensor::new(&shape, noise.draw::<T>(shape[0], self.cfg.latent_dim)?)?;
        let eps = tape.constant(&eps)?;
        let half = tape.scale(log_var, T::of(0.5))?;
        let sigma = tape.exp(half)?;
        let noise_term = tape.mul(sigma, eps)?;
        let z = tape.add(mu, noise_term)?;
        Ok(PosteriorVars { mu, log_var, z })
    }

    /// Batch mean of the closed-form KL to the standard normal prior.
    pub fn kl<T: Real>(&self, tape: &mut Tape<T>, post: &PosteriorVars) -> Result<Var> {
        let rows = tape.shape(post.mu)[0];
        let mu2 = tape.mul(post.mu, post.mu)?;
        let var = tape.exp(post.log_var)?;
        let t = tape.add(mu2, var)?;
        let t = tape.sub(t, post.log_var)?;
        let t = tape.add_scalar(t, -T::one())?;
        let s = tape.sum(t)?;
        tape.scale(s, T::of(0.5 / rows as f64))
    }

    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let h = self.decoder.hidden.forward(tape, store, z)?;
        let h = tape.gelu(h)?;
        self.decoder.out.forward(tape, store, h)
    }

    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        self.classifier.forward(tape, store, z)
    }

    /// Negative ELBO with annealed unsupervised terms. A single `z` sample
    /// feeds both the decoder and the classifier.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encoded: &EncoderOutput,
        labels: &[usize],
        step: usize,
        total_steps: usize,
        noise: &mut Noise,
    ) -> Result<JointLoss> {
        let beta = anneal_beta(step, total_steps, self.cfg.anneal_fraction);
        self.loss_with_beta(tape, store, encoded, labels, beta, noise)
    }

    pub fn loss_with_beta<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encoded: &EncoderOutput,
        labels: &[usize],
        beta: f64,
        noise: &mut Noise,
    ) -> Result<JointLoss> {
        let posterior = self.posterior(tape, store, encoded.last(), noise)?;
        let logits = self.classify(tape, store, posterior.z)?;
        let ce = tape.cross_entropy(logits, labels)?;
        let target = self.build_target(tape, store, &encoded.layers)?;
        let recon_x = self.decode(tape, store, posterior.z)?;
        let recon = tape.mse(recon_x, target)?;
        let kl = self.kl(tape, &posterior)?;
        let unsup = tape.add(recon, kl)?;
        let weighted = tape.scale(unsup, T::of(beta))?;
        let total = tape.add(ce, weighted)?;
        let breakdown = LossBreakdown {
            total: tape.scalar(total)?.as_f64(),
            ce: tape.scalar(ce)?.as_f64(),
            recon: tape.scalar(recon)?.as_f64(),
            kl: tape.scalar(kl)?.as_f64(),
            beta: T::of(beta).as_f64(),
        };
        Ok(JointLoss {
            total,
            breakdown,
            posterior,
            logits,
        })
    }
}

/// Weighted sum of per-layer `[B, d]` states with `[1, L]` weights, computed
/// as one `[1, L] · [L, B·d]` product.
pub fn combine_layers<T: Real>(tape: &mut Tape<T>, weights: Var, layers: &[Var]) -> Result<Var> {
    let shape = tape.shape(layers[0]).to_vec();
    let stacked = tape.concat(layers)?;
    let stacked = tape.reshape(stacked, &[layers.len(), shape.iter().product()])?;
    let mixed = tape.matmul(weights, stacked)?;
    tape.reshape(mixed, &shape)
}

/// Discriminative baseline: a single affine classifier on the last `[CLS]`
/// state, trained with plain cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineHead {
    pub classifier: Linear,
}

impl BaselineHead {
    pub fn new<T: Real, R: Rng>(
        num_classes: usize,
        encoder: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(Self {
            classifier: Linear::new(store, "head.classifier", encoder.d_model, num_classes, rng),
        })
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, last_hidden: Var) -> Result<Var> {
        self.classifier.forward(tape, store, last_hidden)
    }

    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encoded: &EncoderOutput,
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        let logits = self.logits(tape, store, encoded.last())?;
        let ce = tape.cross_entropy(logits, labels)?;
        Ok((ce, logits))
    }
}
