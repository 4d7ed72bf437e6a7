use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamW, DType, Real, Tape};
use crate::encoder::TokenBatch;
use crate::error::{Error, Result};
use crate::scoring::{GaussianBank, ValidationBank, VALIDATION_BANK_CAP};
use crate::vi_head::{LossBreakdown, Noise};

use super::checkpoint::Checkpoint;
use super::config::{Objective, RunConfig};
use super::data::Dataset;
use super::model::{AnyModel, Model};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const INFERENCE_STREAM: u64 = 3;
const BANK_STREAM: u64 = 4;

/// Independent generator for one purpose. Separate streams keep batch
/// order identical across objectives that consume different amounts of
/// initialisation or noise randomness.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Noise for one inference pass over a dataset. Each pass restarts the
/// same stream, so the same texts in the same order receive the same `ε`.
pub fn inference_noise(cfg: &RunConfig) -> Noise {
    if cfg.deterministic_inference {
        Noise::Zero
    } else {
        Noise::Gaussian(rng_stream(cfg.seed, INFERENCE_STREAM))
    }
}

pub(crate) fn bank_seed(seed: u64) -> u64 {
    use rand::RngCore;
    rng_stream(seed, BANK_STREAM).next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-mean loss terms over the epoch.
    pub loss: LossBreakdown,
    /// Layer-combination weights at the end of the epoch (joint only).
    pub combination_weights: Option<Vec<f64>>,
    /// Digest of the example order used this epoch.
    pub batch_order: String,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub objective: Objective,
    pub precision: DType,
    pub vocab_hash: String,
    pub epochs: Vec<EpochLog>,
}

fn order_digest(order: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in order {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.total += p.total / n;
        m.ce += p.ce / n;
        m.recon += p.recon / n;
        m.kl += p.kl / n;
        m.beta += p.beta / n;
    }
    m
}

fn batch_diagnostic(data: &Dataset, idx: &[usize], batch: &TokenBatch) -> String {
    let shown: Vec<String> = idx
        .iter()
        .take(4)
        .map(|&i| format!("#{i} {:?}", data.train.texts[i]))
        .collect();
    format!(
        "batch of {} (seq {}), first examples: {}",
        idx.len(),
        batch.seq(),
        shown.join(", ")
    )
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Model<T>, Vec<EpochLog>)> {
    let mut init = rng_stream(cfg.seed, INIT_STREAM);
    let mut shuffle = rng_stream(cfg.seed, SHUFFLE_STREAM);
    let mut noise = Noise::Gaussian(rng_stream(cfg.seed, NOISE_STREAM));
    let mut model = Model::<T>::new(cfg, data.vocab.len(), &mut init)?;
    let mut opt = AdamW::new(&model.store, cfg.learning_rate, cfg.weight_decay);

    let n = data.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut parts = Vec::with_capacity(per_epoch);
        let mut lr = cfg.learning_rate;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let texts = idx.iter().map(|&i| data.train.texts[i].as_str());
            let batch = TokenBatch::from_texts(texts, &data.vocab, cfg.encoder.max_len)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let abort = |e: Error| {
                Error::Numeric(format!(
                    "training aborted at epoch {epoch}, batch {b}: {e}; {}",
                    batch_diagnostic(data, idx, &batch)
                ))
            };
            let mut tape = Tape::new();
            let (loss, breakdown) = model
                .loss(&mut tape, &batch, &labels, step, total_steps, &mut noise)
                .map_err(|e| match e {
                    Error::Numeric(_) => abort(e),
                    other => other,
                })?;
            if !breakdown.total.is_finite() {
                return Err(abort(Error::Numeric(format!("loss {breakdown:?}"))));
            }
            model.store.zero_grad();
            tape.backward(loss, &mut model.store).map_err(|e| match e {
                Error::Numeric(_) => abort(e),
                other => other,
            })?;
            lr = cfg.learning_rate * (1.0 - step as f64 / total_steps as f64);
            opt.lr = lr;
            opt.step(&mut model.store)?;
            parts.push(breakdown);
            step += 1;
        }
        let log = EpochLog {
            epoch,
            loss: mean_breakdown(&parts),
            combination_weights: model.combination().map(|c| c.weights()),
            batch_order: order_digest(&order),
            learning_rate: lr,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

fn fit_banks(model: &AnyModel, cfg: &RunConfig, data: &Dataset) -> Result<(GaussianBank, ValidationBank)> {
    let train = model.infer(
        &data.train.texts,
        &data.vocab,
        cfg.batch_size,
        &mut inference_noise(cfg),
    )?;
    let gaussian = GaussianBank::fit(&train.representations, &data.train.labels, data.num_classes())?;
    let val = model.infer(&data.val.texts, &data.vocab, cfg.batch_size, &mut inference_noise(cfg))?;
    let validation = ValidationBank::build(&val.representations, VALIDATION_BANK_CAP, bank_seed(cfg.seed))?;
    Ok((gaussian, validation))
}

/// Refits both banks under the checkpoint's current inference mode.
pub fn refit_banks(ckpt: &mut Checkpoint, data: &Dataset) -> Result<()> {
    super::evaluate::check_compatible(ckpt, data)?;
    let (g, v) = fit_banks(&ckpt.model, &ckpt.config, data)?;
    ckpt.gaussian = g;
    ckpt.validation = v;
    Ok(())
}

/// Trains a model, then fits the Gaussian bank on training representations
/// and the validation bank on validation representations.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<(Checkpoint, TrainLog)> {
    train_with(cfg, data, &mut |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    cfg: &RunConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, TrainLog)> {
    let mut cfg = cfg.clone();
    cfg.head.num_classes = data.num_classes();
    cfg.validate()?;
    if cfg.objective == Objective::Joint {
        cfg.head.validate()?;
    }
    let (model, epochs) = match cfg.precision {
        DType::F32 => {
            let (m, l) = train_typed::<f32>(&cfg, data, on_epoch)?;
            (AnyModel::F32(m), l)
        }
        DType::F64 => {
            let (m, l) = train_typed::<f64>(&cfg, data, on_epoch)?;
            (AnyModel::F64(m), l)
        }
    };
    let (gaussian, validation) = fit_banks(&model, &cfg, data)?;
    let log = TrainLog {
        seed: cfg.seed,
        objective: cfg.objective,
        precision: cfg.precision,
        vocab_hash: data.vocab.hash(),
        epochs,
    };
    let ckpt = Checkpoint {
        config: cfg,
        labels: data.labels.clone(),
        vocab: data.vocab.clone(),
        model,
        gaussian,
        validation,
    };
    Ok((ckpt, log))
}

/// A checkpoint for an untrained model: parameters at initialisation and
/// banks fitted on the initial representations.
pub fn untrained(cfg: &RunConfig, data: &Dataset) -> Result<Checkpoint> {
    let mut c = cfg.clone();
    c.head.num_classes = data.num_classes();
    c.validate()?;
    let mut init = rng_stream(c.seed, INIT_STREAM);
    let model = match c.precision {
        DType::F32 => AnyModel::F32(Model::new(&c, data.vocab.len(), &mut init)?),
        DType::F64 => AnyModel::F64(Model::new(&c, data.vocab.len(), &mut init)?),
    };
    let (gaussian, validation) = fit_banks(&model, &c, data)?;
    Ok(Checkpoint {
        config: c,
        labels: data.labels.clone(),
        vocab: data.vocab.clone(),
        model,
        gaussian,
        validation,
    })
}
