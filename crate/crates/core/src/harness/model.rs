use rand::Rng;

use crate::autodiff::{ParamStore, Real, Tape, Var};
use crate::encoder::{stacks_from, Encoder, HiddenStack, TokenBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::vi_head::{BaselineHead, CombinationVector, LossBreakdown, Noise, ViHead};

use super::config::{Objective, RunConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Joint(ViHead),
    Discriminative(BaselineHead),
}

/// Encoder plus head, with all parameters in one store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub head: Head,
}

/// Per-example outputs of one inference pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inference {
    pub logits: Vec<Vec<f64>>,
    /// Input to the distance scores: `z` for the joint head, the last
    /// `[CLS]` state for the baseline.
    pub representations: Vec<Vec<f64>>,
    pub hidden: Vec<HiddenStack>,
}

impl Inference {
    fn extend(&mut self, other: Inference) {
        self.logits.extend(other.logits);
        self.representations.extend(other.representations);
        self.hidden.extend(other.hidden);
    }
}

fn rows<T: Real>(tape: &Tape<T>, v: Var) -> Vec<Vec<f64>> {
    let cols = *tape.shape(v).last().expect("2-d value");
    tape.value(v)
        .chunks(cols)
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect()
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialised model. `cfg.head.num_classes` must be set.
    pub fn new<R: Rng>(cfg: &RunConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&cfg.encoder, vocab_size, &mut store, rng)?;
        let head = match cfg.objective {
            Objective::Joint => Head::Joint(ViHead::new(&cfg.head, &cfg.encoder, &mut store, rng)?),
            Objective::Discriminative => {
                Head::Discriminative(BaselineHead::new(cfg.head.num_classes, &cfg.encoder, &mut store, rng)?)
            }
        };
        Ok(Self { store, encoder, head })
    }

    pub fn objective(&self) -> Objective {
        match self.head {
            Head::Joint(_) => Objective::Joint,
            Head::Discriminative(_) => Objective::Discriminative,
        }
    }

    pub fn combination(&self) -> Option<CombinationVector> {
        match &self.head {
            Head::Joint(h) => Some(h.combination_vector(&self.store)),
            Head::Discriminative(_) => None,
        }
    }

    /// Training loss for one batch. The baseline reports zero
    /// reconstruction and KL terms.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        batch: &TokenBatch,
        labels: &[usize],
        step: usize,
        total_steps: usize,
        noise: &mut Noise,
    ) -> Result<(Var, LossBreakdown)> {
        let encoded = self.encoder.forward(tape, &self.store, batch)?;
        match &self.head {
            Head::Joint(h) => {
                let l = h.loss(tape, &self.store, &encoded, labels, step, total_steps, noise)?;
                Ok((l.total, l.breakdown))
            }
            Head::Discriminative(h) => {
                let (ce, _) = h.loss(tape, &self.store, &encoded, labels)?;
                let v = tape.scalar(ce)?.as_f64();
                Ok((
                    ce,
                    LossBreakdown {
                        total: v,
                        ce: v,
                        ..Default::default()
                    },
                ))
            }
        }
    }

    pub fn infer_batch(&self, batch: &TokenBatch, noise: &mut Noise) -> Result<Inference> {
        let mut tape = Tape::new();
        let encoded = self.encoder.forward(&mut tape, &self.store, batch)?;
        let (logits, repr) = match &self.head {
            Head::Joint(h) => {
                let post = h.posterior(&mut tape, &self.store, encoded.last(), noise)?;
                (h.classify(&mut tape, &self.store, post.z)?, post.z)
            }
            Head::Discriminative(h) => (h.logits(&mut tape, &self.store, encoded.last())?, encoded.last()),
        };
        Ok(Inference {
            logits: rows(&tape, logits),
            representations: rows(&tape, repr),
            hidden: stacks_from(&tape, &encoded, batch.batch(), self.encoder.config().d_model),
        })
    }

    /// Runs `texts` through the model in order, `batch_size` at a time.
    pub fn infer(
        &self,
        texts: &[String],
        vocab: &Vocabulary,
        batch_size: usize,
        noise: &mut Noise,
    ) -> Result<Inference> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut out = Inference::default();
        for chunk in texts.chunks(batch_size) {
            let batch = TokenBatch::from_texts(chunk.iter().map(String::as_str), vocab, self.encoder.config().max_len)?;
            out.extend(self.infer_batch(&batch, noise)?);
        }
        Ok(out)
    }
}

/// A model at either supported precision.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// Evaluates `$body` with `$m` bound to the concrete `Model<T>`.
#[macro_export]
macro_rules! with_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            $crate::harness::AnyModel::F32($m) => $body,
            $crate::harness::AnyModel::F64($m) => $body,
        }
    };
}

impl AnyModel {
    pub fn objective(&self) -> Objective {
        with_model!(self, m => m.objective())
    }

    pub fn combination(&self) -> Option<CombinationVector> {
        with_model!(self, m => m.combination())
    }

    pub fn infer(
        &self,
        texts: &[String],
        vocab: &Vocabulary,
        batch_size: usize,
        noise: &mut Noise,
    ) -> Result<Inference> {
        with_model!(self, m => m.infer(texts, vocab, batch_size, noise))
    }

    pub fn layers(&self) -> usize {
        with_model!(self, m => m.encoder.config().layers)
    }
}
