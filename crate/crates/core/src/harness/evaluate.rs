use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::DType;
use crate::error::{Error, Result};
use crate::metrics::{aupr, auroc, far_at_95, id_accuracy, ScoredSet};
use crate::scoring::{score_examples, GaussianBank, ScoreFunction, ValidationBank, VALIDATION_BANK_CAP};

use super::checkpoint::Checkpoint;
use super::config::Objective;
use super::data::Dataset;
use super::model::Inference;
use super::train::{bank_seed, inference_noise};

/// AUROC, FAR@95 and AUPR, all in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub auroc: f64,
    pub far95: f64,
    pub aupr: f64,
}

impl MetricTriple {
    pub fn of(set: &ScoredSet) -> Self {
        Self {
            auroc: 100.0 * auroc(set),
            far95: 100.0 * far_at_95(set),
            aupr: 100.0 * aupr(set),
        }
    }

    fn mean(items: &[MetricTriple]) -> Self {
        let n = items.len() as f64;
        Self {
            auroc: items.iter().map(|m| m.auroc).sum::<f64>() / n,
            far95: items.iter().map(|m| m.far95).sum::<f64>() / n,
            aupr: items.iter().map(|m| m.aupr).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub ood_set: String,
    pub function: ScoreFunction,
    #[serde(flatten)]
    pub metrics: MetricTriple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub function: ScoreFunction,
    #[serde(flatten)]
    pub metrics: MetricTriple,
}

/// Cosine AUROC under both sign conventions, kept for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineOrientation {
    pub ood_set: String,
    pub max_cosine_auroc: f64,
    pub negated_max_cosine_auroc: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub objective: Objective,
    pub precision: DType,
    pub deterministic_inference: bool,
    pub vocab_hash: String,
    /// ID test accuracy in percent.
    pub id_accuracy: f64,
    pub cells: Vec<Cell>,
    /// Per score function, the mean over OOD sets.
    pub averages: Vec<Average>,
    pub combination_weights: Option<Vec<f64>>,
    pub cosine_orientation: Vec<CosineOrientation>,
    /// Wall-clock only; not part of reproducibility comparisons.
    pub timing: Timing,
}

impl EvalReport {
    /// The report with timing zeroed, for equality checks across runs.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }

    pub fn cell(&self, ood_set: &str, function: ScoreFunction) -> Option<&MetricTriple> {
        self.cells
            .iter()
            .find(|c| c.ood_set == ood_set && c.function == function)
            .map(|c| &c.metrics)
    }

    pub fn average(&self, function: ScoreFunction) -> Option<&MetricTriple> {
        self.averages
            .iter()
            .find(|a| a.function == function)
            .map(|a| &a.metrics)
    }
}

pub(crate) fn check_compatible(ckpt: &Checkpoint, data: &Dataset) -> Result<()> {
    if ckpt.vocab_hash() != data.vocab.hash() {
        return Err(Error::Compat(format!(
            "vocabulary hash {} differs from the data's {}",
            ckpt.vocab_hash(),
            data.vocab.hash()
        )));
    }
    if ckpt.labels != data.labels {
        return Err(Error::Compat(format!(
            "checkpoint labels {:?} differ from the data's {:?}",
            ckpt.labels, data.labels
        )));
    }
    Ok(())
}

fn pass(ckpt: &Checkpoint, texts: &[String]) -> Result<Inference> {
    let cfg = &ckpt.config;
    ckpt.model
        .infer(texts, &ckpt.vocab, cfg.batch_size, &mut inference_noise(cfg))
}

/// Cells for every (OOD set, function) pair given per-example scores.
fn score_cells(
    functions: &[ScoreFunction],
    id: &Inference,
    ood: &[(String, Inference)],
    gaussian: &GaussianBank,
    validation: &ValidationBank,
) -> Result<(Vec<Cell>, Vec<CosineOrientation>)> {
    let id_scores = score_examples(functions, &id.logits, &id.representations, gaussian, validation)?;
    let mut cells = Vec::new();
    let mut orientation = Vec::new();
    for (name, out) in ood {
        let ood_scores = score_examples(functions, &out.logits, &out.representations, gaussian, validation)?;
        for &f in functions {
            let set = ScoredSet::new(id_scores[&f].clone(), ood_scores[&f].clone())?;
            cells.push(Cell {
                ood_set: name.clone(),
                function: f,
                metrics: MetricTriple::of(&set),
            });
            if f == ScoreFunction::Cosine {
                let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
                let flipped = ScoredSet::new(neg(&id_scores[&f]), neg(&ood_scores[&f]))?;
                orientation.push(CosineOrientation {
                    ood_set: name.clone(),
                    max_cosine_auroc: 100.0 * auroc(&set),
                    negated_max_cosine_auroc: 100.0 * auroc(&flipped),
                });
            }
        }
    }
    Ok((cells, orientation))
}

fn averages(functions: &[ScoreFunction], cells: &[Cell]) -> Vec<Average> {
    functions
        .iter()
        .filter_map(|&f| {
            let items: Vec<MetricTriple> = cells.iter().filter(|c| c.function == f).map(|c| c.metrics).collect();
            (!items.is_empty()).then(|| Average {
                function: f,
                metrics: MetricTriple::mean(&items),
            })
        })
        .collect()
}

/// Scores the ID test split against every OOD set under each enabled
/// function.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset) -> Result<EvalReport> {
    let started = Instant::now();
    check_compatible(ckpt, data)?;
    let cfg = &ckpt.config;
    let id = pass(ckpt, &data.test.texts)?;
    let ood = data
        .ood
        .iter()
        .map(|s| Ok((s.name.clone(), pass(ckpt, &s.texts)?)))
        .collect::<Result<Vec<_>>>()?;
    let (cells, cosine_orientation) = score_cells(&cfg.score_functions, &id, &ood, &ckpt.gaussian, &ckpt.validation)?;
    Ok(EvalReport {
        seed: cfg.seed,
        objective: ckpt.model.objective(),
        precision: ckpt.dtype(),
        deterministic_inference: cfg.deterministic_inference,
        vocab_hash: ckpt.vocab_hash(),
        id_accuracy: 100.0 * id_accuracy(&id.logits, &data.test.labels)?,
        averages: averages(&cfg.score_functions, &cells),
        cells,
        combination_weights: ckpt.model.combination().map(|c| c.weights()),
        cosine_orientation,
        timing: Timing {
            seconds: started.elapsed().as_secs_f64(),
        },
    })
}

/// Distance-score AUROC (percent) of one layer's `[CLS]` state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub cells: Vec<Cell>,
    pub averages: Vec<Average>,
}

/// Fits distance banks on each layer's `[CLS]` states and scores the ID
/// test split against every OOD set. Logit scores are not probed, since
/// the classifier reads a single representation.
pub fn probe_layers(ckpt: &Checkpoint, data: &Dataset) -> Result<Vec<ProbeRow>> {
    check_compatible(ckpt, data)?;
    let functions = [ScoreFunction::Maha, ScoreFunction::Cosine];
    let train = pass(ckpt, &data.train.texts)?;
    let val = pass(ckpt, &data.val.texts)?;
    let test = pass(ckpt, &data.test.texts)?;
    let ood = data
        .ood
        .iter()
        .map(|s| Ok((s.name.clone(), pass(ckpt, &s.texts)?)))
        .collect::<Result<Vec<_>>>()?;
    let layer_view = |inf: &Inference, l: usize| Inference {
        logits: Vec::new(),
        representations: inf.hidden.iter().map(|h| h.layer(l).to_vec()).collect(),
        hidden: Vec::new(),
    };
    (0..ckpt.model.layers())
        .map(|l| {
            let tr = layer_view(&train, l);
            let gaussian = GaussianBank::fit(&tr.representations, &data.train.labels, data.num_classes())?;
            let validation = ValidationBank::build(
                &layer_view(&val, l).representations,
                VALIDATION_BANK_CAP,
                bank_seed(ckpt.config.seed),
            )?;
            let ood_l: Vec<(String, Inference)> = ood.iter().map(|(n, o)| (n.clone(), layer_view(o, l))).collect();
            let (cells, _) = score_cells(&functions, &layer_view(&test, l), &ood_l, &gaussian, &validation)?;
            Ok(ProbeRow {
                layer: l,
                averages: averages(&functions, &cells),
                cells,
            })
        })
        .collect()
}

/// `(layer, weight)` rows of the learned layer-combination vector.
pub fn export_combination(ckpt: &Checkpoint) -> Result<Vec<(usize, f64)>> {
    let c = ckpt
        .model
        .combination()
        .ok_or_else(|| Error::Contract("no combination vector: checkpoint uses the discriminative objective".into()))?;
    Ok(c.weights().into_iter().enumerate().collect())
}
