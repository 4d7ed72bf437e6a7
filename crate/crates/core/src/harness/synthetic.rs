//! Keyword-classification toy task with a disjoint-vocabulary OOD set, so
//! the full pipeline runs without external corpora.
//!
//! Every ID text mixes shared filler words with one to three keywords of its
//! class. OOD texts use words that never occur in any ID split, so each of
//! their tokens maps to `[UNK]`.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::config::DatasetSpec;
use super::data::{standard_layout, write_records, Record};

const FILLER: usize = 60;
const KEYWORDS_PER_CLASS: usize = 6;
const OOD_WORDS: usize = 200;
const CLASS_NAMES: [&str; 2] = ["alpha", "beta"];
pub const OOD_SET_NAME: &str = "ood_disjoint";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub ood: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 500,
            test: 500,
            ood: 500,
            min_words: 6,
            max_words: 12,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
    pub ood: Vec<Record>,
}

fn filler(i: usize) -> String {
    format!("w{i:02}")
}

fn keyword(class: usize, i: usize) -> String {
    format!("{}{i}", CLASS_NAMES[class])
}

fn ood_word(i: usize) -> String {
    format!("x{i:03}")
}

fn id_record(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Record {
    let class = rng.random_range(0..CLASS_NAMES.len());
    let len = rng.random_range(spec.min_words..=spec.max_words);
    let mut words: Vec<String> = (0..len).map(|_| filler(rng.random_range(0..FILLER))).collect();
    let hits = rng.random_range(1..=3.min(len));
    for _ in 0..hits {
        let pos = rng.random_range(0..len);
        words[pos] = keyword(class, rng.random_range(0..KEYWORDS_PER_CLASS));
    }
    // Positions may collide; make sure at least one keyword survives.
    if !words.iter().any(|w| w.starts_with(CLASS_NAMES[class])) {
        words[0] = keyword(class, 0);
    }
    Record {
        text: words.join(" "),
        label: Some(CLASS_NAMES[class].to_string()),
    }
}

fn ood_record(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, pool: &[String]) -> Record {
    let len = rng.random_range(spec.min_words..=spec.max_words);
    let words: Vec<&str> = (0..len)
        .map(|_| pool.choose(rng).expect("nonempty pool").as_str())
        .collect();
    Record {
        text: words.join(" "),
        label: None,
    }
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |n: usize| (0..n).map(|_| id_record(&mut rng, spec)).collect::<Vec<_>>();
    let train = split(spec.train);
    let val = split(spec.val);
    let test = split(spec.test);
    let pool: Vec<String> = (0..OOD_WORDS).map(ood_word).collect();
    let ood = (0..spec.ood).map(|_| ood_record(&mut rng, spec, &pool)).collect();
    SyntheticData { train, val, test, ood }
}

/// Writes `train`, `val`, `test` and the OOD set as JSONL under `dir`.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<DatasetSpec> {
    std::fs::create_dir_all(dir)?;
    let data = generate(spec);
    let layout = standard_layout(dir, &[OOD_SET_NAME]);
    write_records(&layout.id_train, &data.train)?;
    write_records(&layout.id_val, &data.val)?;
    write_records(&layout.id_test, &data.test)?;
    write_records(&layout.ood_test[0], &data.ood)?;
    Ok(layout)
}
