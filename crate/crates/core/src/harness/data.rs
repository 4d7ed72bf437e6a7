use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};

use super::config::DatasetSpec;

/// One line of a data file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Labelled ID split with labels mapped to class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub texts: Vec<String>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

/// Unlabelled OOD test texts.
#[derive(Clone, Debug, PartialEq)]
pub struct OodSet {
    pub name: String,
    pub texts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Class names; index `k` is class `k`.
    pub labels: Vec<String>,
    pub vocab: Vocabulary,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub ood: Vec<OodSet>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

/// Parses a line-delimited JSON file. Blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Ingest {
            path: path.display().to_string(),
            line: 0,
            msg: "file has no records".into(),
        });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn labelled(path: &Path, records: Vec<Record>, labels: &[String]) -> Result<Split> {
    let mut split = Split {
        texts: Vec::with_capacity(records.len()),
        labels: Vec::with_capacity(records.len()),
    };
    for (i, r) in records.into_iter().enumerate() {
        let name = r.label.ok_or_else(|| Error::Ingest {
            path: path.display().to_string(),
            line: i + 1,
            msg: "missing label".into(),
        })?;
        let k = labels.binary_search(&name).map_err(|_| Error::Label {
            path: path.display().to_string(),
            label: name.clone(),
        })?;
        split.texts.push(r.text);
        split.labels.push(k);
    }
    Ok(split)
}

fn set_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads every file of `spec`. Class indices follow the sorted training
/// label strings and the vocabulary sees the training texts only.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let train = read_records(&spec.id_train)?;
    let mut names = BTreeSet::new();
    for (i, r) in train.iter().enumerate() {
        match &r.label {
            Some(l) => {
                names.insert(l.clone());
            }
            None => {
                return Err(Error::Ingest {
                    path: spec.id_train.display().to_string(),
                    line: i + 1,
                    msg: "missing label".into(),
                })
            }
        }
    }
    let labels: Vec<String> = names.into_iter().collect();
    let vocab = Vocabulary::build(train.iter().map(|r| r.text.as_str()));
    let train = labelled(&spec.id_train, train, &labels)?;
    let val = labelled(&spec.id_val, read_records(&spec.id_val)?, &labels)?;
    let test = labelled(&spec.id_test, read_records(&spec.id_test)?, &labels)?;
    let mut ood = Vec::with_capacity(spec.ood_test.len());
    let mut seen = BTreeSet::new();
    for path in &spec.ood_test {
        let mut name = set_name(path);
        while !seen.insert(name.clone()) {
            name.push('_');
        }
        ood.push(OodSet {
            name,
            texts: read_records(path)?.into_iter().map(|r| r.text).collect(),
        });
    }
    Ok(Dataset {
        labels,
        vocab,
        train,
        val,
        test,
        ood,
    })
}

/// Paths of a dataset laid out by [`super::synthetic::write_synthetic`].
pub fn standard_layout(dir: &Path, ood_names: &[&str]) -> DatasetSpec {
    DatasetSpec {
        id_train: dir.join("train.jsonl"),
        id_val: dir.join("val.jsonl"),
        id_test: dir.join("test.jsonl"),
        ood_test: ood_names
            .iter()
            .map(|n| dir.join(format!("{n}.jsonl")))
            .collect::<Vec<PathBuf>>(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn spec(dir: &Path) -> DatasetSpec {
        DatasetSpec {
            id_train: write(
                dir,
                "train.jsonl",
                "{\"text\":\"good film\",\"label\":\"pos\"}\n{\"text\":\"bad film\",\"label\":\"neg\"}\n",
            ),
            id_val: write(dir, "val.jsonl", "{\"text\":\"good\",\"label\":\"pos\"}\n"),
            id_test: write(dir, "test.jsonl", "\n{\"text\":\"bad\",\"label\":\"neg\"}\n"),
            ood_test: vec![write(
                dir,
                "news.jsonl",
                "{\"text\":\"stocks fell\",\"label\":\"business\"}\n",
            )],
        }
    }

    #[test]
    fn labels_sorted_and_ood_labels_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(&spec(dir.path())).unwrap();
        assert_eq!(ds.labels, ["neg", "pos"]);
        assert_eq!(ds.train.labels, [1, 0]);
        assert_eq!(ds.test.labels, [0]);
        assert_eq!(ds.ood[0].name, "news");
        assert_eq!(ds.vocab.len(), 3 + 3);
        assert_eq!(load_dataset(&spec(dir.path())).unwrap(), ds);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(dir.path());
        s.id_val = write(
            dir.path(),
            "bad.jsonl",
            "{\"text\":\"a\",\"label\":\"pos\"}\n{\"text\": 3}\n",
        );
        match load_dataset(&s) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_in_test() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(dir.path());
        s.id_test = write(dir.path(), "t2.jsonl", "{\"text\":\"meh\",\"label\":\"neutral\"}\n");
        assert!(matches!(load_dataset(&s), Err(Error::Label { label, .. }) if label == "neutral"));
    }

    #[test]
    fn empty_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(dir.path());
        s.id_val = write(dir.path(), "empty.jsonl", "\n\n");
        assert!(matches!(load_dataset(&s), Err(Error::Ingest { .. })));
    }
}
