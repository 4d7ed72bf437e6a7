//! Binary checkpoint: `MAGIC`, a little-endian `u64` header length, a JSON
//! header, then one blob holding every parameter and bank array
//! back-to-back in little-endian byte order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, ParamStore, Real};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::scoring::{GaussianBank, ValidationBank};

use super::config::RunConfig;
use super::model::{AnyModel, Model};
use super::train::rng_stream;

pub const MAGIC: &[u8; 8] = b"OODVICK\x01";
pub const FORMAT_VERSION: u32 = 1;

const GAUSSIAN_MEANS: &str = "bank.gaussian.means";
const GAUSSIAN_COVARIANCE: &str = "bank.gaussian.covariance";
const GAUSSIAN_SHRINKAGE: &str = "bank.gaussian.shrinkage";
const VALIDATION_ROWS: &str = "bank.validation.rows";

/// Trained model with its vocabulary, label names and fitted banks.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Configuration used for training, class count filled in.
    pub config: RunConfig,
    pub labels: Vec<String>,
    pub vocab: Vocabulary,
    pub model: AnyModel,
    pub gaussian: GaussianBank,
    pub validation: ValidationBank,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: DType,
    pub config: RunConfig,
    pub labels: Vec<String>,
    pub vocab_hash: String,
    pub vocab: Vec<String>,
    pub manifest: Vec<ManifestEntry>,
}

struct BlobWriter {
    blob: Vec<u8>,
    manifest: Vec<ManifestEntry>,
}

impl BlobWriter {
    fn push<T: Real>(&mut self, name: &str, shape: Vec<usize>, values: &[T]) {
        let offset = self.blob.len();
        values.iter().for_each(|v| v.write_le(&mut self.blob));
        self.manifest.push(ManifestEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape,
            offset,
            len: self.blob.len() - offset,
        });
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct BlobReader<'a> {
    blob: &'a [u8],
    manifest: &'a [ManifestEntry],
}

impl BlobReader<'_> {
    fn entry(&self, name: &str) -> Result<&ManifestEntry> {
        self.manifest
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("missing array {name}")))
    }

    fn read<T: Real>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let e = self.entry(name)?;
        if e.dtype != T::DTYPE {
            return Err(bad(format!("{name}: expected {:?}, found {:?}", T::DTYPE, e.dtype)));
        }
        let bytes = &self.blob[e.offset..e.offset + e.len];
        let values = bytes.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
        Ok((e.shape.clone(), values))
    }
}

/// Offsets must start at 0, be contiguous and end at the blob length, and
/// each length must match its shape and dtype.
fn check_tiling(manifest: &[ManifestEntry], blob_len: usize) -> Result<()> {
    let mut entries: Vec<&ManifestEntry> = manifest.iter().collect();
    entries.sort_by_key(|e| e.offset);
    let mut cursor = 0;
    for e in entries {
        if e.offset != cursor {
            return Err(bad(format!(
                "{} starts at byte {}, expected {cursor}",
                e.name, e.offset
            )));
        }
        let expected = e.shape.iter().product::<usize>() * e.dtype.size_of();
        if e.len != expected {
            return Err(bad(format!("{} has {} bytes, shape implies {expected}", e.name, e.len)));
        }
        cursor += e.len;
    }
    if cursor != blob_len {
        return Err(bad(format!("manifest covers {cursor} bytes, blob has {blob_len}")));
    }
    Ok(())
}

fn write_params<T: Real>(w: &mut BlobWriter, store: &ParamStore<T>) {
    for (_, name, t) in store.iter() {
        w.push(name, t.shape().to_vec(), t.data());
    }
}

fn read_params<T: Real>(r: &BlobReader<'_>, cfg: &RunConfig, vocab_size: usize) -> Result<Model<T>> {
    // The architecture is rebuilt from the config; initial values are then
    // overwritten from the blob.
    let mut model = Model::<T>::new(cfg, vocab_size, &mut rng_stream(cfg.seed, 0))?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let (shape, values) = r.read::<T>(&name)?;
        let t = model.store.get_mut(id);
        if shape != t.shape() {
            return Err(bad(format!("{name}: shape {shape:?}, model expects {:?}", t.shape())));
        }
        t.data_mut().copy_from_slice(&values);
    }
    let params = r.manifest.iter().filter(|e| !e.name.starts_with("bank.")).count();
    if params != model.store.len() {
        return Err(bad(format!(
            "{params} parameter arrays, model has {}",
            model.store.len()
        )));
    }
    Ok(model)
}

impl Checkpoint {
    pub fn dtype(&self) -> DType {
        match self.model {
            AnyModel::F32(_) => DType::F32,
            AnyModel::F64(_) => DType::F64,
        }
    }

    pub fn vocab_hash(&self) -> String {
        self.vocab.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BlobWriter {
            blob: Vec::new(),
            manifest: Vec::new(),
        };
        match &self.model {
            AnyModel::F32(m) => write_params(&mut w, &m.store),
            AnyModel::F64(m) => write_params(&mut w, &m.store),
        }
        let g = &self.gaussian;
        let means: Vec<f64> = g.means().iter().flatten().copied().collect();
        w.push(GAUSSIAN_MEANS, vec![g.num_classes(), g.dim()], &means);
        w.push(GAUSSIAN_COVARIANCE, vec![g.dim(), g.dim()], g.covariance());
        w.push(GAUSSIAN_SHRINKAGE, vec![], &[g.shrinkage()]);
        let rows: Vec<f64> = self.validation.rows().iter().flatten().copied().collect();
        w.push(
            VALIDATION_ROWS,
            vec![self.validation.len(), self.validation.dim()],
            &rows,
        );

        let header = Header {
            version: FORMAT_VERSION,
            dtype: self.dtype(),
            config: self.config.clone(),
            labels: self.labels.clone(),
            vocab_hash: self.vocab.hash(),
            vocab: self.vocab.tokens().to_vec(),
            manifest: w.manifest,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + w.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&w.blob);
        Ok(out)
    }

    /// Parses the header only.
    pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header length overflows"))?;
        let start = MAGIC.len() + 8;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[start..end])?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        Ok((header, end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blob_start) = Self::read_header(bytes)?;
        let blob = &bytes[blob_start..];
        check_tiling(&header.manifest, blob.len())?;
        let vocab = Vocabulary::from_tokens(header.vocab.iter().cloned())?;
        if vocab.hash() != header.vocab_hash {
            return Err(bad("vocabulary does not match its recorded hash"));
        }
        header.config.validate()?;
        let r = BlobReader {
            blob,
            manifest: &header.manifest,
        };
        let model = match header.dtype {
            DType::F32 => AnyModel::F32(read_params(&r, &header.config, vocab.len())?),
            DType::F64 => AnyModel::F64(read_params(&r, &header.config, vocab.len())?),
        };
        let (mshape, means) = r.read::<f64>(GAUSSIAN_MEANS)?;
        let (cshape, cov) = r.read::<f64>(GAUSSIAN_COVARIANCE)?;
        let (_, shrink) = r.read::<f64>(GAUSSIAN_SHRINKAGE)?;
        if mshape.len() != 2 || cshape != [mshape[1], mshape[1]] || shrink.len() != 1 {
            return Err(bad("inconsistent gaussian bank shapes"));
        }
        let dim = mshape[1];
        let gaussian = GaussianBank::from_parts(dim, means.chunks(dim).map(<[f64]>::to_vec).collect(), cov, shrink[0])?;
        let (vshape, rows) = r.read::<f64>(VALIDATION_ROWS)?;
        if vshape.len() != 2 || vshape[1] == 0 {
            return Err(bad("inconsistent validation bank shape"));
        }
        let validation = ValidationBank::from_rows(rows.chunks(vshape[1]).map(<[f64]>::to_vec).collect())?;
        Ok(Self {
            config: header.config,
            labels: header.labels,
            vocab,
            model,
            gaussian,
            validation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
