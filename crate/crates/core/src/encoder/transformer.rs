use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionGeometry, ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{normal_table, LayerNorm, Linear};

use super::vocab::{tokenize, Vocabulary, CLS_ID, PAD_ID};

const EMBEDDING_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalKind {
    #[default]
    Learned,
}

/// Shape of the transformer encoder.
///
/// `layers` counts hidden states, not blocks: state 0 is the embedding
/// output and states `1..layers` are the outputs of `layers - 1` pre-LN
/// blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub positional: PositionalKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            d_model: 64,
            heads: 4,
            ffn_dim: 256,
            max_len: 64,
            positional: PositionalKind::Learned,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers < 2 {
            return bad(format!("encoder needs at least 2 layers, got {}", self.layers));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        Ok(())
    }
}

/// Rectangular batch of token ids, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    batch: usize,
    seq: usize,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || seq == 0 {
            return Err(Error::Contract("empty token batch".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != seq) {
            return Err(Error::Shape {
                op: "token_batch",
                lhs: vec![seq],
                rhs: vec![r.len()],
            });
        }
        if let Some(r) = rows.iter().position(|r| r[0] != CLS_ID) {
            return Err(Error::Contract(format!("row {r} does not start with [CLS]")));
        }
        Ok(Self {
            ids: rows.concat(),
            batch: rows.len(),
            seq,
        })
    }

    /// Tokenizes `texts` to `max_len` and trims trailing columns that are
    /// padding in every row.
    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        let mut rows = texts
            .into_iter()
            .map(|t| tokenize(t, vocab, max_len))
            .collect::<Result<Vec<_>>>()?;
        let longest = rows
            .iter()
            .map(|r| r.iter().rposition(|&id| id != PAD_ID).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1);
        rows.iter_mut().for_each(|r| r.truncate(longest));
        Self::new(&rows)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    ln1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln2: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// `[CLS]` states of every layer for one forward pass; `layers[l]` has
/// shape `[batch, d_model]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub layers: Vec<Var>,
}

impl EncoderOutput {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("encoder has at least two layers")
    }
}

/// Per-example `L × d_model` matrix of `[CLS]` states, row `l` from layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStack {
    layers: usize,
    d_model: usize,
    data: Vec<f64>,
}

impl HiddenStack {
    pub fn new(layers: usize, d_model: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != layers * d_model {
            return Err(Error::Shape {
                op: "hidden_stack",
                lhs: vec![layers, d_model],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { layers, d_model, data })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.data[l * self.d_model..(l + 1) * self.d_model]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn last(&self) -> &[f64] {
        self.layer(self.layers - 1)
    }
}

/// Pre-LN transformer encoder with learned positional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    vocab_size: usize,
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(
        cfg: &EncoderConfig,
        vocab_size: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let token_embedding = normal_table(store, "encoder.token_embedding", vocab_size, d, EMBEDDING_STD, rng);
        let position_embedding = normal_table(store, "encoder.position_embedding", cfg.max_len, d, EMBEDDING_STD, rng);
        let blocks = (1..cfg.layers)
            .map(|i| {
                let p = format!("encoder.block{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    query: Linear::new(store, &format!("{p}.attn.query"), d, d, rng),
                    key: Linear::new(store, &format!("{p}.attn.key"), d, d, rng),
                    value: Linear::new(store, &format!("{p}.attn.value"), d, d, rng),
                    out: Linear::new(store, &format!("{p}.attn.out"), d, d, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ffn_in: Linear::new(store, &format!("{p}.ffn.in"), d, cfg.ffn_dim, rng),
                    ffn_out: Linear::new(store, &format!("{p}.ffn.out"), cfg.ffn_dim, d, rng),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    /// Token plus position embeddings, `[batch * seq, d_model]`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &TokenBatch) -> Result<Var> {
        if batch.seq() > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq(),
                self.cfg.max_len
            )));
        }
        if let Some(&id) = batch.ids().iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Vocab {
                id,
                size: self.vocab_size,
            });
        }
        let table = tape.param(store, self.token_embedding)?;
        let tokens = tape.embed(table, batch.ids())?;
        let positions: Vec<usize> = (0..batch.batch()).flat_map(|_| 0..batch.seq()).collect();
        let pos_table = tape.param(store, self.position_embedding)?;
        let pos = tape.embed(pos_table, &positions)?;
        tape.add(tokens, pos)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &TokenBatch,
    ) -> Result<EncoderOutput> {
        let x = self.embed(tape, store, batch)?;
        self.forward_embedded(tape, store, x, batch.batch(), batch.seq(), batch.key_mask())
    }

    /// Runs the blocks over an already-embedded `[batch * seq, d_model]`
    /// input. Rows with a `false` mask entry are never attended to.
    pub fn forward_embedded<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        batch: usize,
        seq: usize,
        key_mask: Vec<bool>,
    ) -> Result<EncoderOutput> {
        if tape.shape(x) != [batch * seq, self.cfg.d_model] {
            return Err(Error::Shape {
                op: "encoder",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![batch * seq, self.cfg.d_model],
            });
        }
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let mut layers = Vec::with_capacity(self.cfg.layers);
        layers.push(tape.gather_rows(x, &cls_rows)?);
        let geom = AttentionGeometry {
            batch,
            seq,
            heads: self.cfg.heads,
            key_mask,
        };
        for block in &self.blocks {
            let h = block.ln1.forward(tape, store, x)?;
            let q = block.query.forward(tape, store, h)?;
            let k = block.key.forward(tape, store, h)?;
            let v = block.value.forward(tape, store, h)?;
            let att = tape.attention(q, k, v, geom.clone())?;
            let att = block.out.forward(tape, store, att)?;
            x = tape.add(x, att)?;
            let h = block.ln2.forward(tape, store, x)?;
            let h = block.ffn_in.forward(tape, store, h)?;
            let h = tape.gelu(h)?;
            let h = block.ffn_out.forward(tape, store, h)?;
            x = tape.add(x, h)?;
            layers.push(tape.gather_rows(x, &cls_rows)?);
        }
        Ok(EncoderOutput { layers })
    }

    /// Inference-only convenience: one [`HiddenStack`] per example.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, batch: &TokenBatch) -> Result<Vec<HiddenStack>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, batch)?;
        Ok(stacks_from(&tape, &out, batch.batch(), self.cfg.d_model))
    }
}

/// Copies the per-layer `[batch, d]` values into per-example stacks.
pub(crate) fn stacks_from<T: Real>(tape: &Tape<T>, out: &EncoderOutput, batch: usize, d: usize) -> Vec<HiddenStack> {
    (0..batch)
        .map(|b| {
            let data = out
                .layers
                .iter()
                .flat_map(|&v| tape.value(v)[b * d..(b + 1) * d].iter().map(|x| x.as_f64()))
                .collect();
            HiddenStack::new(out.layers.len(), d, data).expect("shape matches")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Encoder, ParamStore<f64>) {
        let cfg = EncoderConfig {
            layers: 3,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            max_len: 64,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&cfg, 10, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let odd = EncoderConfig {
            d_model: 10,
            heads: 4,
            ..Default::default()
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
        let shallow = EncoderConfig {
            layers: 1,
            ..Default::default()
        };
        assert!(shallow.validate().is_err());
    }

    #[test]
    fn output_has_one_row_per_layer() {
        let (enc, store) = tiny();
        let batch = TokenBatch::new(&[vec![2, 3, 4, 0], vec![2, 5, 0, 0], vec![2, 6, 7, 8]]).unwrap();
        let stacks = enc.encode(&store, &batch).unwrap();
        assert_eq!(stacks.len(), 3);
        for s in &stacks {
            assert_eq!((s.layers(), s.d_model()), (3, 8));
            assert!(s.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn identical_rows_give_identical_stacks() {
        let (enc, store) = tiny();
        let batch = TokenBatch::new(&[vec![2, 3, 4, 0], vec![2, 3, 4, 0]]).unwrap();
        let stacks = enc.encode(&store, &batch).unwrap();
        assert_eq!(stacks[0], stacks[1]);
    }

    #[test]
    fn out_of_range_id_is_a_vocab_error() {
        let (enc, store) = tiny();
        let batch = TokenBatch::new(&[vec![2, 10]]).unwrap();
        assert!(matches!(
            enc.encode(&store, &batch),
            Err(Error::Vocab { id: 10, size: 10 })
        ));
    }

    #[test]
    fn from_texts_trims_common_padding() {
        let vocab = Vocabulary::build(["a b c"]);
        let batch = TokenBatch::from_texts(["a b", "c"], &vocab, 16).unwrap();
        assert_eq!(batch.seq(), 3);
        assert_eq!(batch.key_mask(), vec![true, true, true, true, true, false]);
        let empty = TokenBatch::from_texts([""], &vocab, 16).unwrap();
        assert_eq!(empty.ids(), &[CLS_ID]);
    }
}
