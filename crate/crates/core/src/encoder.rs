//! Pre-norm transformer encoder returning the hidden states of every layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::vocab::PAD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            max_len: 128,
            dropout_p: 0.2,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("encoder.num_layers must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "encoder.num_heads ({}) must divide encoder.hidden_dim ({})",
                self.num_heads, self.hidden_dim
            ));
        }
        if self.max_len < 8 {
            return fail(format!("encoder.max_len must be at least 8, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("encoder.dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.vocab_size <= crate::vocab::SYS as usize {
            return fail(format!("encoder.vocab_size too small: {}", self.vocab_size));
        }
        if self.ffn_dim == 0 {
            return fail("encoder.ffn_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub ln1: (ParamId, ParamId),
    pub wq: (ParamId, ParamId),
    pub wk: (ParamId, ParamId),
    pub wv: (ParamId, ParamId),
    pub wo: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
}

/// Handles to the encoder parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockWeights>,
    pub final_ln: (ParamId, ParamId),
}

fn add_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    (w, b)
}

fn add_norm(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
    (g, b)
}

impl EncoderWeights {
    /// Registers freshly initialized encoder parameters under `encoder.*`.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, std) = (config.hidden_dim, config.init_std);
        let tok_emb = store.add(
            "encoder.tok_emb",
            Tensor::randn(&[config.vocab_size, d], std, rng),
        );
        let pos_emb = store.add("encoder.pos_emb", Tensor::randn(&[config.max_len, d], std, rng));
        let blocks = (0..config.num_layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                BlockWeights {
                    ln1: add_norm(store, &format!("{p}.ln1"), d),
                    wq: add_linear(store, &format!("{p}.attn.q"), d, d, std, rng),
                    wk: add_linear(store, &format!("{p}.attn.k"), d, d, std, rng),
                    wv: add_linear(store, &format!("{p}.attn.v"), d, d, std, rng),
                    wo: add_linear(store, &format!("{p}.attn.o"), d, d, std, rng),
                    ln2: add_norm(store, &format!("{p}.ln2"), d),
                    ffn_in: add_linear(store, &format!("{p}.ffn.in"), d, config.ffn_dim, std, rng),
                    ffn_out: add_linear(store, &format!("{p}.ffn.out"), config.ffn_dim, d, std, rng),
                }
            })
            .collect();
        let final_ln = add_norm(store, "encoder.final_ln", d);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
        })
    }

    /// Every parameter id owned by the encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            for (w, bias) in [b.ln1, b.wq, b.wk, b.wv, b.wo, b.ln2, b.ffn_in, b.ffn_out] {
                ids.extend([w, bias]);
            }
        }
        ids.extend([self.final_ln.0, self.final_ln.1]);
        ids
    }
}

/// A right-padded batch of token sequences with its attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub lens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0);
        Self::padded_to(seqs, seq)
    }

    /// Pads every sequence to `seq` (which must be at least the longest length).
    pub fn padded_to(seqs: &[Vec<u32>], seq: usize) -> Self {
        let batch = seqs.len();
        let mut ids = vec![PAD; batch * seq];
        let mut mask = vec![false; batch * seq];
        for (b, s) in seqs.iter().enumerate() {
            assert!(s.len() <= seq, "sequence longer than padded length");
            ids[b * seq..b * seq + s.len()].copy_from_slice(s);
            mask[b * seq..b * seq + s.len()].fill(true);
        }
        Self {
            ids,
            mask,
            lens: seqs.iter().map(Vec::len).collect(),
            batch,
            seq,
        }
    }

    pub fn sequence(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..b * self.seq + self.lens[b]]
    }
}

/// Hidden states of every layer: index 0 is the embedding output, `1..=L`
/// are block outputs (the last one after the final layer norm).
/// Each entry is a `[batch, seq, d]` tensor on the tape.
#[derive(Clone, Debug)]
pub struct LayerStates {
    pub layers: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
}

impl LayerStates {
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn top(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }

    /// Flat row index of position `pos` in example `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq + pos
    }

    /// Row indices of position 0 ([CLS]) for each example.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq).collect()
    }
}

fn linear(tape: &mut Tape, store: &ParamStore, x: Var, wb: (ParamId, ParamId)) -> Result<Var> {
    let w = tape.param(store, wb.0);
    let b = tape.param(store, wb.1);
    Ok(tape.linear(x, w, Some(b))?)
}

fn norm(tape: &mut Tape, store: &ParamStore, x: Var, gb: (ParamId, ParamId), eps: f64) -> Result<Var> {
    let g = tape.param(store, gb.0);
    let b = tape.param(store, gb.1);
    Ok(tape.layer_norm(x, g, b, eps)?)
}

/// Runs the encoder over `batch`. Dropout is active only when `train` is set.
pub fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    weights: &EncoderWeights,
    batch: &TokenBatch,
    train: bool,
    rng: &mut R,
) -> Result<LayerStates> {
    let cfg = &weights.config;
    if batch.seq > cfg.max_len {
        return Err(Error::Data(format!(
            "sequence length {} exceeds encoder max_len {}",
            batch.seq, cfg.max_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(TensorError::Index {
            op: "embedding",
            index: bad as usize,
            size: cfg.vocab_size,
        }
        .into());
    }
    let (bsz, seq, d) = (batch.batch, batch.seq, cfg.hidden_dim);
    let p = cfg.dropout_p;

    let tok_table = tape.param(store, weights.tok_emb);
    let pos_table = tape.param(store, weights.pos_emb);
    let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
    let tok = tape.gather_rows(tok_table, &ids)?;
    let pos = tape.gather_rows(pos_table, &positions)?;
    let x = tape.add(tok, pos)?;
    let x = tape.reshape(x, &[bsz, seq, d])?;
    let mut x = tape.dropout(x, p, train, rng)?;
    let mut layers = vec![x];

    for (l, blk) in weights.blocks.iter().enumerate() {
        let h = norm(tape, store, x, blk.ln1, cfg.ln_eps)?;
        let q = linear(tape, store, h, blk.wq)?;
        let k = linear(tape, store, h, blk.wk)?;
        let v = linear(tape, store, h, blk.wv)?;
        let a = tape.attention(q, k, v, &batch.mask, cfg.num_heads)?;
        let a = linear(tape, store, a, blk.wo)?;
        let a = tape.dropout(a, p, train, rng)?;
        x = tape.add(x, a)?;

        let h = norm(tape, store, x, blk.ln2, cfg.ln_eps)?;
        let f = linear(tape, store, h, blk.ffn_in)?;
        let f = tape.relu(f)?;
        let f = linear(tape, store, f, blk.ffn_out)?;
        let f = tape.dropout(f, p, train, rng)?;
        x = tape.add(x, f)?;

        if l + 1 == weights.blocks.len() {
            layers.push(norm(tape, store, x, weights.final_ln, cfg.ln_eps)?);
        } else {
            layers.push(x);
        }
    }
    Ok(LayerStates {
        layers,
        batch: bsz,
        seq,
    })
}

/// Eval-mode [CLS] embeddings of the top layer, one row per sequence.
pub fn cls_embeddings(
    store: &ParamStore,
    weights: &EncoderWeights,
    seqs: &[Vec<u32>],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for chunk in seqs.chunks(64) {
        let mut tape = Tape::new();
        tape.set_freeze_params(true);
        let batch = TokenBatch::from_sequences(chunk);
        let states = encode(&mut tape, store, weights, &batch, false, &mut rng)?;
        let top = tape.value(states.top());
        for b in 0..batch.batch {
            out.push(top.row(states.row(b, 0)).to_vec());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize, d: usize) -> (ParamStore, EncoderWeights) {
        let cfg = EncoderConfig {
            vocab_size: 20,
            num_layers: layers,
            hidden_dim: d,
            num_heads: 2,
            ffn_dim: 2 * d,
            max_len: 16,
            dropout_p: 0.1,
            init_std: 0.3,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = EncoderWeights::init(&mut store, &cfg, &mut rng).unwrap();
        (store, w)
    }

    #[test]
    fn shape_contract() {
        let (store, w) = tiny(2, 32);
        let seqs = vec![vec![2, 7, 8, 9, 10, 11, 12, 13, 14, 3]; 2];
        let batch = TokenBatch::from_sequences(&seqs);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = encode(&mut tape, &store, &w, &batch, false, &mut rng).unwrap();
        assert_eq!(s.layers.len(), 3);
        for l in &s.layers {
            assert_eq!(tape.shape(*l), &[2, 10, 32]);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, w) = tiny(2, 8);
        let seqs = vec![vec![2, 7, 8, 9, 3], vec![2, 10, 3]];
        let a = cls_embeddings(&store, &w, &seqs).unwrap();
        let b = cls_embeddings(&store, &w, &seqs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, w) = tiny(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let oov = TokenBatch::from_sequences(&[vec![2, 99, 3]]);
        assert!(encode(&mut Tape::new(), &store, &w, &oov, false, &mut rng).is_err());
        let long = TokenBatch::from_sequences(&[vec![7; 17]]);
        assert!(encode(&mut Tape::new(), &store, &w, &long, false, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            vocab_size: 20,
            hidden_dim: 10,
            num_heads: 3,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let short = EncoderConfig {
            vocab_size: 20,
            max_len: 7,
            ..EncoderConfig::default()
        };
        assert!(short.validate().is_err());
    }
}
