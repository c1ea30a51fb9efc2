//! Pre-layer-norm transformer stack shared by the encoder and decoder rankers.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Mat, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::text::TokenId;

pub const INIT_STD: f64 = 0.02;
pub const EMBED_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_multiplier: usize,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, 64 hidden, 4 heads.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden_size: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            ffn_multiplier: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("ffn_multiplier", self.ffn_multiplier),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Projection weights of one multi-head self-attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        let mut w = |n: &str, st: &mut ParamStore| st.add_normal(format!("{prefix}.{n}"), d, d, INIT_STD, rng);
        let wq = w("wq", store);
        let wk = w("wk", store);
        let wv = w("wv", store);
        let wo = w("wo", store);
        AttentionParams {
            wq,
            bq: store.add_zeros(format!("{prefix}.bq"), 1, d),
            wk,
            bk: store.add_zeros(format!("{prefix}.bk"), 1, d),
            wv,
            bv: store.add_zeros(format!("{prefix}.bv"), 1, d),
            wo,
            bo: store.add_zeros(format!("{prefix}.bo"), 1, d),
            heads,
        }
    }

    /// Self-attention over the rows of `x` followed by the output projection.
    pub fn forward(&self, tape: &mut Tape, x: Var, causal: bool) -> Var {
        let q = tape.linear(x, self.wq, self.bq);
        let k = tape.linear(x, self.wk, self.bk);
        let v = tape.linear(x, self.wv, self.bv);
        let a = tape.attention(q, k, v, self.heads, causal);
        tape.linear(a, self.wo, self.bo)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add_ones(format!("{prefix}.gain"), 1, d),
            bias: store.add_zeros(format!("{prefix}.bias"), 1, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Dense `d_in → d_out` map.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        LinearParams {
            w: store.add_normal(format!("{prefix}.w"), d_in, d_out, INIT_STD, rng),
            b: store.add_zeros(format!("{prefix}.b"), 1, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.linear(x, self.w, self.b)
    }

    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        x.dot(store.get(self.w)) + store.get(self.b)
    }
}

/// Per-layer hidden states of one forward pass.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    /// `n_layers + 1` matrices of shape `seq_len × d_hidden`; entry 0 is the
    /// input embedding sum, the last entry is the final-norm output.
    pub layers: Vec<Mat>,
    pub truncated: bool,
}

impl HiddenStates {
    pub fn last(&self) -> &Mat {
        self.layers.last().expect("at least the embedding layer")
    }
}

/// Word/position embeddings plus `n_layers` pre-norm blocks and a final norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub config: ModelConfig,
    pub word: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_ln: LayerNormParams,
}

/// Vars produced by [`TransformerStack::forward`].
pub struct StackOutput {
    pub layers: Vec<Var>,
}

impl StackOutput {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("nonempty")
    }
}

impl TransformerStack {
    pub fn init<R: Rng>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let word = store.add_normal("embed.word", config.vocab_size, d, EMBED_STD, rng);
        let pos = store.add_normal("embed.pos", config.max_seq_len, d, EMBED_STD, rng);
        let ffn = d * config.ffn_multiplier;
        let blocks = (0..config.n_layers)
            .map(|l| {
                let p = format!("layer{l}");
                let ln1 = LayerNormParams::init(store, &format!("{p}.ln1"), d);
                let attn = AttentionParams::init(store, &format!("{p}.attn"), d, config.n_heads, rng);
                let ln2 = LayerNormParams::init(store, &format!("{p}.ln2"), d);
                BlockParams {
                    ln1,
                    attn,
                    ln2,
                    w1: store.add_normal(format!("{p}.ffn.w1"), d, ffn, INIT_STD, rng),
                    b1: store.add_zeros(format!("{p}.ffn.b1"), 1, ffn),
                    w2: store.add_normal(format!("{p}.ffn.w2"), ffn, d, INIT_STD, rng),
                    b2: store.add_zeros(format!("{p}.ffn.b2"), 1, d),
                }
            })
            .collect();
        let final_ln = LayerNormParams::init(store, "final_ln", d);
        Ok(TransformerStack {
            config,
            word,
            pos,
            blocks,
            final_ln,
        })
    }

    pub fn check_ids(&self, store: &ParamStore, ids: &[TokenId]) -> Result<()> {
        let vocab = store.get(self.word).nrows();
        match ids.iter().find(|&&i| i as usize >= vocab) {
            Some(bad) => Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            ))),
            None => Ok(()),
        }
    }

    /// Record a forward pass. Inputs longer than `max_seq_len` must be
    /// truncated by the caller.
    pub fn forward(&self, tape: &mut Tape, ids: &[TokenId], causal: bool) -> StackOutput {
        assert!(ids.len() <= self.config.max_seq_len, "input exceeds max_seq_len");
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let we = tape.embed(self.word, &idx);
        let pe = tape.embed(self.pos, &positions);
        let mut x = tape.add(we, pe);
        let mut layers = vec![x];
        for (l, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.forward(tape, x);
            let a = b.attn.forward(tape, h, causal);
            x = tape.add(x, a);
            let h = b.ln2.forward(tape, x);
            let f = tape.linear(h, b.w1, b.b1);
            let f = tape.gelu(f);
            let f = tape.linear(f, b.w2, b.b2);
            x = tape.add(x, f);
            if l + 1 == self.blocks.len() {
                x = self.final_ln.forward(tape, x);
            }
            layers.push(x);
        }
        if self.blocks.is_empty() {
            x = self.final_ln.forward(tape, x);
            layers.push(x);
        }
        StackOutput { layers }
    }

    /// Evaluation-mode forward pass returning all hidden states.
    pub fn hidden_states(&self, store: &ParamStore, ids: &[TokenId], causal: bool) -> Result<HiddenStates> {
        self.check_ids(store, ids)?;
        let truncated = ids.len() > self.config.max_seq_len;
        let ids = &ids[..ids.len().min(self.config.max_seq_len)];
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, ids, causal);
        Ok(HiddenStates {
            layers: out.layers.iter().map(|&v| tape.value(v).clone()).collect(),
            truncated,
        })
    }

    /// Word-embedding rows for `ids` (no positions).
    pub fn embed(&self, store: &ParamStore, ids: &[TokenId]) -> Result<Mat> {
        self.check_ids(store, ids)?;
        let table = store.get(self.word);
        let mut out = Array2::zeros((ids.len(), table.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&table.row(i as usize));
        }
        Ok(out)
    }

    pub fn encoder_forward(&self, store: &ParamStore, ids: &[TokenId]) -> Result<HiddenStates> {
        self.hidden_states(store, ids, false)
    }

    pub fn decoder_forward(&self, store: &ParamStore, ids: &[TokenId]) -> Result<HiddenStates> {
        self.hidden_states(store, ids, true)
    }

    /// Append embedding rows (used when registering new tokens).
    pub fn grow_vocab(&mut self, store: &mut ParamStore, new_rows: &Mat) {
        let table = store.get(self.word);
        let mut grown = Array2::zeros((table.nrows() + new_rows.nrows(), table.ncols()));
        grown.slice_mut(s![..table.nrows(), ..]).assign(table);
        grown.slice_mut(s![table.nrows().., ..]).assign(new_rows);
        store.set(self.word, grown);
        self.config.vocab_size += new_rows.nrows();
    }
}

/// Standalone multi-head self-attention with output projection, evaluated
/// without a tape.
pub fn multi_head_attention(
    store: &ParamStore,
    attn: &AttentionParams,
    h: &Mat,
    causal: bool,
) -> Result<Mat> {
    let d = store.get(attn.wq).nrows();
    if h.ncols() != d {
        return Err(Error::Input(format!(
            "attention input has {} columns, expected {d}",
            h.ncols()
        )));
    }
    if d % attn.heads != 0 {
        return Err(Error::Config(format!("{d} not divisible by {} heads", attn.heads)));
    }
    let mut tape = Tape::new(store);
    let x = tape.input(h.clone());
    let out = attn.forward(&mut tape, x, causal);
    Ok(tape.value(out).clone())
}
