//! Transformer encoder with cross-passage fusion through global
//! representation tokens.
//!
//! Every passage is encoded against the query independently, except that
//! attention keys and values are extended: passage tokens can attend to the
//! global tokens, and the global tokens attend to all tokens of all
//! passages. Within a layer both query groups read the previous layer's
//! states (parallel update), and the attention projections are shared
//! between the groups. Blocks are post-norm: attention, add & norm, then a
//! feed-forward with add & norm.
//!
//! The alternative fusion modes trade scope of information flow for cost:
//!
//! - `None`: per-passage attention only, no cross-passage path.
//! - `GlobalTokens`: dedicated learned global tokens (the main mechanism).
//! - `QueryAsGlobal`: global slots initialized from the query embeddings.
//! - `ClsToCls`: each passage's leading token also attends to the other
//!   passages' leading tokens.
//! - `GlobalToClsOnly`: global tokens attend only to the leading tokens.
//! - `FullConcat`: the final layer attends over the concatenation of all
//!   passages (cost-comparison mode).
//!
//! Every attention computes a [`PairCounter`] tally of (query, key) score
//! entries, the unit of the cost model in [`crate::complexity`].

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Array;

/// How information is fused across passages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    GlobalTokens,
    QueryAsGlobal,
    ClsToCls,
    GlobalToClsOnly,
    FullConcat,
}

impl FusionMode {
    /// Modes in which global tokens exist and issue attention queries.
    pub fn has_global_tokens(self) -> bool {
        matches!(
            self,
            FusionMode::GlobalTokens | FusionMode::QueryAsGlobal | FusionMode::GlobalToClsOnly
        )
    }

    pub const ALL: [FusionMode; 6] = [
        FusionMode::None,
        FusionMode::GlobalTokens,
        FusionMode::QueryAsGlobal,
        FusionMode::ClsToCls,
        FusionMode::GlobalToClsOnly,
        FusionMode::FullConcat,
    ];
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionMode::None => "none",
            FusionMode::GlobalTokens => "global_tokens",
            FusionMode::QueryAsGlobal => "query_as_global",
            FusionMode::ClsToCls => "cls_to_cls",
            FusionMode::GlobalToClsOnly => "global_to_cls_only",
            FusionMode::FullConcat => "full_concat",
        };
        write!(f, "{s}")
    }
}

fn default_global_tokens() -> usize {
    10
}
fn default_max_answer_len() -> usize {
    15
}

/// Encoder architecture and fusion settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_passages: usize,
    /// Padded per-passage sequence length (leading token, query, separators
    /// and context together).
    pub passage_seq_len: usize,
    #[serde(default = "default_global_tokens")]
    pub num_global_tokens: usize,
    pub fusion_mode: FusionMode,
    /// Longest candidate answer span, in tokens.
    #[serde(default = "default_max_answer_len")]
    pub max_answer_len: usize,
    /// Set when the vocabulary is built; embeddings cover this many ids.
    #[serde(default)]
    pub vocab_size: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("layers, model_dim and heads must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_answer_len == 0 {
            return Err(Error::Config("max_answer_len must be at least 1".into()));
        }
        if self.passage_seq_len == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("sequence length and ffn_dim must be positive".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size is unset".into()));
        }
        Ok(())
    }

    /// Number of global token slots actually materialized in this mode.
    pub fn effective_globals(&self) -> usize {
        if self.fusion_mode.has_global_tokens() {
            self.num_global_tokens
        } else {
            0
        }
    }
}

/// One tokenized passage, padded to the configured length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageTokens {
    pub ids: Vec<usize>,
    /// False marks padding; padding is invisible as an attention key.
    pub mask: Vec<bool>,
    /// Positions holding context tokens; answer spans live here.
    pub context: Range<usize>,
}

/// One question with its tokenized passages; the unit the encoder consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedBatch {
    pub query_ids: Vec<usize>,
    pub passages: Vec<PassageTokens>,
    /// Reserved vocabulary ids feeding the global token slots.
    pub global_ids: Vec<usize>,
    /// Positions the query occupies inside every passage sequence.
    pub query_positions: Range<usize>,
}

impl TokenizedBatch {
    pub fn validate(&self, config: &FusionConfig) -> Result<()> {
        if self.passages.is_empty() {
            return Err(Error::Contract("batch has no passages".into()));
        }
        for p in &self.passages {
            if p.ids.len() != config.passage_seq_len || p.mask.len() != config.passage_seq_len {
                return Err(Error::Contract(format!(
                    "passage length {} does not match configured {}",
                    p.ids.len(),
                    config.passage_seq_len
                )));
            }
            if p.context.end > config.passage_seq_len {
                return Err(Error::Contract("context range exceeds sequence".into()));
            }
            for &id in &p.ids {
                if id >= config.vocab_size {
                    return Err(Error::VocabOutOfRange { id, vocab_size: config.vocab_size });
                }
            }
            if !p.mask[0] {
                return Err(Error::Contract("leading token must be unmasked".into()));
            }
        }
        if config.effective_globals() > 0 {
            if config.fusion_mode == FusionMode::QueryAsGlobal {
                if self.query_ids.is_empty() {
                    return Err(Error::Contract("query-as-global requires a non-empty query".into()));
                }
            } else if self.global_ids.len() != config.num_global_tokens {
                return Err(Error::Contract(format!(
                    "batch provides {} global slot ids, config wants {}",
                    self.global_ids.len(),
                    config.num_global_tokens
                )));
            }
        }
        Ok(())
    }

    /// A structurally valid batch with pseudo-random token ids, for counter
    /// verification and randomized probes.
    pub fn random(config: &FusionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.passage_seq_len;
        let g = config.num_global_tokens;
        let first_word = 4 + g;
        assert!(config.vocab_size > first_word, "vocabulary too small for random batch");
        let qlen = (s.saturating_sub(2)).clamp(1, 3).min(s);
        let word = |rng: &mut ChaCha8Rng| rng.random_range(first_word..config.vocab_size);
        let query_ids: Vec<usize> = (0..qlen).map(|_| word(&mut rng)).collect();
        let passages = (0..config.num_passages)
            .map(|_| {
                let ids: Vec<usize> = (0..s).map(|_| word(&mut rng)).collect();
                let ctx_start = (1 + qlen + 1).min(s);
                PassageTokens { ids, mask: vec![true; s], context: ctx_start..s }
            })
            .collect();
        TokenizedBatch {
            query_ids,
            passages,
            global_ids: (0..g).map(|i| 4 + i).collect(),
            query_positions: 1..(1 + qlen).min(s),
        }
    }
}

/// Per-layer tally of computed attention score entries, split by query
/// group. Counts only grow during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerPairs {
    pub passage_pairs: u128,
    pub global_pairs: u128,
}

#[derive(Debug, Clone, Default)]
pub struct PairCounter {
    layers: Vec<LayerPairs>,
}

impl PairCounter {
    pub fn new(num_layers: usize) -> Self {
        PairCounter { layers: vec![LayerPairs::default(); num_layers] }
    }

    pub fn add_passage_pairs(&mut self, layer: usize, pairs: u128) {
        self.layers[layer].passage_pairs += pairs;
    }

    pub fn add_global_pairs(&mut self, layer: usize, pairs: u128) {
        self.layers[layer].global_pairs += pairs;
    }

    pub fn layer(&self, layer: usize) -> &LayerPairs {
        &self.layers[layer]
    }

    pub fn layers(&self) -> &[LayerPairs] {
        &self.layers
    }

    pub fn total(&self) -> u128 {
        self.layers.iter().map(|l| l.passage_pairs + l.global_pairs).sum()
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            *l = LayerPairs::default();
        }
    }
}

/// Index layout of the joint attention space: all passage tokens in
/// passage-major order, then the global tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointLayout {
    pub num_passages: usize,
    pub seq_len: usize,
    pub num_global: usize,
}

impl JointLayout {
    pub fn total(&self) -> usize {
        self.num_passages * self.seq_len + self.num_global
    }

    pub fn passage_block(&self, j: usize) -> Range<usize> {
        j * self.seq_len..(j + 1) * self.seq_len
    }

    pub fn global_range(&self) -> Range<usize> {
        self.num_passages * self.seq_len..self.total()
    }
}

/// Row-stochastic attention weights of one query group at one layer.
#[derive(Debug, Clone)]
pub struct AttnBlock<T> {
    /// One `rows × cols` matrix per head.
    pub per_head: Vec<Array<T>>,
    /// Joint index of each query row.
    pub query_map: Vec<usize>,
    /// Joint index of each key column.
    pub key_map: Vec<usize>,
    /// Validity of each key column (padding keys are masked out).
    pub key_mask: Vec<bool>,
    /// Validity of each query row.
    pub query_mask: Vec<bool>,
    /// True when the query rows are global tokens.
    pub global_queries: bool,
}

/// All attention blocks of one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace<T> {
    pub blocks: Vec<AttnBlock<T>>,
}

/// Recorded per-layer, per-head attention weights plus the joint layout.
#[derive(Debug, Clone)]
pub struct AttentionTraces<T> {
    pub layers: Vec<LayerTrace<T>>,
    pub layout: JointLayout,
}

/// Final hidden states for every token of every passage, plus the global
/// token states and optional attention traces.
pub struct EncoderOutput<T> {
    pub passages: Vec<NodeId>,
    pub globals: Option<NodeId>,
    pub traces: Option<AttentionTraces<T>>,
}

/// States of one layer during the forward pass.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub passages: Vec<NodeId>,
    pub globals: Option<NodeId>,
}

struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

pub(crate) struct ModelParams {
    token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<LayerParams>,
    pub(crate) span_w1: ParamId,
    pub(crate) span_b1: ParamId,
    pub(crate) span_w2: ParamId,
    pub(crate) span_b2: ParamId,
    pub(crate) start_w: ParamId,
    pub(crate) start_b: ParamId,
    pub(crate) end_w: ParamId,
    pub(crate) end_b: ParamId,
}

/// Encoder plus scoring heads: configuration, parameters and their layout.
pub struct Model<T> {
    pub config: FusionConfig,
    pub params: ParamSet<T>,
    pub(crate) ids: ModelParams,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Model<T> {
    /// Initialize a fresh model. Weights draw from uniform ranges computed
    /// at f64 and cast, so initialization is identical across precisions
    /// for a fixed seed.
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.model_dim;
        let v = config.vocab_size;

        let uniform = |rng: &mut ChaCha8Rng, shape: Vec<usize>, r: f64| -> Array<T> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::from_f64(rng.random_range(-r..r))).collect();
            Array::new(shape, data).expect("init shape")
        };
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();

        let token_embedding = params.add("embed.token", uniform(&mut rng, vec![v, d], 0.05))?;
        let position_embedding =
            params.add("embed.pos", uniform(&mut rng, vec![config.passage_seq_len, d], 0.05))?;

        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let r = xavier(d, d);
            let pre = format!("layer.{l}");
            let layer = LayerParams {
                wq: params.add(format!("{pre}.attn.wq"), uniform(&mut rng, vec![d, d], r))?,
                bq: params.add(format!("{pre}.attn.bq"), Array::zeros(vec![d]))?,
                wk: params.add(format!("{pre}.attn.wk"), uniform(&mut rng, vec![d, d], r))?,
                bk: params.add(format!("{pre}.attn.bk"), Array::zeros(vec![d]))?,
                wv: params.add(format!("{pre}.attn.wv"), uniform(&mut rng, vec![d, d], r))?,
                bv: params.add(format!("{pre}.attn.bv"), Array::zeros(vec![d]))?,
                wo: params.add(format!("{pre}.attn.wo"), uniform(&mut rng, vec![d, d], r))?,
                bo: params.add(format!("{pre}.attn.bo"), Array::zeros(vec![d]))?,
                ln1_gain: params.add(format!("{pre}.ln1.gain"), Array::filled(vec![d], T::one()))?,
                ln1_bias: params.add(format!("{pre}.ln1.bias"), Array::zeros(vec![d]))?,
                ffn_w1: params.add(
                    format!("{pre}.ffn.w1"),
                    uniform(&mut rng, vec![d, config.ffn_dim], xavier(d, config.ffn_dim)),
                )?,
                ffn_b1: params.add(format!("{pre}.ffn.b1"), Array::zeros(vec![config.ffn_dim]))?,
                ffn_w2: params.add(
                    format!("{pre}.ffn.w2"),
                    uniform(&mut rng, vec![config.ffn_dim, d], xavier(config.ffn_dim, d)),
                )?,
                ffn_b2: params.add(format!("{pre}.ffn.b2"), Array::zeros(vec![d]))?,
                ln2_gain: params.add(format!("{pre}.ln2.gain"), Array::filled(vec![d], T::one()))?,
                ln2_bias: params.add(format!("{pre}.ln2.bias"), Array::zeros(vec![d]))?,
            };
            layers.push(layer);
        }

        // span scorer: two-layer feed-forward over concatenated start and
        // end states
        let span_w1 =
            params.add("span.w1", uniform(&mut rng, vec![2 * d, d], xavier(2 * d, d)))?;
        let span_b1 = params.add("span.b1", Array::zeros(vec![d]))?;
        let span_w2 = params.add("span.w2", uniform(&mut rng, vec![d, 1], xavier(d, 1)))?;
        let span_b2 = params.add("span.b2", Array::zeros(vec![1]))?;
        // linear start/end heads for the alternative probability spaces
        let start_w = params.add("head.start.w", uniform(&mut rng, vec![d, 1], xavier(d, 1)))?;
        let start_b = params.add("head.start.b", Array::zeros(vec![1]))?;
        let end_w = params.add("head.end.w", uniform(&mut rng, vec![d, 1], xavier(d, 1)))?;
        let end_b = params.add("head.end.b", Array::zeros(vec![1]))?;

        Ok(Model {
            config,
            params,
            ids: ModelParams {
                token_embedding,
                position_embedding,
                layers,
                span_w1,
                span_b1,
                span_w2,
                span_b2,
                start_w,
                start_b,
                end_w,
                end_b,
            },
        })
    }

    /// Layer-0 states. Passage tokens get token plus absolute position
    /// embeddings (positions restart at 0 for every passage). Global slots
    /// get only their dedicated token embeddings — they have no sequence
    /// position. In query-as-global mode the slots start from the query
    /// token embeddings instead, cycling if the query is shorter.
    pub fn embed_batch(&self, tape: &mut Tape<T>, batch: &TokenizedBatch) -> Result<LayerState> {
        batch.validate(&self.config)?;
        let table = tape.param(&self.params, self.ids.token_embedding);
        let pos_table = tape.param(&self.params, self.ids.position_embedding);
        let s = self.config.passage_seq_len;
        let positions: Vec<usize> = (0..s).collect();

        let mut passages = Vec::with_capacity(batch.passages.len());
        for p in &batch.passages {
            let tok = tape.embedding(table, &p.ids)?;
            let pos = tape.gather_rows(pos_table, &positions)?;
            passages.push(tape.add(tok, pos)?);
        }

        let g = self.config.effective_globals();
        let globals = if g == 0 {
            None
        } else {
            let ids: Vec<usize> = match self.config.fusion_mode {
                FusionMode::QueryAsGlobal => {
                    (0..g).map(|i| batch.query_ids[i % batch.query_ids.len()]).collect()
                }
                _ => batch.global_ids.clone(),
            };
            Some(tape.embedding(table, &ids)?)
        };
        Ok(LayerState { passages, globals })
    }

    /// Shared multi-head attention: `queries` over `keys`, masked softmax,
    /// concatenated heads, output projection. Counts `rows × cols` once per
    /// call into the counter.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn mha(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        queries: NodeId,
        keys: NodeId,
        key_mask: &[bool],
        counter: &mut PairCounter,
        global_queries: bool,
        record: bool,
    ) -> Result<(NodeId, Option<Vec<Array<T>>>)> {
        let lp = &self.ids.layers[layer];
        let rows = tape.value(queries).rows();
        let cols = tape.value(keys).rows();
        debug_assert_eq!(key_mask.len(), cols);
        if global_queries {
            counter.add_global_pairs(layer, rows as u128 * cols as u128);
        } else {
            counter.add_passage_pairs(layer, rows as u128 * cols as u128);
        }

        let wq = tape.param(&self.params, lp.wq);
        let bq = tape.param(&self.params, lp.bq);
        let wk = tape.param(&self.params, lp.wk);
        let bk = tape.param(&self.params, lp.bk);
        let wv = tape.param(&self.params, lp.wv);
        let bv = tape.param(&self.params, lp.bv);
        let wo = tape.param(&self.params, lp.wo);
        let bo = tape.param(&self.params, lp.bo);

        let q = tape.matmul(queries, wq)?;
        let q = tape.add_row(q, bq)?;
        let k = tape.matmul(keys, wk)?;
        let k = tape.add_row(k, bk)?;
        let v = tape.matmul(keys, wv)?;
        let v = tape.add_row(v, bv)?;

        let heads = self.config.num_heads;
        let dh = self.config.model_dim / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mask_data: Vec<bool> = (0..rows).flat_map(|_| key_mask.iter().copied()).collect();
        let mask = Array::new(vec![rows, cols], mask_data)?;

        let mut head_outputs = Vec::with_capacity(heads);
        let mut head_weights = record.then(Vec::new);
        for h in 0..heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, 1, Some(mask.clone()))?;
            if let Some(w) = head_weights.as_mut() {
                w.push(tape.value(weights).clone());
            }
            head_outputs.push(tape.matmul(weights, vh)?);
        }
        let ctx = tape.concat(&head_outputs, 1)?;
        let out = tape.matmul(ctx, wo)?;
        let out = tape.add_row(out, bo)?;
        Ok((out, head_weights))
    }

    fn add_norm(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        residual: NodeId,
        sublayer: NodeId,
        second: bool,
    ) -> Result<NodeId> {
        let lp = &self.ids.layers[layer];
        let (g, b) = if second { (lp.ln2_gain, lp.ln2_bias) } else { (lp.ln1_gain, lp.ln1_bias) };
        let gain = tape.param(&self.params, g);
        let bias = tape.param(&self.params, b);
        let sum = tape.add(residual, sublayer)?;
        tape.layer_norm(sum, gain, bias, T::from_f64(LAYER_NORM_EPS))
    }

    fn ffn_block(&self, tape: &mut Tape<T>, layer: usize, x: NodeId) -> Result<NodeId> {
        let lp = &self.ids.layers[layer];
        let w1 = tape.param(&self.params, lp.ffn_w1);
        let b1 = tape.param(&self.params, lp.ffn_b1);
        let w2 = tape.param(&self.params, lp.ffn_w2);
        let b2 = tape.param(&self.params, lp.ffn_b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        self.add_norm(tape, layer, x, o, true)
    }

    /// Attention update for one passage's tokens at one layer, followed by
    /// residual and layer norm. Key sets depend on the fusion mode.
    #[allow(clippy::too_many_arguments)]
    pub fn passage_attention(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        passage: usize,
        prev: &LayerState,
        batch: &TokenizedBatch,
        counter: &mut PairCounter,
        record: bool,
    ) -> Result<(NodeId, Vec<AttnBlock<T>>)> {
        if layer >= self.config.num_layers {
            return Err(Error::Contract(format!(
                "layer {layer} out of range for {} layers",
                self.config.num_layers
            )));
        }
        let s = self.config.passage_seq_len;
        let layout = self.joint_layout(batch);
        let own = prev.passages[passage];
        let own_mask = &batch.passages[passage].mask;
        let own_indices: Vec<usize> = layout.passage_block(passage).collect();
        let mut blocks = Vec::new();

        let states = match self.config.fusion_mode {
            FusionMode::ClsToCls => {
                // Leading token additionally attends to the other passages'
                // leading tokens; every other position sees vanilla keys.
                let cls_rows: Vec<NodeId> = (0..prev.passages.len())
                    .filter(|&j| j != passage)
                    .map(|j| tape.slice(prev.passages[j], 0, 0, 1))
                    .collect::<Result<_>>()?;
                let q_cls = tape.slice(own, 0, 0, 1)?;
                let (cls_keys, cls_mask, cls_key_map) = if cls_rows.is_empty() {
                    (own, own_mask.clone(), own_indices.clone())
                } else {
                    let mut parts = vec![own];
                    parts.extend(cls_rows);
                    let keys = tape.concat(&parts, 0)?;
                    let mut mask = own_mask.clone();
                    let mut map = own_indices.clone();
                    for j in (0..prev.passages.len()).filter(|&j| j != passage) {
                        mask.push(true);
                        map.push(layout.passage_block(j).start);
                    }
                    (keys, mask, map)
                };
                let (cls_out, cls_w) =
                    self.mha(tape, layer, q_cls, cls_keys, &cls_mask, counter, false, record)?;
                if let Some(w) = cls_w {
                    blocks.push(AttnBlock {
                        per_head: w,
                        query_map: vec![own_indices[0]],
                        key_map: cls_key_map,
                        key_mask: cls_mask,
                        query_mask: vec![own_mask[0]],
                        global_queries: false,
                    });
                }
                if s > 1 {
                    let q_rest = tape.slice(own, 0, 1, s - 1)?;
                    let (rest_out, rest_w) =
                        self.mha(tape, layer, q_rest, own, own_mask, counter, false, record)?;
                    if let Some(w) = rest_w {
                        blocks.push(AttnBlock {
                            per_head: w,
                            query_map: own_indices[1..].to_vec(),
                            key_map: own_indices.clone(),
                            key_mask: own_mask.clone(),
                            query_mask: own_mask[1..].to_vec(),
                            global_queries: false,
                        });
                    }
                    tape.concat(&[cls_out, rest_out], 0)?
                } else {
                    cls_out
                }
            }
            _ => {
                // Keys are the passage's own tokens, concatenated with the
                // global tokens when the mode has them.
                let (keys, key_mask, key_map) = match prev.globals {
                    Some(globals) => {
                        let keys = tape.concat(&[own, globals], 0)?;
                        let g = self.config.effective_globals();
                        let mut mask = own_mask.clone();
                        mask.extend(std::iter::repeat_n(true, g));
                        let mut map = own_indices.clone();
                        map.extend(layout.global_range());
                        (keys, mask, map)
                    }
                    None => (own, own_mask.clone(), own_indices.clone()),
                };
                let (out, w) =
                    self.mha(tape, layer, own, keys, &key_mask, counter, false, record)?;
                if let Some(w) = w {
                    blocks.push(AttnBlock {
                        per_head: w,
                        query_map: own_indices.clone(),
                        key_map,
                        key_mask,
                        query_mask: own_mask.clone(),
                        global_queries: false,
                    });
                }
                out
            }
        };
        let out = self.add_norm(tape, layer, own, states, false)?;
        Ok((out, blocks))
    }

    /// Attention update for the global tokens at one layer: queries are the
    /// global tokens, keys are all (unmasked) tokens of all passages plus
    /// the globals themselves — or only the passages' leading tokens plus
    /// globals in the restricted mode.
    pub fn global_attention(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        prev: &LayerState,
        batch: &TokenizedBatch,
        counter: &mut PairCounter,
        record: bool,
    ) -> Result<(NodeId, Vec<AttnBlock<T>>)> {
        if !self.config.fusion_mode.has_global_tokens() {
            return Err(Error::ModeError {
                mode: self.config.fusion_mode.to_string(),
                reason: "global attention requires global tokens".into(),
            });
        }
        let globals = prev.globals.ok_or_else(|| Error::ModeError {
            mode: self.config.fusion_mode.to_string(),
            reason: "no global token states present".into(),
        })?;
        let layout = self.joint_layout(batch);
        let g = self.config.effective_globals();
        let n = prev.passages.len();

        let (keys, key_mask, key_map) = match self.config.fusion_mode {
            FusionMode::GlobalToClsOnly => {
                let mut parts: Vec<NodeId> = (0..n)
                    .map(|j| tape.slice(prev.passages[j], 0, 0, 1))
                    .collect::<Result<_>>()?;
                parts.push(globals);
                let keys = tape.concat(&parts, 0)?;
                let mut mask = vec![true; n];
                mask.extend(std::iter::repeat_n(true, g));
                let mut map: Vec<usize> = (0..n).map(|j| layout.passage_block(j).start).collect();
                map.extend(layout.global_range());
                (keys, mask, map)
            }
            _ => {
                let mut parts = prev.passages.clone();
                parts.push(globals);
                let keys = tape.concat(&parts, 0)?;
                let mut mask: Vec<bool> = Vec::with_capacity(layout.total());
                for p in &batch.passages {
                    mask.extend(p.mask.iter().copied());
                }
                mask.extend(std::iter::repeat_n(true, g));
                let map: Vec<usize> = (0..layout.total()).collect();
                (keys, mask, map)
            }
        };
        let (out, w) = self.mha(tape, layer, globals, keys, &key_mask, counter, true, record)?;
        let mut blocks = Vec::new();
        if let Some(w) = w {
            blocks.push(AttnBlock {
                per_head: w,
                query_map: layout.global_range().collect(),
                key_map,
                key_mask,
                query_mask: vec![true; g],
                global_queries: true,
            });
        }
        let out = self.add_norm(tape, layer, globals, out, false)?;
        Ok((out, blocks))
    }

    /// Final-layer attention over the concatenation of all passages.
    pub fn full_concat_attention(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        prev: &LayerState,
        batch: &TokenizedBatch,
        counter: &mut PairCounter,
        record: bool,
    ) -> Result<(Vec<NodeId>, Vec<AttnBlock<T>>)> {
        if self.config.fusion_mode != FusionMode::FullConcat {
            return Err(Error::ModeError {
                mode: self.config.fusion_mode.to_string(),
                reason: "full-concat attention only runs in full_concat mode".into(),
            });
        }
        let layout = self.joint_layout(batch);
        let s = self.config.passage_seq_len;
        let big = tape.concat(&prev.passages, 0)?;
        let mut mask: Vec<bool> = Vec::with_capacity(layout.total());
        for p in &batch.passages {
            mask.extend(p.mask.iter().copied());
        }
        let (out, w) = self.mha(tape, layer, big, big, &mask, counter, false, record)?;
        let mut blocks = Vec::new();
        if let Some(w) = w {
            let map: Vec<usize> = (0..prev.passages.len() * s).collect();
            blocks.push(AttnBlock {
                per_head: w,
                query_map: map.clone(),
                key_map: map,
                key_mask: mask.clone(),
                query_mask: mask.clone(),
                global_queries: false,
            });
        }
        let mut passages = Vec::with_capacity(prev.passages.len());
        for j in 0..prev.passages.len() {
            let part = tape.slice(out, 0, j * s, s)?;
            passages.push(self.add_norm(tape, layer, prev.passages[j], part, false)?);
        }
        Ok((passages, blocks))
    }

    pub fn joint_layout(&self, batch: &TokenizedBatch) -> JointLayout {
        JointLayout {
            num_passages: batch.passages.len(),
            seq_len: self.config.passage_seq_len,
            num_global: self.config.effective_globals(),
        }
    }

    /// Run the full encoder. Both query groups of a layer read the same
    /// previous-layer snapshot; a feed-forward block with residual and norm
    /// follows for every token, including the globals.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &TokenizedBatch,
        record_traces: bool,
    ) -> Result<(EncoderOutput<T>, PairCounter)> {
        let mut counter = PairCounter::new(self.config.num_layers);
        let mut state = self.embed_batch(tape, batch)?;
        let mut traces = record_traces.then(Vec::new);

        for layer in 0..self.config.num_layers {
            let prev = state.clone();
            let mut layer_blocks = Vec::new();

            let globals = match prev.globals {
                Some(_) => {
                    let (g, blocks) =
                        self.global_attention(tape, layer, &prev, batch, &mut counter, record_traces)?;
                    layer_blocks.extend(blocks);
                    Some(self.ffn_block(tape, layer, g)?)
                }
                None => None,
            };

            let mut passages = Vec::with_capacity(prev.passages.len());
            if self.config.fusion_mode == FusionMode::FullConcat
                && layer == self.config.num_layers - 1
            {
                let (attended, blocks) =
                    self.full_concat_attention(tape, layer, &prev, batch, &mut counter, record_traces)?;
                layer_blocks.extend(blocks);
                for x in attended {
                    passages.push(self.ffn_block(tape, layer, x)?);
                }
            } else {
                for j in 0..prev.passages.len() {
                    let (attended, blocks) = self.passage_attention(
                        tape,
                        layer,
                        j,
                        &prev,
                        batch,
                        &mut counter,
                        record_traces,
                    )?;
                    layer_blocks.extend(blocks);
                    passages.push(self.ffn_block(tape, layer, attended)?);
                }
            }

            for (j, &p) in passages.iter().enumerate() {
                tape.assert_finite(p, &format!("encoder layer {layer}, passage {j}"))?;
            }
            if let Some(g) = globals {
                tape.assert_finite(g, &format!("encoder layer {layer}, global tokens"))?;
            }
            if let Some(t) = traces.as_mut() {
                t.push(LayerTrace { blocks: layer_blocks });
            }
            state = LayerState { passages, globals };
        }

        let output = EncoderOutput {
            passages: state.passages,
            globals: state.globals,
            traces: traces.map(|layers| AttentionTraces { layers, layout: self.joint_layout(batch) }),
        };
        Ok((output, counter))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(
        mode: FusionMode,
        n: usize,
        s: usize,
        g: usize,
        l: usize,
    ) -> FusionConfig {
        FusionConfig {
            num_layers: l,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            num_passages: n,
            passage_seq_len: s,
            num_global_tokens: g,
            fusion_mode: mode,
            max_answer_len: 3,
            vocab_size: 40,
        }
    }

    fn forward_values(config: &FusionConfig, batch: &TokenizedBatch, seed: u64) -> Vec<Vec<f64>> {
        let model = Model::<f64>::new(config.clone(), seed).unwrap();
        let mut tape = Tape::new();
        let (out, _) = model.forward(&mut tape, batch, false).unwrap();
        out.passages.iter().map(|&p| tape.value(p).data().to_vec()).collect()
    }

    #[test]
    fn identical_passages_embed_identically() {
        let config = tiny_config(FusionMode::GlobalTokens, 2, 5, 2, 1);
        let mut batch = TokenizedBatch::random(&config, 3);
        batch.passages[1] = batch.passages[0].clone();
        let model = Model::<f64>::new(config, 7).unwrap();
        let mut tape = Tape::new();
        let state = model.embed_batch(&mut tape, &batch).unwrap();
        assert_eq!(
            tape.value(state.passages[0]).data(),
            tape.value(state.passages[1]).data()
        );
    }

    #[test]
    fn zero_globals_match_none_mode_bitwise() {
        let mut c_none = tiny_config(FusionMode::None, 2, 5, 0, 2);
        c_none.num_global_tokens = 0;
        let mut c_glob = c_none.clone();
        c_glob.fusion_mode = FusionMode::GlobalTokens;
        let batch = TokenizedBatch::random(&c_none, 11);
        let a = forward_values(&c_none, &batch, 5);
        let b = forward_values(&c_glob, &batch, 5);
        for (x, y) in a.iter().zip(&b) {
            let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn query_as_global_initializes_from_query_embeddings() {
        let config = tiny_config(FusionMode::QueryAsGlobal, 1, 6, 2, 1);
        let batch = TokenizedBatch::random(&config, 4);
        let model = Model::<f64>::new(config, 9).unwrap();
        let mut tape = Tape::new();
        let state = model.embed_batch(&mut tape, &batch).unwrap();
        let globals = tape.value(state.globals.unwrap()).clone();
        let table = &model.params.get(model.ids.token_embedding).value;
        let d = model.config.model_dim;
        for gidx in 0..2 {
            let qid = batch.query_ids[gidx % batch.query_ids.len()];
            assert_eq!(globals.row(gidx), &table.data()[qid * d..(qid + 1) * d]);
        }
    }

    #[test]
    fn global_slots_cycle_short_queries() {
        let mut config = tiny_config(FusionMode::QueryAsGlobal, 1, 6, 3, 1);
        config.num_global_tokens = 3;
        let mut batch = TokenizedBatch::random(&config, 4);
        batch.query_ids = vec![10];
        batch.query_positions = 1..2;
        let model = Model::<f64>::new(config, 9).unwrap();
        let mut tape = Tape::new();
        let state = model.embed_batch(&mut tape, &batch).unwrap();
        let globals = tape.value(state.globals.unwrap()).clone();
        assert_eq!(globals.row(0), globals.row(1));
        assert_eq!(globals.row(1), globals.row(2));
    }

    #[test]
    fn pair_counts_match_mode_formulas() {
        // passage rows attend to S+G keys, globals to N·S+G
        let (n, s, g, l) = (2usize, 5usize, 3usize, 2usize);
        let config = tiny_config(FusionMode::GlobalTokens, n, s, g, l);
        let batch = TokenizedBatch::random(&config, 1);
        let model = Model::<f64>::new(config, 2).unwrap();
        let mut tape = Tape::new();
        let (_, counter) = model.forward(&mut tape, &batch, false).unwrap();
        for layer in 0..l {
            assert_eq!(counter.layer(layer).passage_pairs, (n * s * (s + g)) as u128);
            assert_eq!(counter.layer(layer).global_pairs, (g * (n * s + g)) as u128);
        }
    }

    #[test]
    fn global_to_cls_only_counts() {
        let (n, s, g) = (3usize, 4usize, 2usize);
        let config = tiny_config(FusionMode::GlobalToClsOnly, n, s, g, 1);
        let batch = TokenizedBatch::random(&config, 1);
        let model = Model::<f64>::new(config, 2).unwrap();
        let mut tape = Tape::new();
        let (_, counter) = model.forward(&mut tape, &batch, false).unwrap();
        assert_eq!(counter.layer(0).global_pairs, (g * (n + g)) as u128);
        assert_eq!(counter.layer(0).passage_pairs, (n * s * (s + g)) as u128);
    }

    #[test]
    fn full_concat_pair_total() {
        // (L−1)·N·S² + (N·S)² = 1·2·9 + 36 = 54
        let config = tiny_config(FusionMode::FullConcat, 2, 3, 0, 2);
        let batch = TokenizedBatch::random(&config, 1);
        let model = Model::<f64>::new(config, 2).unwrap();
        let mut tape = Tape::new();
        let (_, counter) = model.forward(&mut tape, &batch, false).unwrap();
        assert_eq!(counter.total(), 54);
    }

    #[test]
    fn none_mode_is_independent_across_passages() {
        let config = tiny_config(FusionMode::None, 2, 5, 0, 2);
        let batch_a = TokenizedBatch::random(&config, 21);
        let mut batch_b = batch_a.clone();
        // mutate passage 2's content
        batch_b.passages[1].ids[3] = batch_b.passages[1].ids[3] % 10 + 20;
        let a = forward_values(&config, &batch_a, 5);
        let b = forward_values(&config, &batch_b, 5);
        assert_eq!(a[0], b[0], "passage 1 must be unaffected");
        assert_ne!(a[1], b[1], "passage 2 must change");
    }

    #[test]
    fn global_tokens_open_a_cross_passage_path() {
        let config = tiny_config(FusionMode::GlobalTokens, 2, 5, 2, 2);
        let batch_a = TokenizedBatch::random(&config, 21);
        let mut batch_b = batch_a.clone();
        batch_b.passages[1].ids[3] = batch_b.passages[1].ids[3] % 10 + 20;
        let a = forward_values(&config, &batch_a, 5);
        let b = forward_values(&config, &batch_b, 5);
        assert_ne!(a[0], b[0], "cross-passage path must exist via globals");
    }

    #[test]
    fn passage_permutation_equivariance() {
        let config = tiny_config(FusionMode::GlobalTokens, 3, 5, 2, 2);
        let batch = TokenizedBatch::random(&config, 33);
        let mut permuted = batch.clone();
        permuted.passages.rotate_left(1);
        let model = Model::<f64>::new(config, 3).unwrap();
        let mut tape_a = Tape::new();
        let (out_a, _) = model.forward(&mut tape_a, &batch, false).unwrap();
        let mut tape_b = Tape::new();
        let (out_b, _) = model.forward(&mut tape_b, &permuted, false).unwrap();
        for j in 0..3 {
            let a = tape_a.value(out_a.passages[(j + 1) % 3]).data();
            let b = tape_b.value(out_b.passages[j]).data();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let ga = tape_a.value(out_a.globals.unwrap()).data();
        let gb = tape_b.value(out_b.globals.unwrap()).data();
        for (x, y) in ga.iter().zip(gb) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_key_states_yield_the_common_value_row() {
        let config = tiny_config(FusionMode::None, 1, 4, 0, 1);
        let model = Model::<f64>::new(config, 3).unwrap();
        let mut tape = Tape::new();
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let states = tape.leaf(Array::new(vec![4, 8], data).unwrap());
        let mut counter = PairCounter::new(1);
        let (out, _) = model
            .mha(&mut tape, 0, states, states, &[true; 4], &mut counter, false, false)
            .unwrap();
        let v = tape.value(out);
        for r in 1..4 {
            for c in 0..8 {
                assert!((v.row(0)[c] - v.row(r)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_attention_rejected_in_none_mode() {
        let config = tiny_config(FusionMode::None, 2, 4, 0, 1);
        let batch = TokenizedBatch::random(&config, 1);
        let model = Model::<f64>::new(config, 2).unwrap();
        let mut tape = Tape::new();
        let state = model.embed_batch(&mut tape, &batch).unwrap();
        let mut counter = PairCounter::new(1);
        let err = model.global_attention(&mut tape, 0, &state, &batch, &mut counter, false);
        assert!(matches!(err, Err(Error::ModeError { .. })));
    }

    #[test]
    fn out_of_vocabulary_id_is_rejected() {
        let config = tiny_config(FusionMode::None, 1, 4, 0, 1);
        let mut batch = TokenizedBatch::random(&config, 1);
        batch.passages[0].ids[2] = 1000;
        let model = Model::<f64>::new(config, 2).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            model.embed_batch(&mut tape, &batch),
            Err(Error::VocabOutOfRange { .. })
        ));
    }

    #[test]
    fn cls_to_cls_counts_and_shape() {
        let (n, s, l) = (3usize, 4usize, 2usize);
        let config = tiny_config(FusionMode::ClsToCls, n, s, 0, l);
        let batch = TokenizedBatch::random(&config, 8);
        let model = Model::<f64>::new(config, 2).unwrap();
        let mut tape = Tape::new();
        let (out, counter) = model.forward(&mut tape, &batch, false).unwrap();
        // per passage: (S−1)·S for the other rows + (S+N−1) for the head row
        let per_layer = (n * (s * s + n - 1)) as u128;
        assert_eq!(counter.layer(0).passage_pairs, per_layer);
        assert_eq!(counter.total(), per_layer * l as u128);
        assert_eq!(tape.value(out.passages[0]).shape(), &[s, 8]);
    }

    #[test]
    fn traces_are_row_stochastic_over_unmasked_keys() {
        let config = tiny_config(FusionMode::GlobalTokens, 2, 5, 2, 2);
        let mut batch = TokenizedBatch::random(&config, 13);
        batch.passages[1].mask[4] = false; // one padded key
        let model = Model::<f64>::new(config, 3).unwrap();
        let mut tape = Tape::new();
        let (out, _) = model.forward(&mut tape, &batch, true).unwrap();
        let traces = out.traces.unwrap();
        assert_eq!(traces.layers.len(), 2);
        for layer in &traces.layers {
            for block in &layer.blocks {
                for head in &block.per_head {
                    for r in 0..head.rows() {
                        let sum: f64 = head.row(r).iter().sum();
                        assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                        for (c, &m) in block.key_mask.iter().enumerate() {
                            if !m {
                                assert_eq!(head.row(r)[c], 0.0, "masked key must get 0");
                            }
                        }
                    }
                }
            }
        }
    }
}
