//! The probability space over answer spans.
//!
//! Candidate spans are every contiguous token range of length up to
//! `max_answer_len` inside a passage's context region; longer spans are
//! never materialized, so their probability is implicitly zero. The main
//! space scores each candidate directly from the concatenated start and end
//! states and normalizes with a single softmax across all spans of all
//! passages. Span probabilities matching the same normalized surface string
//! are summed into a per-string score table used for prediction and for the
//! marginal-likelihood objective.
//!
//! Alternative spaces kept for comparison:
//!
//! - `NoncondStartEnd`: independent per-token start and end logits, summed
//!   per span, then one global softmax over spans.
//! - `SeparateGlobal`: start and end distributions each softmaxed over all
//!   context tokens of all passages; span probability is their product.
//! - `PerPassageBaseline`: the same product, but with per-passage softmaxes.
//! - `SpanReprSumString` / `LogitSumString`: aggregate per string before a
//!   softmax over strings.
//!
//! All variants share the same length-limited span enumeration so their
//! scores are comparable.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderOutput, Model, TokenizedBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Array;
use crate::text::normalize_answer;

/// Spans are scored through the two-layer feed-forward in chunks of at most
/// this many candidates, bounding peak memory.
const SPAN_CHUNK: usize = 1 << 16;

/// Probability-space variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbSpaceVariant {
    DirectSpan,
    NoncondStartEnd,
    SeparateGlobal,
    SpanReprSumString,
    LogitSumString,
    PerPassageBaseline,
}

/// Training objective: marginal likelihood, optionally combined with a
/// hard-EM term on a selected gold span set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mml,
    MmlPlusHardemMax,
    MmlPlusHardemMin,
    MmlPlusHardemMass80,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardEmMode {
    Max,
    Min,
    Mass80,
}

impl Objective {
    pub fn hardem_mode(self) -> Option<HardEmMode> {
        match self {
            Objective::Mml => None,
            Objective::MmlPlusHardemMax => Some(HardEmMode::Max),
            Objective::MmlPlusHardemMin => Some(HardEmMode::Min),
            Objective::MmlPlusHardemMass80 => Some(HardEmMode::Mass80),
        }
    }
}

fn default_hardem_weight() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbSpaceConfig {
    pub variant: ProbSpaceVariant,
    pub objective: Objective,
    #[serde(default = "default_hardem_weight")]
    pub hardem_weight: f64,
}

impl ProbSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hardem_weight < 0.0 {
            return Err(Error::Config("hardem_weight must be non-negative".into()));
        }
        if self.objective.hardem_mode().is_some() && self.is_string_level() {
            return Err(Error::Config(
                "hard-EM objectives need span-level probabilities; string-level variants do not define them".into(),
            ));
        }
        Ok(())
    }

    pub fn is_string_level(&self) -> bool {
        matches!(
            self.variant,
            ProbSpaceVariant::SpanReprSumString | ProbSpaceVariant::LogitSumString
        )
    }
}

impl Default for ProbSpaceConfig {
    fn default() -> Self {
        ProbSpaceConfig {
            variant: ProbSpaceVariant::DirectSpan,
            objective: Objective::Mml,
            hardem_weight: default_hardem_weight(),
        }
    }
}

/// One candidate answer span. `end` is inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanCandidate<T> {
    pub passage: usize,
    pub start: usize,
    pub end: usize,
    pub logit: T,
    pub prob: T,
}

/// Aggregated probability of one normalized answer string.
#[derive(Debug, Clone)]
pub struct StringEntry<T> {
    pub probability: T,
    /// Indices into the candidate list; every span contributes to exactly
    /// one string.
    pub spans: Vec<usize>,
    /// Earliest contributing (passage, start, end), the prediction tie-break.
    pub first: (usize, usize, usize),
}

/// Normalized answer string → aggregated probability.
#[derive(Debug, Clone, Default)]
pub struct StringScoreTable<T> {
    pub entries: BTreeMap<String, StringEntry<T>>,
}

impl<T: Scalar> StringScoreTable<T> {
    pub fn total_mass(&self) -> T {
        let mut acc = T::zero();
        for e in self.entries.values() {
            acc += e.probability;
        }
        acc
    }

    pub fn probability(&self, s: &str) -> Option<T> {
        self.entries.get(s).map(|e| e.probability)
    }
}

/// Per-token start/end distributions of the product-based variants, for
/// analysis of their independence assumption.
#[derive(Debug, Clone)]
pub struct StartEndDists<T> {
    /// (passage, position) for each context token, passage-major.
    pub positions: Vec<(usize, usize)>,
    pub p_start: Vec<T>,
    pub p_end: Vec<T>,
}

pub(crate) enum GradHandle {
    /// Probabilities are one softmax over span logits.
    SpanSoftmax { logits: NodeId },
    /// Probabilities are start·end products (no single span softmax).
    Product { probs: NodeId },
    /// Probabilities live on strings, softmaxed over string logits.
    StringSoftmax { logits: NodeId, order: Vec<String> },
}

/// Scored candidates, the string table, and the differentiable handles
/// needed to build training losses.
pub struct ScoredSpans<T> {
    pub candidates: Vec<SpanCandidate<T>>,
    pub strings: StringScoreTable<T>,
    /// Normalized surface string of each candidate.
    pub candidate_strings: Vec<String>,
    pub start_end_dists: Option<StartEndDists<T>>,
    pub(crate) grad: GradHandle,
}

/// Loss of one example; `None` with `skipped` set when no candidate matches
/// a gold answer.
pub struct LossOutcome {
    pub loss: Option<NodeId>,
    pub skipped: bool,
}

/// All spans of length 1..=`max_len` lying fully inside each passage's
/// context region. Candidates are ordered by (passage, start, end).
pub fn enumerate_spans<T: Scalar>(
    batch: &TokenizedBatch,
    max_len: usize,
) -> Vec<SpanCandidate<T>> {
    let mut out = Vec::new();
    for (j, p) in batch.passages.iter().enumerate() {
        for start in p.context.clone() {
            if !p.mask[start] {
                continue;
            }
            let mut end = start;
            while end < p.context.end && end - start < max_len && p.mask[end] {
                out.push(SpanCandidate {
                    passage: j,
                    start,
                    end,
                    logit: T::zero(),
                    prob: T::zero(),
                });
                end += 1;
            }
        }
    }
    out
}

/// One softmax over the flat candidate logits across every passage.
pub fn global_span_softmax<T: Scalar>(tape: &mut Tape<T>, logits: NodeId) -> Result<NodeId> {
    if tape.value(logits).numel() == 0 {
        return Err(Error::EmptySpanList);
    }
    tape.softmax(logits, 0, None)
}

impl<T: Scalar> Model<T> {
    fn concat_passage_states(
        &self,
        tape: &mut Tape<T>,
        output: &EncoderOutput<T>,
    ) -> Result<NodeId> {
        tape.concat(&output.passages, 0)
    }

    /// Direct span logits: W(h_start ⊕ h_end) through a two-layer
    /// feed-forward, evaluated in bounded chunks.
    pub fn span_logits(
        &self,
        tape: &mut Tape<T>,
        output: &EncoderOutput<T>,
        batch: &TokenizedBatch,
        spans: &[SpanCandidate<T>],
    ) -> Result<NodeId> {
        if spans.is_empty() {
            return Err(Error::EmptySpanList);
        }
        let s = self.config.passage_seq_len;
        for sp in spans {
            if let Err(e) = self.span_contract_check(batch, sp) {
                return Err(Error::Contract(format!("span outside context: {e}")));
            }
        }
        let all = self.concat_passage_states(tape, output)?;
        let w1 = tape.param(&self.params, self.ids.span_w1);
        let b1 = tape.param(&self.params, self.ids.span_b1);
        let w2 = tape.param(&self.params, self.ids.span_w2);
        let b2 = tape.param(&self.params, self.ids.span_b2);

        let mut chunks = Vec::new();
        for chunk in spans.chunks(SPAN_CHUNK) {
            let starts: Vec<usize> = chunk.iter().map(|sp| sp.passage * s + sp.start).collect();
            let ends: Vec<usize> = chunk.iter().map(|sp| sp.passage * s + sp.end).collect();
            let hs = tape.gather_rows(all, &starts)?;
            let he = tape.gather_rows(all, &ends)?;
            let rep = tape.concat(&[hs, he], 1)?;
            let h = tape.matmul(rep, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.gelu(h);
            let o = tape.matmul(h, w2)?;
            let o = tape.add_row(o, b2)?;
            chunks.push(tape.reshape(o, vec![chunk.len()])?);
        }
        tape.concat(&chunks, 0)
    }

    fn span_contract_check(
        &self,
        batch: &TokenizedBatch,
        sp: &SpanCandidate<T>,
    ) -> std::result::Result<(), String> {
        if sp.passage >= batch.passages.len() {
            return Err(format!("passage {} out of range", sp.passage));
        }
        if sp.end < sp.start || sp.end - sp.start >= self.config.max_answer_len {
            return Err(format!(
                "span [{}, {}] violates the length limit {}",
                sp.start, sp.end, self.config.max_answer_len
            ));
        }
        let ctx = &batch.passages[sp.passage].context;
        if sp.start < ctx.start || sp.end >= ctx.end {
            return Err(format!(
                "span [{}, {}] leaves the context region {:?}",
                sp.start, sp.end, ctx
            ));
        }
        Ok(())
    }

    /// Per-position start and end logits from the linear heads, as flat
    /// vectors over all `N·S` positions.
    fn start_end_logits(
        &self,
        tape: &mut Tape<T>,
        output: &EncoderOutput<T>,
    ) -> Result<(NodeId, NodeId)> {
        let all = self.concat_passage_states(tape, output)?;
        let n_rows = tape.value(all).rows();
        let sw = tape.param(&self.params, self.ids.start_w);
        let sb = tape.param(&self.params, self.ids.start_b);
        let ew = tape.param(&self.params, self.ids.end_w);
        let eb = tape.param(&self.params, self.ids.end_b);
        let s_start = tape.matmul(all, sw)?;
        let s_start = tape.add_row(s_start, sb)?;
        let s_start = tape.reshape(s_start, vec![n_rows])?;
        let s_end = tape.matmul(all, ew)?;
        let s_end = tape.add_row(s_end, eb)?;
        let s_end = tape.reshape(s_end, vec![n_rows])?;
        Ok((s_start, s_end))
    }

    /// Score all candidates under the configured probability space.
    pub fn score_spans(
        &self,
        tape: &mut Tape<T>,
        output: &EncoderOutput<T>,
        batch: &TokenizedBatch,
        token_table: &[String],
        space: &ProbSpaceConfig,
    ) -> Result<ScoredSpans<T>> {
        space.validate()?;
        let mut candidates = enumerate_spans::<T>(batch, self.config.max_answer_len);
        if candidates.is_empty() {
            return Err(Error::EmptySpanList);
        }
        let candidate_strings: Vec<String> = candidates
            .iter()
            .map(|sp| span_string(batch, token_table, sp.passage, sp.start, sp.end))
            .collect::<Result<_>>()?;

        let s = self.config.passage_seq_len;
        let mut start_end_dists = None;

        let grad = match space.variant {
            ProbSpaceVariant::DirectSpan => {
                let logits = self.span_logits(tape, output, batch, &candidates)?;
                let probs = global_span_softmax(tape, logits)?;
                fill_candidates(tape, &mut candidates, Some(logits), probs);
                GradHandle::SpanSoftmax { logits }
            }
            ProbSpaceVariant::NoncondStartEnd => {
                let (s_start, s_end) = self.start_end_logits(tape, output)?;
                let st_ids: Vec<usize> =
                    candidates.iter().map(|sp| sp.passage * s + sp.start).collect();
                let en_ids: Vec<usize> =
                    candidates.iter().map(|sp| sp.passage * s + sp.end).collect();
                let g_st = tape.gather_rows(s_start, &st_ids)?;
                let g_en = tape.gather_rows(s_end, &en_ids)?;
                let logits = tape.add(g_st, g_en)?;
                let probs = global_span_softmax(tape, logits)?;
                fill_candidates(tape, &mut candidates, Some(logits), probs);
                GradHandle::SpanSoftmax { logits }
            }
            ProbSpaceVariant::SeparateGlobal | ProbSpaceVariant::PerPassageBaseline => {
                let (s_start, s_end) = self.start_end_logits(tape, output)?;
                // context positions, passage-major
                let mut positions = Vec::new();
                let mut flat = Vec::new();
                for (j, p) in batch.passages.iter().enumerate() {
                    for pos in p.context.clone() {
                        if p.mask[pos] {
                            positions.push((j, pos));
                            flat.push(j * s + pos);
                        }
                    }
                }
                let (p_start, p_end) = if space.variant == ProbSpaceVariant::SeparateGlobal {
                    let gs = tape.gather_rows(s_start, &flat)?;
                    let ge = tape.gather_rows(s_end, &flat)?;
                    (tape.softmax(gs, 0, None)?, tape.softmax(ge, 0, None)?)
                } else {
                    // per-passage softmaxes, concatenated in passage order
                    let mut ps = Vec::new();
                    let mut pe = Vec::new();
                    let mut cursor = 0usize;
                    for j in 0..batch.passages.len() {
                        let count = positions[cursor..].iter().take_while(|(jj, _)| *jj == j).count();
                        if count == 0 {
                            continue;
                        }
                        let ids = &flat[cursor..cursor + count];
                        let gs = tape.gather_rows(s_start, ids)?;
                        let ge = tape.gather_rows(s_end, ids)?;
                        ps.push(tape.softmax(gs, 0, None)?);
                        pe.push(tape.softmax(ge, 0, None)?);
                        cursor += count;
                    }
                    (tape.concat(&ps, 0)?, tape.concat(&pe, 0)?)
                };
                let index_of: HashMap<usize, usize> =
                    flat.iter().enumerate().map(|(i, &f)| (f, i)).collect();
                let st_idx: Vec<usize> = candidates
                    .iter()
                    .map(|sp| index_of[&(sp.passage * s + sp.start)])
                    .collect();
                let en_idx: Vec<usize> = candidates
                    .iter()
                    .map(|sp| index_of[&(sp.passage * s + sp.end)])
                    .collect();
                let gp_st = tape.gather_rows(p_start, &st_idx)?;
                let gp_en = tape.gather_rows(p_end, &en_idx)?;
                let probs = tape.mul(gp_st, gp_en)?;
                // report-only logits: s_start + s_end at the span endpoints
                let raw_st = tape.gather_rows(s_start, &flat)?;
                let raw_en = tape.gather_rows(s_end, &flat)?;
                for (i, sp) in candidates.iter_mut().enumerate() {
                    sp.logit = tape.value(raw_st).data()[st_idx[i]]
                        + tape.value(raw_en).data()[en_idx[i]];
                    sp.prob = tape.value(probs).data()[i];
                }
                start_end_dists = Some(StartEndDists {
                    positions,
                    p_start: tape.value(p_start).data().to_vec(),
                    p_end: tape.value(p_end).data().to_vec(),
                });
                GradHandle::Product { probs }
            }
            ProbSpaceVariant::SpanReprSumString | ProbSpaceVariant::LogitSumString => {
                let groups = group_by_string(&candidate_strings, &candidates);
                let order: Vec<String> = groups.keys().cloned().collect();
                let string_logits = match space.variant {
                    ProbSpaceVariant::LogitSumString => {
                        let span_logits = self.span_logits(tape, output, batch, &candidates)?;
                        for (i, sp) in candidates.iter_mut().enumerate() {
                            sp.logit = tape.value(span_logits).data()[i];
                        }
                        let mut per_string = Vec::with_capacity(order.len());
                        for key in &order {
                            let idxs = &groups[key].0;
                            let g = tape.gather_rows(span_logits, idxs)?;
                            per_string.push(tape.sum(g));
                        }
                        tape.concat(&per_string, 0)?
                    }
                    _ => {
                        // sum the h_start ⊕ h_end representations per string,
                        // then classify the sums
                        let all = self.concat_passage_states(tape, output)?;
                        let starts: Vec<usize> =
                            candidates.iter().map(|sp| sp.passage * s + sp.start).collect();
                        let ends: Vec<usize> =
                            candidates.iter().map(|sp| sp.passage * s + sp.end).collect();
                        let hs = tape.gather_rows(all, &starts)?;
                        let he = tape.gather_rows(all, &ends)?;
                        let rep = tape.concat(&[hs, he], 1)?;
                        let mut sums = Vec::with_capacity(order.len());
                        for key in &order {
                            let idxs = &groups[key].0;
                            let rows = tape.gather_rows(rep, idxs)?;
                            let ones = tape.leaf(Array::filled(vec![1, idxs.len()], T::one()));
                            sums.push(tape.matmul(ones, rows)?);
                        }
                        let stacked = tape.concat(&sums, 0)?;
                        let w1 = tape.param(&self.params, self.ids.span_w1);
                        let b1 = tape.param(&self.params, self.ids.span_b1);
                        let w2 = tape.param(&self.params, self.ids.span_w2);
                        let b2 = tape.param(&self.params, self.ids.span_b2);
                        let h = tape.matmul(stacked, w1)?;
                        let h = tape.add_row(h, b1)?;
                        let h = tape.gelu(h);
                        let o = tape.matmul(h, w2)?;
                        let o = tape.add_row(o, b2)?;
                        tape.reshape(o, vec![order.len()])?
                    }
                };
                let string_probs = tape.softmax(string_logits, 0, None)?;
                let table = table_from_string_probs(
                    tape.value(string_probs).data(),
                    &order,
                    &groups,
                );
                let scored = ScoredSpans {
                    candidates,
                    strings: table,
                    candidate_strings,
                    start_end_dists: None,
                    grad: GradHandle::StringSoftmax { logits: string_logits, order },
                };
                return Ok(scored);
            }
        };

        let strings = aggregate_strings(&candidates, &candidate_strings);
        Ok(ScoredSpans { candidates, strings, candidate_strings, start_end_dists, grad })
    }
}

fn fill_candidates<T: Scalar>(
    tape: &Tape<T>,
    candidates: &mut [SpanCandidate<T>],
    logits: Option<NodeId>,
    probs: NodeId,
) {
    let pv = tape.value(probs);
    for (i, sp) in candidates.iter_mut().enumerate() {
        if let Some(l) = logits {
            sp.logit = tape.value(l).data()[i];
        }
        sp.prob = pv.data()[i];
    }
}

/// Detokenized, normalized surface string of a span.
pub fn span_string(
    batch: &TokenizedBatch,
    token_table: &[String],
    passage: usize,
    start: usize,
    end: usize,
) -> Result<String> {
    let ids = &batch.passages[passage].ids[start..=end];
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = token_table.get(id).ok_or(Error::VocabOutOfRange {
            id,
            vocab_size: token_table.len(),
        })?;
        words.push(tok.as_str());
    }
    Ok(normalize_answer(&words.join(" ")))
}

type Groups = BTreeMap<String, (Vec<usize>, (usize, usize, usize))>;

fn group_by_string<T>(strings: &[String], candidates: &[SpanCandidate<T>]) -> Groups {
    let mut groups: Groups = BTreeMap::new();
    for (i, (s, sp)) in strings.iter().zip(candidates).enumerate() {
        let key = (sp.passage, sp.start, sp.end);
        let entry = groups.entry(s.clone()).or_insert_with(|| (Vec::new(), key));
        entry.0.push(i);
        if key < entry.1 {
            entry.1 = key;
        }
    }
    groups
}

/// Group spans by normalized surface string and sum their probabilities.
pub fn aggregate_strings<T: Scalar>(
    candidates: &[SpanCandidate<T>],
    candidate_strings: &[String],
) -> StringScoreTable<T> {
    let groups = group_by_string(candidate_strings, candidates);
    let mut entries = BTreeMap::new();
    for (key, (idxs, first)) in groups {
        let mut p = T::zero();
        for &i in &idxs {
            p += candidates[i].prob;
        }
        entries.insert(key, StringEntry { probability: p, spans: idxs, first });
    }
    StringScoreTable { entries }
}

fn table_from_string_probs<T: Scalar>(
    probs: &[T],
    order: &[String],
    groups: &Groups,
) -> StringScoreTable<T> {
    let mut entries = BTreeMap::new();
    for (i, key) in order.iter().enumerate() {
        let (idxs, first) = &groups[key];
        entries.insert(
            key.clone(),
            StringEntry { probability: probs[i], spans: idxs.clone(), first: *first },
        );
    }
    StringScoreTable { entries }
}

/// Candidate indices whose surface string matches any gold answer.
pub fn gold_span_indices<T: Scalar>(scored: &ScoredSpans<T>, gold: &BTreeSet<String>) -> Vec<usize> {
    let mut idxs = Vec::new();
    for (key, entry) in &scored.strings.entries {
        if gold.contains(key) {
            idxs.extend(entry.spans.iter().copied());
        }
    }
    idxs.sort_unstable();
    idxs
}

pub fn normalize_gold(answers: &[String]) -> BTreeSet<String> {
    answers.iter().map(|a| normalize_answer(a)).collect()
}

/// Marginal-likelihood loss: −log of the total probability mass on spans
/// whose string matches a gold answer. Examples without any match are
/// skipped (zero loss, flagged).
pub fn mml_loss<T: Scalar>(
    tape: &mut Tape<T>,
    scored: &ScoredSpans<T>,
    gold: &BTreeSet<String>,
) -> Result<LossOutcome> {
    if scored.strings.entries.is_empty() {
        return Err(Error::EmptySpanList);
    }
    match &scored.grad {
        GradHandle::SpanSoftmax { logits } => {
            let idxs = gold_span_indices(scored, gold);
            if idxs.is_empty() {
                return Ok(LossOutcome { loss: None, skipped: true });
            }
            let lse_all = tape.logsumexp(*logits);
            let gold_logits = tape.gather_rows(*logits, &idxs)?;
            let lse_gold = tape.logsumexp(gold_logits);
            let loss = tape.sub(lse_all, lse_gold)?;
            Ok(LossOutcome { loss: Some(loss), skipped: false })
        }
        GradHandle::Product { probs } => {
            let idxs = gold_span_indices(scored, gold);
            if idxs.is_empty() {
                return Ok(LossOutcome { loss: None, skipped: true });
            }
            let gp = tape.gather_rows(*probs, &idxs)?;
            let total = tape.sum(gp);
            let l = tape.ln(total);
            let loss = tape.scale(l, -T::one());
            Ok(LossOutcome { loss: Some(loss), skipped: false })
        }
        GradHandle::StringSoftmax { logits, order } => {
            let idxs: Vec<usize> = order
                .iter()
                .enumerate()
                .filter(|(_, s)| gold.contains(*s))
                .map(|(i, _)| i)
                .collect();
            if idxs.is_empty() {
                return Ok(LossOutcome { loss: None, skipped: true });
            }
            let lse_all = tape.logsumexp(*logits);
            let gold_logits = tape.gather_rows(*logits, &idxs)?;
            let lse_gold = tape.logsumexp(gold_logits);
            let loss = tape.sub(lse_all, lse_gold)?;
            Ok(LossOutcome { loss: Some(loss), skipped: false })
        }
    }
}

/// Hard-EM loss over the gold-matching spans: −log p of a single selected
/// span (max or min logit), or of the smallest gold subset covering at
/// least 80% of the gold probability mass.
pub fn hardem_loss<T: Scalar>(
    tape: &mut Tape<T>,
    scored: &ScoredSpans<T>,
    gold: &BTreeSet<String>,
    mode: HardEmMode,
) -> Result<LossOutcome> {
    let idxs = gold_span_indices(scored, gold);
    if idxs.is_empty() {
        return Ok(LossOutcome { loss: None, skipped: true });
    }
    let selected: Vec<usize> = match mode {
        HardEmMode::Max => {
            let best = idxs
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    scored.candidates[a]
                        .logit
                        .partial_cmp(&scored.candidates[b].logit)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.cmp(&a)) // first occurrence wins ties
                })
                .expect("non-empty");
            vec![best]
        }
        HardEmMode::Min => {
            let best = idxs
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    scored.candidates[a]
                        .logit
                        .partial_cmp(&scored.candidates[b].logit)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                })
                .expect("non-empty");
            vec![best]
        }
        HardEmMode::Mass80 => {
            // smallest prefix by descending probability covering ≥ 80% of
            // the gold mass
            let mut by_prob: Vec<usize> = idxs.clone();
            by_prob.sort_by(|&a, &b| {
                scored.candidates[b]
                    .prob
                    .partial_cmp(&scored.candidates[a].prob)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let total: f64 = idxs.iter().map(|&i| scored.candidates[i].prob.as_f64()).sum();
            let mut acc = 0.0;
            let mut chosen = Vec::new();
            for i in by_prob {
                chosen.push(i);
                acc += scored.candidates[i].prob.as_f64();
                if acc >= 0.8 * total {
                    break;
                }
            }
            chosen.sort_unstable();
            chosen
        }
    };

    match &scored.grad {
        GradHandle::SpanSoftmax { logits } => {
            let lse_all = tape.logsumexp(*logits);
            let sel = tape.gather_rows(*logits, &selected)?;
            let lse_sel = tape.logsumexp(sel);
            let loss = tape.sub(lse_all, lse_sel)?;
            Ok(LossOutcome { loss: Some(loss), skipped: false })
        }
        GradHandle::Product { probs } => {
            let sel = tape.gather_rows(*probs, &selected)?;
            let total = tape.sum(sel);
            let l = tape.ln(total);
            let loss = tape.scale(l, -T::one());
            Ok(LossOutcome { loss: Some(loss), skipped: false })
        }
        GradHandle::StringSoftmax { .. } => Err(Error::Config(
            "hard-EM objectives need span-level probabilities".into(),
        )),
    }
}

/// The configured objective: marginal likelihood plus the weighted hard-EM
/// term when one is selected.
pub fn training_loss<T: Scalar>(
    tape: &mut Tape<T>,
    scored: &ScoredSpans<T>,
    gold: &BTreeSet<String>,
    space: &ProbSpaceConfig,
) -> Result<LossOutcome> {
    let mml = mml_loss(tape, scored, gold)?;
    let Some(mml_node) = mml.loss else {
        return Ok(mml);
    };
    match space.objective.hardem_mode() {
        None => Ok(LossOutcome { loss: Some(mml_node), skipped: false }),
        Some(mode) => {
            let hard = hardem_loss(tape, scored, gold, mode)?;
            let Some(hard_node) = hard.loss else {
                return Ok(LossOutcome { loss: Some(mml_node), skipped: false });
            };
            let weighted = tape.scale(hard_node, T::from_f64(space.hardem_weight));
            let combined = tape.add(mml_node, weighted)?;
            Ok(LossOutcome { loss: Some(combined), skipped: false })
        }
    }
}

/// Argmax answer string by aggregated probability; exact ties break toward
/// the earliest (passage, start, end) occurrence.
pub fn predict_answer<T: Scalar>(table: &StringScoreTable<T>) -> Result<(String, T)> {
    let mut best: Option<(&String, &StringEntry<T>)> = None;
    for (key, entry) in &table.entries {
        best = match best {
            None => Some((key, entry)),
            Some((bk, be)) => {
                if entry.probability > be.probability
                    || (entry.probability == be.probability && entry.first < be.first)
                {
                    Some((key, entry))
                } else {
                    Some((bk, be))
                }
            }
        };
    }
    match best {
        Some((k, e)) => Ok((k.clone(), e.probability)),
        None => Err(Error::NoPrediction),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{FusionConfig, FusionMode, PassageTokens};
    use crate::tape::Tape;

    fn test_config(n: usize, s: usize, len_a: usize) -> FusionConfig {
        FusionConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            num_passages: n,
            passage_seq_len: s,
            num_global_tokens: 0,
            fusion_mode: FusionMode::None,
            max_answer_len: len_a,
            vocab_size: 30,
        }
    }

    /// letters "a".."z" as the token table, ids 4.. map to letters
    fn letter_table() -> Vec<String> {
        let mut t = vec!["<pad>".into(), "<unk>".into(), "<cls>".into(), "<sep>".into()];
        for c in b'a'..=b'z' {
            t.push((c as char).to_string());
        }
        t
    }

    fn letter_id(c: char) -> usize {
        4 + (c as u8 - b'a') as usize
    }

    /// single-query batch whose context tokens are the given letters
    fn letter_batch(passages: &[&str], s: usize) -> TokenizedBatch {
        let ps = passages
            .iter()
            .map(|text| {
                let mut ids = vec![2, letter_id('q'), 3];
                let ctx_start = ids.len();
                for ch in text.chars() {
                    ids.push(letter_id(ch));
                }
                let ctx_end = ids.len();
                let mut mask = vec![true; ids.len()];
                while ids.len() < s {
                    ids.push(0);
                    mask.push(false);
                }
                PassageTokens { ids, mask, context: ctx_start..ctx_end }
            })
            .collect();
        TokenizedBatch {
            query_ids: vec![letter_id('q')],
            passages: ps,
            global_ids: vec![],
            query_positions: 1..2,
        }
    }

    fn forward_scored(
        config: &FusionConfig,
        batch: &TokenizedBatch,
        space: &ProbSpaceConfig,
        zero_span_head: bool,
    ) -> (ScoredSpans<f64>, Tape<f64>) {
        let mut model = Model::<f64>::new(config.clone(), 17).unwrap();
        if zero_span_head {
            let w2 = model.params.id_by_name("span.w2").unwrap();
            let b2 = model.params.id_by_name("span.b2").unwrap();
            model.params.get_mut(w2).value.fill(0.0);
            model.params.get_mut(b2).value.fill(0.0);
        }
        let mut tape = Tape::new();
        let (out, _) = model.forward(&mut tape, batch, false).unwrap();
        let scored = model
            .score_spans(&mut tape, &out, batch, &letter_table(), space)
            .unwrap();
        (scored, tape)
    }

    #[test]
    fn enumeration_counts() {
        // 4 context tokens, max length 2: 4 + 3 = 7 spans
        let batch = letter_batch(&["abcd"], 8);
        let spans = enumerate_spans::<f64>(&batch, 2);
        assert_eq!(spans.len(), 7);
        // max length 1: one span per context token
        assert_eq!(enumerate_spans::<f64>(&batch, 1).len(), 4);
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let batch = letter_batch(&["abcde", "xy"], 12);
        for len_a in 1..=4 {
            let fast = enumerate_spans::<f64>(&batch, len_a);
            let mut brute = Vec::new();
            for (j, p) in batch.passages.iter().enumerate() {
                for st in p.context.clone() {
                    for en in p.context.clone() {
                        if en >= st && en - st < len_a {
                            brute.push((j, st, en));
                        }
                    }
                }
            }
            let fast_keys: Vec<_> = fast.iter().map(|s| (s.passage, s.start, s.end)).collect();
            assert_eq!(fast_keys, brute);
        }
    }

    #[test]
    fn fully_padded_context_yields_no_spans() {
        let mut batch = letter_batch(&["abc"], 8);
        batch.passages[0].context = 6..6;
        assert!(enumerate_spans::<f64>(&batch, 3).is_empty());
    }

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let config = test_config(1, 8, 2);
        let batch = letter_batch(&["abc"], 8);
        let (scored, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), true);
        for sp in &scored.candidates {
            assert_eq!(sp.logit, 0.0);
        }
    }

    #[test]
    fn identical_endpoint_states_give_identical_logits() {
        // duplicate context tokens in the same positions of two identical
        // passages produce identical span states, hence identical logits
        let config = test_config(2, 8, 1);
        let batch = letter_batch(&["ab", "ab"], 8);
        let (scored, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), false);
        assert_eq!(scored.candidates.len(), 4);
        assert!((scored.candidates[0].logit - scored.candidates[2].logit).abs() < 1e-12);
        assert!((scored.candidates[1].logit - scored.candidates[3].logit).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_split_evenly() {
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["abc"], 8);
        let (scored, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), true);
        for sp in &scored.candidates {
            assert!((sp.prob - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_log_two_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Array::from_vec(vec![2.0f64.ln(), 0.0]));
        let probs = global_span_softmax(&mut tape, logits).unwrap();
        assert!((tape.value(probs).data()[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((tape.value(probs).data()[1] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn single_span_has_probability_one() {
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["a"], 8);
        let (scored, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), false);
        assert_eq!(scored.candidates.len(), 1);
        assert!((scored.candidates[0].prob - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_sums_repeated_strings() {
        // context "aab", single-token spans, uniform logits:
        // p(a) = 2/3, p(b) = 1/3
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["aab"], 8);
        let (scored, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), true);
        assert!((scored.strings.probability("a").unwrap() - 2.0 / 3.0).abs() < 1e-9);
        assert!((scored.strings.probability("b").unwrap() - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn aggregation_crosses_passages() {
        let config = test_config(2, 8, 1);
        let batch = letter_batch(&["ab", "ac"], 8);
        let (scored, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), true);
        // "a" occurs in both passages
        assert_eq!(scored.strings.entries["a"].spans.len(), 2);
        assert!((scored.strings.probability("a").unwrap() - 0.5).abs() < 1e-9);
        // regrouping conserves mass
        assert!((scored.strings.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mml_single_matching_span_at_half() {
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["ab"], 8);
        let (scored, mut tape) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), true);
        let gold = normalize_gold(&["a".to_string()]);
        let out = mml_loss(&mut tape, &scored, &gold).unwrap();
        let loss = tape.value(out.loss.unwrap()).scalar_value();
        assert!((loss - 2.0f64.ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn mml_sums_gold_strings_before_log() {
        // probabilities 0.3 and 0.2 on gold strings, 0.5 elsewhere
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Array::from_vec(vec![0.3f64.ln(), 0.2f64.ln(), 0.5f64.ln()]));
        let probs = global_span_softmax(&mut tape, logits).unwrap();
        let candidates: Vec<SpanCandidate<f64>> = (0..3)
            .map(|i| SpanCandidate {
                passage: 0,
                start: i,
                end: i,
                logit: tape.value(logits).data()[i],
                prob: tape.value(probs).data()[i],
            })
            .collect();
        let strings = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        let table = aggregate_strings(&candidates, &strings);
        let scored = ScoredSpans {
            candidates,
            strings: table,
            candidate_strings: strings,
            start_end_dists: None,
            grad: GradHandle::SpanSoftmax { logits },
        };
        let gold: BTreeSet<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        let out = mml_loss(&mut tape, &scored, &gold).unwrap();
        let loss = tape.value(out.loss.unwrap()).scalar_value();
        assert!((loss - (-(0.5f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn absent_gold_is_skipped() {
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["ab"], 8);
        let (scored, mut tape) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), false);
        let gold = normalize_gold(&["zebra".to_string()]);
        let out = mml_loss(&mut tape, &scored, &gold).unwrap();
        assert!(out.skipped && out.loss.is_none());
    }

    fn hardem_fixture(tape: &mut Tape<f64>) -> ScoredSpans<f64> {
        // gold spans (same string) with probabilities .5, .3, .05 and one
        // other span at .15
        let logits_v = vec![0.5f64.ln(), 0.3f64.ln(), 0.05f64.ln(), 0.15f64.ln()];
        let logits = tape.leaf(Array::from_vec(logits_v.clone()));
        let probs = global_span_softmax(tape, logits).unwrap();
        let strings = vec!["g".to_string(), "g".to_string(), "g".to_string(), "o".to_string()];
        let candidates: Vec<SpanCandidate<f64>> = (0..4)
            .map(|i| SpanCandidate {
                passage: 0,
                start: i,
                end: i,
                logit: logits_v[i],
                prob: tape.value(probs).data()[i],
            })
            .collect();
        let table = aggregate_strings(&candidates, &strings);
        ScoredSpans {
            candidates,
            strings: table,
            candidate_strings: strings,
            start_end_dists: None,
            grad: GradHandle::SpanSoftmax { logits },
        }
    }

    #[test]
    fn hardem_mass80_selects_smallest_covering_set() {
        let mut tape = Tape::new();
        let scored = hardem_fixture(&mut tape);
        let gold: BTreeSet<String> = std::iter::once("g".to_string()).collect();
        let out = hardem_loss(&mut tape, &scored, &gold, HardEmMode::Mass80).unwrap();
        let loss = tape.value(out.loss.unwrap()).scalar_value();
        // gold mass .85; {.5, .3} covers ≈94% ≥ 80% → −ln 0.8
        assert!((loss - (-(0.8f64).ln())).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn hardem_max_takes_the_top_logit_span() {
        let mut tape = Tape::new();
        let scored = hardem_fixture(&mut tape);
        let gold: BTreeSet<String> = std::iter::once("g".to_string()).collect();
        let out = hardem_loss(&mut tape, &scored, &gold, HardEmMode::Max).unwrap();
        let loss = tape.value(out.loss.unwrap()).scalar_value();
        assert!((loss - (-(0.5f64).ln())).abs() < 1e-9);
        let out = hardem_loss(&mut tape, &scored, &gold, HardEmMode::Min).unwrap();
        let loss = tape.value(out.loss.unwrap()).scalar_value();
        assert!((loss - (-(0.05f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn singleton_gold_makes_all_modes_agree() {
        let mut tape = Tape::new();
        let scored = hardem_fixture(&mut tape);
        let gold: BTreeSet<String> = std::iter::once("o".to_string()).collect();
        let mut losses = Vec::new();
        for mode in [HardEmMode::Max, HardEmMode::Min, HardEmMode::Mass80] {
            let out = hardem_loss(&mut tape, &scored, &gold, mode).unwrap();
            losses.push(tape.value(out.loss.unwrap()).scalar_value());
        }
        assert!((losses[0] - losses[1]).abs() < 1e-12);
        assert!((losses[1] - losses[2]).abs() < 1e-12);
        assert!((losses[0] - (-(0.15f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn noncond_variant_sums_endpoint_logits_and_normalizes() {
        let config = test_config(2, 8, 2);
        let batch = letter_batch(&["abc", "de"], 8);
        let space =
            ProbSpaceConfig { variant: ProbSpaceVariant::NoncondStartEnd, ..Default::default() };
        let (scored, _) = forward_scored(&config, &batch, &space, false);
        let mass: f64 = scored.candidates.iter().map(|c| c.prob).sum();
        assert!((mass - 1.0).abs() < 1e-9, "one softmax over all spans: {mass}");
        // length-1 spans have logit s_start(i) + s_end(i); a shared start
        // with different ends must differ only through the end term
        let a = &scored.candidates[0]; // (0, st, st)
        let ab = &scored.candidates[1]; // (0, st, st+1)
        assert_eq!((a.passage, a.start, a.end), (0, 3, 3));
        assert_eq!((ab.passage, ab.start, ab.end), (0, 3, 4));
        assert!((a.logit - ab.logit).abs() > 1e-9);
    }

    #[test]
    fn per_passage_baseline_normalizes_per_passage() {
        let config = test_config(2, 8, 2);
        let batch = letter_batch(&["abc", "de"], 8);
        let space = ProbSpaceConfig {
            variant: ProbSpaceVariant::PerPassageBaseline,
            ..Default::default()
        };
        let (scored, _) = forward_scored(&config, &batch, &space, false);
        let dists = scored.start_end_dists.unwrap();
        for j in 0..2 {
            let s: f64 = dists
                .positions
                .iter()
                .zip(&dists.p_start)
                .filter(|((jj, _), _)| *jj == j)
                .map(|(_, p)| p)
                .sum();
            assert!((s - 1.0).abs() < 1e-9, "passage {j} start mass {s}");
        }
    }

    #[test]
    fn separate_global_normalizes_across_passages() {
        let config = test_config(2, 8, 2);
        let batch = letter_batch(&["abc", "de"], 8);
        let space =
            ProbSpaceConfig { variant: ProbSpaceVariant::SeparateGlobal, ..Default::default() };
        let (scored, _) = forward_scored(&config, &batch, &space, false);
        let dists = scored.start_end_dists.unwrap();
        let s: f64 = dists.p_start.iter().sum();
        let e: f64 = dists.p_end.iter().sum();
        assert!((s - 1.0).abs() < 1e-9 && (e - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_position_product_space_is_certain() {
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["a"], 8);
        let space = ProbSpaceConfig {
            variant: ProbSpaceVariant::PerPassageBaseline,
            ..Default::default()
        };
        let (scored, _) = forward_scored(&config, &batch, &space, false);
        assert!((scored.candidates[0].prob - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independence_artifact_of_the_product_space() {
        // "x" occurs twice in one passage, farther apart than the length
        // limit. The product space leaks probability onto the cross span;
        // the direct space never materializes it.
        let config = test_config(1, 10, 2);
        let batch = letter_batch(&["xabx"], 10);
        let space =
            ProbSpaceConfig { variant: ProbSpaceVariant::SeparateGlobal, ..Default::default() };
        let (scored, _) = forward_scored(&config, &batch, &space, false);
        let dists = scored.start_end_dists.unwrap();
        let first_x = dists.positions.iter().position(|&(_, p)| p == 3).unwrap();
        let second_x = dists.positions.iter().position(|&(_, p)| p == 6).unwrap();
        let cross = dists.p_start[first_x] * dists.p_end[second_x];
        assert!(cross > 0.0, "product space assigns the cross span {cross}");

        let (direct, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), false);
        assert!(
            !direct.candidates.iter().any(|sp| sp.start == 3 && sp.end == 6),
            "length-limited enumeration must exclude the cross span"
        );
    }

    #[test]
    fn logit_sum_string_space_halves_the_duplicate() {
        // "a" twice and "b" once, all span logits 0: string logits are
        // [0, 0], so p(a) = 0.5 — the direct space would give 2/3.
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["aab"], 8);
        let space =
            ProbSpaceConfig { variant: ProbSpaceVariant::LogitSumString, ..Default::default() };
        let (scored, _) = forward_scored(&config, &batch, &space, true);
        assert!((scored.strings.probability("a").unwrap() - 0.5).abs() < 1e-9);
        assert!((scored.strings.probability("b").unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn repr_sum_string_space_classifies_the_sum() {
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["aab"], 8);
        let space = ProbSpaceConfig {
            variant: ProbSpaceVariant::SpanReprSumString,
            ..Default::default()
        };
        let (scored, _) = forward_scored(&config, &batch, &space, false);
        // two strings, probabilities sum to one
        assert_eq!(scored.strings.entries.len(), 2);
        assert!((scored.strings.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn singleton_groups_match_direct_space() {
        // all distinct strings: string-level softmax over per-span logits
        // equals the direct span softmax
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["abc"], 8);
        let (direct, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), false);
        let space =
            ProbSpaceConfig { variant: ProbSpaceVariant::LogitSumString, ..Default::default() };
        let (stringwise, _) = forward_scored(&config, &batch, &space, false);
        for (k, e) in &direct.strings.entries {
            let other = stringwise.strings.probability(k).unwrap();
            assert!((e.probability - other).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_answer_argmax_and_ties() {
        let config = test_config(2, 8, 1);
        // exact tie between "z" (passage 0) and "a" (passage 1): the
        // earlier passage wins even though "a" sorts first
        let batch = letter_batch(&["z", "a"], 8);
        let (scored, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), true);
        let (answer, p) = predict_answer(&scored.strings).unwrap();
        assert_eq!(answer, "z");
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predict_answer_prefers_mass() {
        let config = test_config(1, 8, 1);
        let batch = letter_batch(&["aab"], 8);
        let (scored, _) = forward_scored(&config, &batch, &ProbSpaceConfig::default(), true);
        let (answer, p) = predict_answer(&scored.strings).unwrap();
        assert_eq!(answer, "a");
        assert!((p - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_table_yields_no_prediction() {
        let table: StringScoreTable<f64> = StringScoreTable::default();
        assert!(matches!(predict_answer(&table), Err(Error::NoPrediction)));
    }

    #[test]
    fn spans_outside_the_context_are_rejected() {
        let config = test_config(1, 8, 2);
        let batch = letter_batch(&["abc"], 8);
        let model = Model::<f64>::new(config, 17).unwrap();
        let mut tape = Tape::new();
        let (out, _) = model.forward(&mut tape, &batch, false).unwrap();
        // start index 1 is a query position, not context
        let bad = vec![SpanCandidate::<f64> { passage: 0, start: 1, end: 1, logit: 0.0, prob: 0.0 }];
        let err = model.span_logits(&mut tape, &out, &batch, &bad);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn logit_shift_invariance() {
        let logits = vec![0.3, -1.2, 0.8, 0.0];
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Array::from_vec(logits.clone()));
        let pa = global_span_softmax(&mut tape, a).unwrap();
        let b = tape.leaf(Array::from_vec(logits.iter().map(|v| v + 7.5).collect()));
        let pb = global_span_softmax(&mut tape, b).unwrap();
        for (x, y) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn hardem_rejected_for_string_level_spaces() {
        let space = ProbSpaceConfig {
            variant: ProbSpaceVariant::LogitSumString,
            objective: Objective::MmlPlusHardemMax,
            hardem_weight: 0.1,
        };
        assert!(space.validate().is_err());
    }

    #[test]
    fn combined_objective_adds_weighted_hardem() {
        let mut tape = Tape::new();
        let scored = hardem_fixture(&mut tape);
        let gold: BTreeSet<String> = std::iter::once("g".to_string()).collect();
        let space = ProbSpaceConfig {
            variant: ProbSpaceVariant::DirectSpan,
            objective: Objective::MmlPlusHardemMax,
            hardem_weight: 0.1,
        };
        let out = training_loss(&mut tape, &scored, &gold, &space).unwrap();
        let loss = tape.value(out.loss.unwrap()).scalar_value();
        let want = -(0.85f64).ln() + 0.1 * -(0.5f64).ln();
        assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
    }
}
