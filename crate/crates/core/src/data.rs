//! Dataset ingestion, vocabulary, tokenization, and the synthetic
//! cross-passage QA task.
//!
//! Records arrive as JSON Lines (`{"question", "answers", "passages":
//! [{"title", "text"}]}`). Tokenization is whitespace splitting over
//! lower-cased text with a frequency-2 vocabulary cutoff; per-passage
//! sequences are laid out as leading token, query, separator, title (with
//! its own separator when non-empty), then context text, truncated to the
//! configured length and padded. Answer spans are located by normalized
//! token-sequence match inside the context region, first match per passage
//! plus all non-overlapping repeats.
//!
//! The synthetic task plants a true answer string in `k` distinct passages
//! and each distractor string in one other passage, every plant preceded
//! by a marker. In the aggregation variant the marker is the question's
//! key token for *all* plants, so no single passage distinguishes the
//! answer from a distractor — only its occurrence count across passages
//! does, which is exactly what string aggregation rewards. Filler words
//! are drawn from a capped pool (at most two uses per record), keeping the
//! answer the unique most frequent marked string.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FusionConfig, PassageTokens, TokenizedBatch};
use crate::error::{Error, Result};
use crate::text::normalize_answer;

/// One QA example as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetRecord {
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    pub passages: Vec<Passage>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Passage {
    #[serde(default)]
    pub title: String,
    pub text: String,
}

/// A parse issue, reported with its 1-based line number.
#[derive(Debug, Clone)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub records: Vec<DatasetRecord>,
    pub issues: Vec<LineIssue>,
}

/// Parse a JSON-Lines dataset. Malformed lines are skipped and reported;
/// in strict mode the first malformed line aborts the load. A file without
/// a single valid record is an error either way.
pub fn load_jsonl(path: &Path, strict: bool) -> Result<LoadedData> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DatasetRecord>(&line) {
            Ok(r) => {
                if r.question.trim().is_empty() {
                    let issue = LineIssue { line: i + 1, message: "empty question".into() };
                    if strict {
                        return Err(Error::Data(format!("line {}: {}", issue.line, issue.message)));
                    }
                    issues.push(issue);
                } else {
                    records.push(r);
                }
            }
            Err(e) => {
                let issue = LineIssue { line: i + 1, message: e.to_string() };
                if strict {
                    return Err(Error::Data(format!("line {}: {}", issue.line, issue.message)));
                }
                issues.push(issue);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no valid records in {}", path.display())));
    }
    Ok(LoadedData { records, issues })
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

/// Token vocabulary: specials, reserved global-slot ids, then corpus words
/// with frequency at least 2, alphabetically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    num_global: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build(records: &[DatasetRecord], num_global: usize) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for r in records {
            let mut count = |text: &str| {
                for w in tokenize_text(text) {
                    *freq.entry(w).or_insert(0) += 1;
                }
            };
            count(&r.question);
            for p in &r.passages {
                count(&p.title);
                count(&p.text);
            }
        }
        let mut words: Vec<String> =
            freq.into_iter().filter(|(_, c)| *c >= 2).map(|(w, _)| w).collect();
        words.sort_unstable();

        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string(), "<cls>".to_string(), "<sep>".to_string()];
        for g in 0..num_global {
            tokens.push(format!("<global{g}>"));
        }
        tokens.extend(words);
        let mut v = Vocab { tokens, num_global, index: HashMap::new() };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn global_ids(&self) -> Vec<usize> {
        (0..self.num_global).map(|g| 4 + g).collect()
    }

    pub fn num_global(&self) -> usize {
        self.num_global
    }
}

/// Lower-cased whitespace tokens.
pub fn tokenize_text(s: &str) -> Vec<String> {
    s.to_lowercase().split_whitespace().map(|w| w.to_string()).collect()
}

/// One tokenized training/evaluation example.
#[derive(Debug, Clone)]
pub struct TokenizedExample {
    pub batch: TokenizedBatch,
    pub question: String,
    pub gold_answers: Vec<String>,
    /// Located gold spans as (passage, start, end), token coordinates.
    pub gold_spans: Vec<(usize, usize, usize)>,
    /// No gold answer was locatable in any passage.
    pub zero_recall: bool,
}

/// Tokenize all records against a fixed vocabulary and passage budget.
/// Passages that are empty after tokenization are dropped (reported);
/// records without any usable passage are dropped too.
pub fn tokenize_records(
    records: &[DatasetRecord],
    vocab: &Vocab,
    config: &FusionConfig,
) -> Result<(Vec<TokenizedExample>, Vec<String>)> {
    let mut out = Vec::with_capacity(records.len());
    let mut warnings = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        match tokenize_record(r, vocab, config) {
            Ok(ex) => out.push(ex),
            Err(e) => warnings.push(format!("record {ri}: {e}")),
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no tokenizable records".into()));
    }
    Ok((out, warnings))
}

/// Per-passage layout: `<cls> query <sep> [title <sep>] text`, truncated to
/// the configured sequence length, padded; the context region is the text
/// segment.
pub fn tokenize_record(
    record: &DatasetRecord,
    vocab: &Vocab,
    config: &FusionConfig,
) -> Result<TokenizedExample> {
    let s = config.passage_seq_len;
    if s < 4 {
        return Err(Error::Config("passage_seq_len must be at least 4".into()));
    }
    let query_words = tokenize_text(&record.question);
    if query_words.is_empty() {
        return Err(Error::Data("empty question".into()));
    }
    // keep at least one context slot after <cls> q <sep>
    let max_query = s - 3;
    let query_ids: Vec<usize> =
        query_words.iter().take(max_query).map(|w| vocab.id_of(w)).collect();
    let query_positions = 1..1 + query_ids.len();

    let mut passages = Vec::new();
    let mut kept_indices = Vec::new();
    for (pi, p) in record.passages.iter().take(config.num_passages).enumerate() {
        let text_words = tokenize_text(&p.text);
        if text_words.is_empty() {
            continue;
        }
        let title_words = tokenize_text(&p.title);
        let mut ids = Vec::with_capacity(s);
        ids.push(CLS_ID);
        ids.extend(query_ids.iter().copied());
        ids.push(SEP_ID);
        if !title_words.is_empty() {
            for w in &title_words {
                if ids.len() + 2 >= s {
                    break;
                }
                ids.push(vocab.id_of(w));
            }
            ids.push(SEP_ID);
        }
        let ctx_start = ids.len();
        if ctx_start >= s {
            continue; // no room for context
        }
        for w in &text_words {
            if ids.len() == s {
                break;
            }
            ids.push(vocab.id_of(w));
        }
        let ctx_end = ids.len();
        let mut mask = vec![true; ids.len()];
        while ids.len() < s {
            ids.push(PAD_ID);
            mask.push(false);
        }
        passages.push(PassageTokens { ids, mask, context: ctx_start..ctx_end });
        kept_indices.push(pi);
    }
    if passages.is_empty() {
        return Err(Error::Data("all passages empty after tokenization".into()));
    }

    let batch = TokenizedBatch {
        query_ids: query_ids.clone(),
        passages,
        global_ids: vocab.global_ids(),
        query_positions,
    };

    // locate gold answers by normalized token-sequence match
    let mut gold_spans = Vec::new();
    for answer in &record.answers {
        let needle: Vec<String> =
            normalize_answer(answer).split_whitespace().map(str::to_string).collect();
        if needle.is_empty() {
            continue;
        }
        for (j, p) in batch.passages.iter().enumerate() {
            let ctx = p.context.clone();
            let norm: Vec<String> =
                ctx.clone().map(|pos| normalize_answer(vocab.token(p.ids[pos]))).collect();
            let mut i = 0;
            while i + needle.len() <= norm.len() {
                if norm[i..i + needle.len()] == needle[..] {
                    gold_spans.push((j, ctx.start + i, ctx.start + i + needle.len() - 1));
                    i += needle.len(); // non-overlapping repeats
                } else {
                    i += 1;
                }
            }
        }
    }
    gold_spans.sort_unstable();
    gold_spans.dedup();
    let zero_recall = gold_spans.is_empty();

    Ok(TokenizedExample {
        batch,
        question: record.question.clone(),
        gold_answers: record.answers.clone(),
        gold_spans,
        zero_recall,
    })
}

/// Parameters of the synthetic cross-passage extraction task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub num_passages: usize,
    pub passage_len: usize,
    pub answer_len: usize,
    /// Occurrences of the true answer across distinct passages.
    pub num_plants: usize,
    /// Strings planted once each in other passages.
    pub num_distractors: usize,
    pub requires_aggregation: bool,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_plants < 1 {
            return Err(Error::Config("num_plants must be at least 1".into()));
        }
        if self.requires_aggregation && self.num_plants < 2 {
            return Err(Error::Config("aggregation tasks need num_plants > 1".into()));
        }
        if self.num_plants + self.num_distractors > self.num_passages {
            return Err(Error::Config(format!(
                "{} plants + {} distractors exceed {} passages",
                self.num_plants, self.num_distractors, self.num_passages
            )));
        }
        if self.passage_len < self.answer_len + 1 {
            return Err(Error::Config("passages too short for a marker plus the answer".into()));
        }
        if self.answer_len < 1 {
            return Err(Error::Config("answer_len must be at least 1".into()));
        }
        let plant_words = (1 + self.num_distractors) * self.answer_len + 1 + self.num_distractors;
        if self.vocab_size <= plant_words {
            return Err(Error::Config("vocabulary too small for the planted strings".into()));
        }
        let filler_slots = self.num_passages * self.passage_len;
        let pool = 2 * (self.vocab_size - plant_words);
        if pool < filler_slots {
            return Err(Error::Config(format!(
                "filler pool {pool} cannot fill {filler_slots} slots; grow vocab_size or shrink passages"
            )));
        }
        Ok(())
    }
}

/// Generate `count` records. Deterministic: a fixed spec (including its
/// seed) yields a byte-identical dataset.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, count: usize) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i:03}")).collect();
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(generate_record(spec, &words, &mut rng)?);
    }
    Ok(records)
}

fn sample_distinct(
    rng: &mut ChaCha8Rng,
    words: &[String],
    n: usize,
    taken: &mut Vec<usize>,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = rng.random_range(0..words.len());
        if !taken.contains(&c) {
            taken.push(c);
            out.push(c);
        }
    }
    out
}

fn generate_record(
    spec: &SyntheticTaskSpec,
    words: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<DatasetRecord> {
    let mut taken = Vec::new();
    let key = sample_distinct(rng, words, 1, &mut taken)[0];
    let answer = sample_distinct(rng, words, spec.answer_len, &mut taken);
    let distractors: Vec<Vec<usize>> = (0..spec.num_distractors)
        .map(|_| sample_distinct(rng, words, spec.answer_len, &mut taken))
        .collect();
    // markers for the non-aggregation variant: one distinct word per
    // distractor, so the question's key identifies the answer locally
    let distractor_markers: Vec<usize> = if spec.requires_aggregation {
        vec![key; spec.num_distractors]
    } else {
        sample_distinct(rng, words, spec.num_distractors, &mut taken)
    };

    // filler pool: two copies of every unused word, shuffled
    let mut pool: Vec<usize> = Vec::new();
    for (i, _) in words.iter().enumerate() {
        if !taken.contains(&i) {
            pool.push(i);
            pool.push(i);
        }
    }
    pool.shuffle(rng);

    let mut assignment: Vec<usize> = (0..spec.num_passages).collect();
    assignment.shuffle(rng);
    let plant_passages = &assignment[..spec.num_plants];
    let distractor_passages =
        &assignment[spec.num_plants..spec.num_plants + spec.num_distractors];

    let mut passages: Vec<Vec<usize>> = Vec::with_capacity(spec.num_passages);
    for _ in 0..spec.num_passages {
        passages.push(Vec::with_capacity(spec.passage_len));
    }
    let draw_filler = |n: usize, pool: &mut Vec<usize>| -> Vec<usize> {
        pool.split_off(pool.len() - n)
    };
    for (j, passage) in passages.iter_mut().enumerate() {
        let plant: Option<Vec<usize>> = if plant_passages.contains(&j) {
            let mut v = vec![key];
            v.extend(answer.iter().copied());
            Some(v)
        } else if let Some(di) = distractor_passages.iter().position(|&p| p == j) {
            let mut v = vec![distractor_markers[di]];
            v.extend(distractors[di].iter().copied());
            Some(v)
        } else {
            None
        };
        match plant {
            Some(plant_tokens) => {
                let fill = spec.passage_len - plant_tokens.len();
                let mut tokens = draw_filler(fill, &mut pool);
                let at = rng.random_range(0..=fill);
                for (k, t) in plant_tokens.into_iter().enumerate() {
                    tokens.insert(at + k, t);
                }
                *passage = tokens;
            }
            None => *passage = draw_filler(spec.passage_len, &mut pool),
        }
    }

    let detok = |ids: &[usize]| -> String {
        ids.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ")
    };
    Ok(DatasetRecord {
        question: words[key].clone(),
        answers: vec![detok(&answer)],
        passages: passages
            .into_iter()
            .map(|toks| Passage { title: String::new(), text: detok(&toks) })
            .collect(),
    })
}

/// Occurrences of a normalized token sequence across all passages of a
/// record (non-overlapping).
pub fn substring_count(record: &DatasetRecord, needle: &str) -> usize {
    let needle: Vec<String> =
        normalize_answer(needle).split_whitespace().map(str::to_string).collect();
    if needle.is_empty() {
        return 0;
    }
    let mut count = 0;
    for p in &record.passages {
        let toks: Vec<String> =
            tokenize_text(&p.text).iter().map(|t| normalize_answer(t)).collect();
        let mut i = 0;
        while i + needle.len() <= toks.len() {
            if toks[i..i + needle.len()] == needle[..] {
                count += 1;
                i += needle.len();
            } else {
                i += 1;
            }
        }
    }
    count
}

/// Brute-force solver for the synthetic task: extract the string following
/// every occurrence of the question's key token and answer with the most
/// frequent one (ties to the first seen).
pub fn frequency_oracle(record: &DatasetRecord, answer_len: usize) -> Option<String> {
    let key = tokenize_text(&record.question).into_iter().next()?;
    let mut counts: Vec<(String, usize)> = Vec::new();
    for p in &record.passages {
        let toks = tokenize_text(&p.text);
        for i in 0..toks.len() {
            if toks[i] == key && i + 1 + answer_len <= toks.len() {
                let cand = toks[i + 1..i + 1 + answer_len].join(" ");
                match counts.iter_mut().find(|(s, _)| *s == cand) {
                    Some((_, c)) => *c += 1,
                    None => counts.push((cand, 1)),
                }
            }
        }
    }
    counts.into_iter().max_by_key(|&(_, c)| c).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FusionMode;

    fn reader_config(n: usize, s: usize) -> FusionConfig {
        FusionConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            num_passages: n,
            passage_seq_len: s,
            num_global_tokens: 2,
            fusion_mode: FusionMode::GlobalTokens,
            max_answer_len: 3,
            vocab_size: 0,
        }
    }

    #[test]
    fn jsonl_empty_file_is_an_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_jsonl(f.path(), false).is_err());
    }

    #[test]
    fn jsonl_single_record() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            r#"{{"question": "who", "answers": ["x"], "passages": [{{"title": "t", "text": "x y"}}]}}"#
        )
        .unwrap();
        let data = load_jsonl(f.path(), false).unwrap();
        assert_eq!(data.records.len(), 1);
        assert_eq!(data.records[0].answers, vec!["x"]);
        assert!(data.issues.is_empty());
    }

    #[test]
    fn jsonl_malformed_line_is_skipped_and_counted() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "not json").unwrap();
        writeln!(f, r#"{{"question": "q", "passages": [{{"text": "a"}}]}}"#).unwrap();
        let data = load_jsonl(f.path(), false).unwrap();
        assert_eq!(data.records.len(), 1);
        assert_eq!(data.issues.len(), 1);
        assert_eq!(data.issues[0].line, 1);
        // missing answers parses as empty list
        assert!(data.records[0].answers.is_empty());
        // strict mode aborts instead
        assert!(load_jsonl(f.path(), true).is_err());
    }

    #[test]
    fn vocab_frequency_cutoff_and_specials() {
        let records = vec![DatasetRecord {
            question: "rare common common".into(),
            answers: vec![],
            passages: vec![Passage { title: String::new(), text: "common word word".into() }],
        }];
        let v = Vocab::build(&records, 2);
        assert_eq!(v.id_of("<pad>"), PAD_ID);
        assert_eq!(v.token(4), "<global0>");
        assert_eq!(v.global_ids(), vec![4, 5]);
        assert_ne!(v.id_of("common"), UNK_ID);
        assert_ne!(v.id_of("word"), UNK_ID);
        assert_eq!(v.id_of("rare"), UNK_ID, "frequency-1 words fall to unk");
    }

    #[test]
    fn gold_span_located_in_context() {
        let records = vec![DatasetRecord {
            question: "a b".into(),
            answers: vec!["a b".into()],
            passages: vec![Passage { title: String::new(), text: "c a b d c a c c".into() }],
        }];
        let v = Vocab::build(&records, 0);
        let mut config = reader_config(1, 16);
        config.num_global_tokens = 0;
        config.vocab_size = v.len();
        let ex = tokenize_record(&records[0], &v, &config).unwrap();
        let ctx = ex.batch.passages[0].context.clone();
        // answer covers context tokens 1..=2 (0-based within the context)
        assert_eq!(ex.gold_spans, vec![(0, ctx.start + 1, ctx.start + 2)]);
        assert!(!ex.zero_recall);
    }

    #[test]
    fn normalized_match_ignores_punctuation_and_repeats() {
        let records = vec![DatasetRecord {
            question: "q q".into(),
            answers: vec!["A, B".into()],
            passages: vec![Passage { title: String::new(), text: "a b z a b".into() }],
        }];
        let v = Vocab::build(&records, 0);
        let mut config = reader_config(1, 12);
        config.num_global_tokens = 0;
        config.vocab_size = v.len();
        let ex = tokenize_record(&records[0], &v, &config).unwrap();
        // normalized "a b" matches both non-overlapping occurrences
        assert_eq!(ex.gold_spans.len(), 2);
    }

    #[test]
    fn truncation_can_lose_the_gold_span() {
        let records = vec![DatasetRecord {
            question: "q q".into(),
            answers: vec!["tail tail".into()],
            passages: vec![Passage {
                title: String::new(),
                text: "f f f f f f f f f f tail tail".into(),
            }],
        }];
        let v = Vocab::build(&records, 0);
        let mut config = reader_config(1, 8); // too short to reach the answer
        config.num_global_tokens = 0;
        config.vocab_size = v.len();
        let ex = tokenize_record(&records[0], &v, &config).unwrap();
        assert!(ex.zero_recall);
        // first tokens are kept
        let ctx = ex.batch.passages[0].context.clone();
        assert_eq!(vocab_word(&v, ex.batch.passages[0].ids[ctx.start]), "f");
    }

    fn vocab_word(v: &Vocab, id: usize) -> &str {
        v.token(id)
    }

    #[test]
    fn empty_passages_are_dropped() {
        let records = vec![DatasetRecord {
            question: "q q".into(),
            answers: vec!["a".into()],
            passages: vec![
                Passage { title: String::new(), text: "   ".into() },
                Passage { title: String::new(), text: "a a".into() },
            ],
        }];
        let v = Vocab::build(&records, 0);
        let mut config = reader_config(2, 8);
        config.num_global_tokens = 0;
        config.vocab_size = v.len();
        let ex = tokenize_record(&records[0], &v, &config).unwrap();
        assert_eq!(ex.batch.passages.len(), 1);
    }

    fn aggregation_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: 200,
            num_passages: 8,
            passage_len: 20,
            answer_len: 2,
            num_plants: 3,
            num_distractors: 3,
            requires_aggregation: true,
            seed: 42,
        }
    }

    #[test]
    fn synthetic_counts_match_the_construction() {
        let spec = aggregation_spec();
        let records = generate_synthetic(&spec, 20).unwrap();
        for r in &records {
            assert_eq!(substring_count(r, &r.answers[0]), spec.num_plants);
            // key appears once per plant: k + distractors
            assert_eq!(
                substring_count(r, &r.question),
                spec.num_plants + spec.num_distractors
            );
        }
    }

    #[test]
    fn frequency_oracle_solves_the_aggregation_task() {
        let spec = aggregation_spec();
        let records = generate_synthetic(&spec, 50).unwrap();
        let mut hits = 0;
        for r in &records {
            let guess = frequency_oracle(r, spec.answer_len).unwrap();
            hits += (normalize_answer(&guess) == normalize_answer(&r.answers[0])) as usize;
        }
        assert_eq!(hits, 50, "the answer is the unique most frequent marked string");
    }

    #[test]
    fn control_condition_marks_only_the_answer() {
        let spec = SyntheticTaskSpec {
            requires_aggregation: false,
            num_plants: 1,
            num_distractors: 0,
            ..aggregation_spec()
        };
        let records = generate_synthetic(&spec, 5).unwrap();
        for r in &records {
            assert_eq!(substring_count(r, &r.question), 1);
            assert_eq!(substring_count(r, &r.answers[0]), 1);
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let spec = aggregation_spec();
        let a = serde_json::to_string(&generate_synthetic(&spec, 10).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_synthetic(&spec, 10).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = aggregation_spec();
        spec.num_plants = 6;
        spec.num_distractors = 6;
        assert!(generate_synthetic(&spec, 1).is_err());

        let mut spec = aggregation_spec();
        spec.vocab_size = 10; // pool cannot fill the passages
        assert!(generate_synthetic(&spec, 1).is_err());

        let mut spec = aggregation_spec();
        spec.requires_aggregation = true;
        spec.num_plants = 1;
        assert!(generate_synthetic(&spec, 1).is_err());
    }

    #[test]
    fn filler_words_capped_at_two_uses() {
        let spec = aggregation_spec();
        let records = generate_synthetic(&spec, 10).unwrap();
        for r in &records {
            let mut freq: HashMap<String, usize> = HashMap::new();
            for p in &r.passages {
                for w in tokenize_text(&p.text) {
                    *freq.entry(w).or_insert(0) += 1;
                }
            }
            let key = &r.question;
            let answer_words: Vec<String> = tokenize_text(&r.answers[0]);
            for (w, c) in freq {
                if w == *key || answer_words.contains(&w) {
                    continue;
                }
                assert!(c <= 2, "word {w} appears {c} times");
            }
        }
    }

    #[test]
    fn synthetic_records_tokenize_round_trip() {
        let spec = aggregation_spec();
        let records = generate_synthetic(&spec, 5).unwrap();
        let vocab = Vocab::build(&records, 4);
        let mut config = reader_config(spec.num_passages, spec.passage_len + 3);
        config.num_global_tokens = 4;
        config.vocab_size = vocab.len();
        let (examples, warnings) = tokenize_records(&records, &vocab, &config).unwrap();
        assert!(warnings.is_empty());
        for ex in &examples {
            assert!(!ex.zero_recall, "plants must be locatable");
            assert_eq!(ex.gold_spans.len(), spec.num_plants);
        }
    }
}
