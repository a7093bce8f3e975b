//! Vocabulary construction, corpus loading, synthetic task generation, and
//! batching.
//!
//! Tokenization is whitespace splitting; subword units are out of scope.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id mapping with four fixed reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds from corpus lines: tokens seen at least `min_freq` times,
    /// ordered alphabetically after the reserved ids. Line order does not
    /// matter.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for token in line.split_whitespace() {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::Data(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut kept: Vec<&str> = freq
            .iter()
            .filter(|(_, c)| **c >= min_freq)
            .map(|(t, _)| *t)
            .collect();
        kept.sort_unstable();
        Ok(Self::from_tokens(
            kept.into_iter().map(String::from).collect(),
        ))
    }

    /// Rebuilds a vocabulary from its content tokens (ids 4..), in order.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Content tokens in id order (ids 4..).
    pub fn content_tokens(&self) -> &[String] {
        &self.id_to_token[RESERVED.len()..]
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("id {id} out of range ({} entries)", self.len())))
    }

    /// Maps tokens to ids, unknown tokens to UNK.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id_of(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|t| self.id_of(t).unwrap_or(UNK))
            .collect()
    }

    /// Maps ids back to tokens; reserved ids render as their markers.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| self.token(id).map(String::from))
            .collect()
    }

    /// Line-per-token text file with an index header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("#vocab 1\n");
        out.push_str(&format!("#tokens {}\n", self.content_tokens().len()));
        for t in self.content_tokens() {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let magic = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        if magic.trim() != "#vocab 1" {
            return Err(Error::Format(format!("bad vocabulary header '{magic}'")));
        }
        let count_line = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format("vocabulary file missing token count".into()))?;
        let count: usize = count_line
            .strip_prefix("#tokens ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad token count line '{count_line}'")))?;
        let tokens: Vec<String> = lines.collect::<std::io::Result<_>>()?;
        if tokens.len() != count {
            return Err(Error::Format(format!(
                "vocabulary declares {count} tokens but contains {}",
                tokens.len()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Tokenized sentence pairs.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Splits off the last `n` pairs as a held-out set.
    pub fn split_tail(mut self, n: usize) -> (Corpus, Corpus) {
        let cut = self.pairs.len().saturating_sub(n);
        let tail = self.pairs.split_off(cut);
        (self, Corpus { pairs: tail })
    }

    pub fn source_lines(&self) -> Vec<String> {
        self.pairs.iter().map(|(s, _)| s.join(" ")).collect()
    }

    pub fn target_lines(&self) -> Vec<String> {
        self.pairs.iter().map(|(_, t)| t.join(" ")).collect()
    }
}

/// One pair per line, tab-separated source and target. Pairs with a side
/// outside 1..=max_len tokens are skipped and counted.
pub fn load_parallel_tsv(path: &Path, max_len: usize) -> Result<(Corpus, usize)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let Some((src, tgt)) = line.split_once('\t') else {
            return Err(Error::Data(format!(
                "{}:{}: line has no tab separator",
                path.display(),
                i + 1
            )));
        };
        let src: Vec<String> = src.split_whitespace().map(String::from).collect();
        let tgt: Vec<String> = tgt.split_whitespace().map(String::from).collect();
        if src.is_empty() || tgt.is_empty() || src.len() > max_len || tgt.len() > max_len {
            skipped += 1;
            continue;
        }
        pairs.push((src, tgt));
    }
    Ok((Corpus { pairs }, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Increment,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "increment" => Ok(TaskKind::Increment),
            other => Err(Error::Config(format!(
                "unknown synthetic task '{other}' (expected copy|reverse|increment)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Increment => "increment",
        }
    }

    /// Applies the task rule to a source sentence.
    pub fn apply(&self, source: &[String], content_vocab: usize) -> Vec<String> {
        match self {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().cloned().collect(),
            TaskKind::Increment => source
                .iter()
                .map(|t| {
                    let idx: usize = t[1..].parse().expect("synthetic token");
                    content_token((idx + 1) % content_vocab)
                })
                .collect(),
        }
    }
}

fn content_token(idx: usize) -> String {
    format!("w{idx:03}")
}

/// Deterministic synthetic translation corpus. `vocab_size` counts the four
/// reserved ids; sentence lengths are drawn uniformly from `len_range`.
pub fn make_synthetic_task(
    kind: TaskKind,
    vocab_size: usize,
    n_pairs: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Corpus> {
    if vocab_size <= RESERVED.len() {
        return Err(Error::Config(format!(
            "synthetic task needs vocab_size > {}, got {vocab_size}",
            RESERVED.len()
        )));
    }
    let content = vocab_size - RESERVED.len();
    let (lo, hi) = len_range;
    if lo == 0 || hi < lo {
        return Err(Error::Config(format!("invalid length range {lo}..={hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.gen_range(lo..=hi);
        let src: Vec<String> = (0..len)
            .map(|_| content_token(rng.gen_range(0..content)))
            .collect();
        let tgt = kind.apply(&src, content);
        pairs.push((src, tgt));
    }
    Ok(Corpus { pairs })
}

/// Corpus with both sides mapped to ids.
#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn encode_corpus(
    corpus: &Corpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> EncodedCorpus {
    EncodedCorpus {
        pairs: corpus
            .pairs
            .iter()
            .map(|(s, t)| (src_vocab.encode_tokens(s), tgt_vocab.encode_tokens(t)))
            .collect(),
    }
}

/// Shifted decoder pair: input `[BOS, y…]`, output `[y…, EOS]`.
pub fn shifted_target(tgt_content: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut tgt_in = Vec::with_capacity(tgt_content.len() + 1);
    tgt_in.push(BOS);
    tgt_in.extend_from_slice(tgt_content);
    let mut tgt_out = Vec::with_capacity(tgt_content.len() + 1);
    tgt_out.extend_from_slice(tgt_content);
    tgt_out.push(EOS);
    (tgt_in, tgt_out)
}

/// Padded id matrices for one mini-batch.
#[derive(Clone, Debug)]
pub struct TranslationBatch {
    /// Indices of the pairs in the source corpus.
    pub pair_indices: Vec<usize>,
    pub src_ids: Vec<Vec<usize>>,
    pub tgt_in: Vec<Vec<usize>>,
    pub tgt_out: Vec<Vec<usize>>,
    /// Per-row key validity: true everywhere but padding.
    pub src_valid: Vec<Vec<bool>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl TranslationBatch {
    pub fn len(&self) -> usize {
        self.pair_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_indices.is_empty()
    }
}

/// Length-bucketed batches covering every pair exactly once, in an order
/// that is deterministic per (seed, epoch).
pub fn batch_iter(
    corpus: &EncodedCorpus,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<TranslationBatch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.sort_by_key(|&i| corpus.pairs[i].0.len());

    let mut batch_indices: Vec<Vec<usize>> =
        order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    batch_indices.shuffle(&mut rng);

    batch_indices
        .into_iter()
        .map(|indices| build_batch(corpus, indices))
        .collect()
}

fn build_batch(corpus: &EncodedCorpus, indices: Vec<usize>) -> TranslationBatch {
    let src_max = indices
        .iter()
        .map(|&i| corpus.pairs[i].0.len())
        .max()
        .unwrap_or(0);
    let tgt_max = indices
        .iter()
        .map(|&i| corpus.pairs[i].1.len() + 1)
        .max()
        .unwrap_or(0);
    let mut batch = TranslationBatch {
        pair_indices: Vec::with_capacity(indices.len()),
        src_ids: Vec::with_capacity(indices.len()),
        tgt_in: Vec::with_capacity(indices.len()),
        tgt_out: Vec::with_capacity(indices.len()),
        src_valid: Vec::with_capacity(indices.len()),
        src_lens: Vec::with_capacity(indices.len()),
        tgt_lens: Vec::with_capacity(indices.len()),
    };
    for i in indices {
        let (src, tgt) = &corpus.pairs[i];
        let mut src_row = src.clone();
        src_row.resize(src_max, PAD);
        let mut valid = vec![true; src.len()];
        valid.resize(src_max, false);
        let (mut tgt_in, mut tgt_out) = shifted_target(tgt);
        tgt_in.resize(tgt_max, PAD);
        tgt_out.resize(tgt_max, PAD);
        batch.pair_indices.push(i);
        batch.src_ids.push(src_row);
        batch.tgt_in.push(tgt_in);
        batch.tgt_out.push(tgt_out);
        batch.src_valid.push(valid);
        batch.src_lens.push(src.len());
        batch.tgt_lens.push(tgt.len() + 1);
    }
    batch
}
