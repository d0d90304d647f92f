//! Probes run on a trained model: per-character traces, word completions,
//! the long-range copy experiment and sampling.

use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{predict_next, LanguageModel};

const WINDOWS_PER_CALL: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    /// Index into the continuation.
    pub position: usize,
    pub byte: u8,
    /// Entropy of the predicted distribution, in bits.
    pub entropy: f64,
    /// `-log2 p(byte)`.
    pub loss: f64,
    /// 1-based rank of `byte` among all classes by probability.
    pub rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CharTrace {
    pub rows: Vec<TraceRow>,
}

impl CharTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,char,entropy,loss,rank\n");
        for r in &self.rows {
            let c = match r.byte {
                b' ' => "_".to_string(),
                b',' => "\\x2c".to_string(),
                b if b.is_ascii_graphic() => (b as char).to_string(),
                b => format!("\\x{b:02x}"),
            };
            writeln!(out, "{},{},{:.6},{:.6},{}", r.position, c, r.entropy, r.loss, r.rank).unwrap();
        }
        out
    }

    pub fn mean_rank(&self, positions: impl IntoIterator<Item = usize>) -> Option<f64> {
        let ranks: Vec<usize> = positions
            .into_iter()
            .filter_map(|p| self.rows.get(p).map(|r| r.rank))
            .collect();
        (!ranks.is_empty()).then(|| ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
    }
}

/// Entropy in bits of a natural-log distribution.
pub fn entropy_bits(log_probs: &[f64]) -> f64 {
    log_probs
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| -lp.exp() * lp / std::f64::consts::LN_2)
        .sum::<f64>()
        .max(0.0)
}

/// 1-based rank of `target`; equal probabilities rank lower ids first.
pub fn rank_of(log_probs: &[f64], target: usize) -> usize {
    let t = log_probs[target];
    1 + log_probs
        .iter()
        .enumerate()
        .filter(|&(i, &lp)| lp > t || (lp == t && i < target))
        .count()
}

fn to_ids(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Scores `continuation` after `seed`; every prediction conditions on the
/// trailing `max_context` characters of the seed plus the continuation so
/// far.
pub fn trace<M: LanguageModel + ?Sized>(model: &M, seed: &[u8], continuation: &[u8]) -> Result<CharTrace> {
    if continuation.is_empty() {
        return Err(Error::Contract("trace needs a non-empty continuation".into()));
    }
    if seed.is_empty() {
        return Err(Error::Contract("trace needs a non-empty seed".into()));
    }
    let text = to_ids(&[seed, continuation].concat());
    let ctx = model.max_context();
    let mut rows = Vec::with_capacity(continuation.len());
    let ends: Vec<usize> = (0..continuation.len()).map(|j| seed.len() + j).collect();
    for chunk in ends.chunks(WINDOWS_PER_CALL) {
        let windows: Vec<&[u32]> = chunk
            .iter()
            .map(|&end| &text[end.saturating_sub(ctx)..end])
            .collect();
        let dists = model.tail_log_probs(&windows, 1)?;
        for (&end, lp) in chunk.iter().zip(&dists) {
            let target = text[end] as usize;
            rows.push(TraceRow {
                position: end - seed.len(),
                byte: target as u8,
                entropy: entropy_bits(lp),
                loss: -lp[target] / std::f64::consts::LN_2,
                rank: rank_of(lp, target),
            });
        }
    }
    Ok(CharTrace { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Completion {
    /// Continuation up to, not including, the terminating byte.
    pub text: String,
    /// Product of the character probabilities including the terminator.
    pub probability: f64,
}

/// Only lowercase letters continue a word; anything else ends it.
fn continues_word(b: u8) -> bool {
    b.is_ascii_lowercase()
}

struct Node {
    prob: f64,
    text: Vec<u8>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.prob == other.prob && self.text == other.text
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.prob
            .total_cmp(&other.prob)
            .then_with(|| other.text.cmp(&self.text))
    }
}

/// Best-first expansion of word continuations after `seed`.
///
/// A branch ends at the first non-letter byte, whose probability is part
/// of the product, and is discarded once its probability drops below
/// `cutoff`. Branches reaching `max_len` letters without terminating are
/// dropped. Results are sorted by probability, highest first, with
/// completions reached through different terminators merged.
pub fn enumerate_completions<M: LanguageModel + ?Sized>(
    model: &M,
    seed: &[u8],
    cutoff: f64,
    max_len: usize,
) -> Result<Vec<Completion>> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::Contract(format!("cutoff {cutoff} outside (0, 1)")));
    }
    if seed.is_empty() {
        return Err(Error::Contract("completions need a non-empty seed".into()));
    }
    let mut heap = BinaryHeap::from([Node {
        prob: 1.0,
        text: Vec::new(),
    }]);
    let mut done: HashMap<Vec<u8>, f64> = HashMap::new();
    while let Some(node) = heap.pop() {
        let context = to_ids(&[seed, &node.text].concat());
        let dist = predict_next(model, &context)?;
        for (b, &p) in dist.iter().enumerate() {
            let prob = node.prob * p;
            if !(prob >= cutoff) {
                continue;
            }
            let b = b as u8;
            if !continues_word(b) {
                *done.entry(node.text.clone()).or_default() += prob;
            } else if node.text.len() < max_len {
                let mut text = node.text.clone();
                text.push(b);
                heap.push(Node { prob, text });
            }
        }
    }
    let mut out: Vec<Completion> = done
        .into_iter()
        .map(|(t, probability)| Completion {
            text: String::from_utf8_lossy(&t).into_owned(),
            probability,
        })
        .collect();
    out.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.text.cmp(&b.text)));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CopyProbe {
    /// Seed with the first occurrence replaced by the fake name and the
    /// second by the substitute.
    pub fake_seed: String,
    /// Continuation with every occurrence replaced by the fake name.
    pub fake_continuation: String,
    /// Characters from the fake name in the seed to its first occurrence
    /// in the continuation, measured in the concatenated text.
    pub distance: Option<usize>,
    /// Continuation positions that belong to a fake-name occurrence.
    pub fake_positions: Vec<usize>,
    /// Fake continuation after the fake seed.
    pub with_fake_context: CharTrace,
    /// Fake continuation after the original seed.
    pub with_original_context: CharTrace,
}

fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).collect()
}

/// Rewrites the seed and continuation around a fake name.
pub fn copy_probe_texts(
    seed: &str,
    name: &str,
    fake_name: &str,
    second: &str,
    continuation: &str,
) -> Result<(String, String, Option<usize>, Vec<usize>)> {
    if name.is_empty() {
        return Err(Error::Contract("copy probe needs a non-empty name".into()));
    }
    let hits = find_all(seed, name);
    if hits.len() < 2 {
        return Err(Error::Contract(format!(
            "`{name}` occurs {} times in the seed, need at least 2",
            hits.len()
        )));
    }
    let (first, snd) = (hits[0], hits[1]);
    let fake_seed = format!(
        "{}{fake_name}{}{second}{}",
        &seed[..first],
        &seed[first + name.len()..snd],
        &seed[snd + name.len()..]
    );
    let fake_continuation = continuation.replace(name, fake_name);
    let cont_hits = find_all(&fake_continuation, fake_name);
    let distance = cont_hits
        .first()
        .map(|&c| fake_seed.len() + c - first);
    let fake_positions = cont_hits
        .iter()
        .flat_map(|&c| c..c + fake_name.len())
        .collect();
    Ok((fake_seed, fake_continuation, distance, fake_positions))
}

/// Traces the fake-name continuation after both the rewritten and the
/// original seed. `second` replaces the second occurrence of `name`.
pub fn copy_probe<M: LanguageModel + ?Sized>(
    model: &M,
    seed: &str,
    name: &str,
    fake_name: &str,
    second: &str,
    continuation: &str,
) -> Result<CopyProbe> {
    let (fake_seed, fake_continuation, distance, fake_positions) =
        copy_probe_texts(seed, name, fake_name, second, continuation)?;
    let with_fake_context = trace(model, fake_seed.as_bytes(), fake_continuation.as_bytes())?;
    let with_original_context = trace(model, seed.as_bytes(), fake_continuation.as_bytes())?;
    Ok(CopyProbe {
        fake_seed,
        fake_continuation,
        distance,
        fake_positions,
        with_fake_context,
        with_original_context,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

/// Index drawn from `exp(log_probs / temperature)`, renormalised.
pub fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = log_probs.iter().map(|lp| lp / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// Extends `seed` by `n_chars` sampled bytes, conditioning each step on the
/// trailing `max_context` characters.
pub fn generate<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    seed: &[u8],
    n_chars: usize,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Vec<u8>> {
    if let Sampling::Temperature(t) = sampling {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Contract(format!("temperature {t} must be positive")));
        }
    }
    if seed.is_empty() {
        return Err(Error::Contract("generation needs a non-empty seed".into()));
    }
    let mut text = to_ids(seed);
    let mut out = Vec::with_capacity(n_chars);
    let ctx = model.max_context();
    for _ in 0..n_chars {
        let window = &text[text.len().saturating_sub(ctx)..];
        let lp = model.tail_log_probs(&[window], 1)?.remove(0);
        let next = match sampling {
            Sampling::Greedy => crate::evaluator::argmax(&lp),
            Sampling::Temperature(t) => sample_index(&lp, t, rng),
        };
        text.push(next as u32);
        out.push(next as u8);
    }
    Ok(out)
}
