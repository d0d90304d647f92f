//! Corpora, text8 cleaning, contiguous splits and random window sampling.
//!
//! Token ids are byte values, so the vocabulary is always 0..256 whatever
//! the corpus actually uses.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    /// 27-symbol cleaned text; raw input is cleaned on load.
    Text8,
    /// Unprocessed bytes.
    Enwik8,
    Raw,
}

impl CorpusFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusFormat::Text8 => "text8",
            CorpusFormat::Enwik8 => "enwik8",
            CorpusFormat::Raw => "raw",
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text8" => Ok(CorpusFormat::Text8),
            "enwik8" => Ok(CorpusFormat::Enwik8),
            "raw" => Ok(CorpusFormat::Raw),
            _ => Err(Error::Config(format!("unknown corpus format `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.9,
            dev: 0.05,
            test: 0.05,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.dev, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SplitFractions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.train, self.dev, self.test)
    }
}

impl FromStr for SplitFractions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split([',', '/'])
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad split fraction `{p}`")))
            })
            .collect::<Result<_>>()?;
        let [train, dev, test] = parts[..] else {
            return Err(Error::Config(format!("expected three split fractions, got `{s}`")));
        };
        let f = SplitFractions { train, dev, test };
        f.validate()?;
        Ok(f)
    }
}

/// A byte corpus with contiguous train/dev/test partitions, in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    bytes: Vec<u8>,
    train_end: usize,
    dev_end: usize,
}

impl Corpus {
    /// Split boundaries are rounded down.
    pub fn from_bytes(name: impl Into<String>, bytes: Vec<u8>, fractions: SplitFractions) -> Result<Self> {
        fractions.validate()?;
        if bytes.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        let n = bytes.len() as f64;
        // The epsilon keeps e.g. 100 · 0.9 from flooring to 89.
        let boundary = |f: f64| ((n * f + 1e-6).floor() as usize).min(bytes.len());
        let train_end = boundary(fractions.train);
        let dev_end = boundary(fractions.train + fractions.dev).max(train_end);
        Ok(Corpus {
            name: name.into(),
            bytes,
            train_end,
            dev_end,
        })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Dev => self.train_end..self.dev_end,
            Split::Test => self.dev_end..self.bytes.len(),
        }
    }

    pub fn split(&self, split: Split) -> &[u8] {
        &self.bytes[self.split_range(split)]
    }

    pub fn distinct_symbols(&self) -> usize {
        let mut seen = [false; 256];
        self.bytes.iter().for_each(|&b| seen[b as usize] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

const DIGIT_NAMES: [&[u8]; 10] = [
    b"zero", b"one", b"two", b"three", b"four", b"five", b"six", b"seven", b"eight", b"nine",
];

/// text8 cleaning: lowercase, spell out each digit, then turn every run of
/// non-letters into one space. Leading and trailing spaces are dropped.
///
/// Digits are spelled out before the non-letter collapse, otherwise they
/// would be erased. The result only uses `a..z` and space and the function
/// is idempotent.
pub fn preprocess_text8(raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.len());
    let mut pending_space = false;
    let push_letter = |out: &mut Vec<u8>, c: u8, pending: &mut bool| {
        if *pending && !out.is_empty() {
            out.push(b' ');
        }
        *pending = false;
        out.push(c);
    };
    for &b in raw {
        let c = b.to_ascii_lowercase();
        if c.is_ascii_lowercase() {
            push_letter(&mut out, c, &mut pending_space);
        } else if c.is_ascii_digit() {
            pending_space = true;
            for &l in DIGIT_NAMES[(c - b'0') as usize] {
                push_letter(&mut out, l, &mut pending_space);
            }
            pending_space = true;
        } else {
            pending_space = true;
        }
    }
    out
}

pub fn is_text8_clean(bytes: &[u8]) -> bool {
    bytes.iter().all(|&b| b == b' ' || b.is_ascii_lowercase())
}

/// Reads a corpus file. text8 files that are not already clean are run
/// through [`preprocess_text8`]; other formats load byte for byte.
pub fn load_corpus(path: &Path, format: CorpusFormat, fractions: SplitFractions) -> Result<Corpus> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = match format {
        CorpusFormat::Text8 if !is_text8_clean(&raw) => preprocess_text8(&raw),
        _ => raw,
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| format.as_str().to_string());
    Corpus::from_bytes(name, bytes, fractions)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, corpus.bytes()).map_err(|e| Error::io(path, e))
}

/// `B` windows of `L + n_targets` ids, each wholly inside one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub windows: Vec<Vec<u32>>,
    /// Absolute corpus offset of each window's first byte.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn window_refs(&self) -> Vec<&[u32]> {
        self.windows.iter().map(Vec::as_slice).collect()
    }

    /// The model inputs: the first `len` ids of every window.
    pub fn inputs(&self, len: usize) -> Vec<&[u32]> {
        self.windows.iter().map(|w| &w[..len]).collect()
    }
}

/// Uniform, independent window starts in `[split_start, split_end - W]`
/// with `W = seq_len + n_targets`.
pub fn sample_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    split: Split,
    batch: usize,
    seq_len: usize,
    n_targets: usize,
    rng: &mut R,
) -> Result<Batch> {
    let range = corpus.split_range(split);
    let width = seq_len + n_targets;
    if range.len() < width {
        return Err(Error::Data(format!(
            "{split} split has {} bytes, fewer than one window of {width}",
            range.len()
        )));
    }
    let last_start = range.end - width;
    let mut windows = Vec::with_capacity(batch);
    let mut offsets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let start = rng.random_range(range.start..=last_start);
        offsets.push(start);
        windows.push(corpus.bytes[start..start + width].iter().map(|&b| b as u32).collect());
    }
    Ok(Batch { windows, offsets })
}

/// Order-0 entropy of the byte distribution, in bits.
pub fn unigram_entropy_bits(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    bytes.iter().for_each(|&b| counts[b as usize] += 1);
    let n = bytes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

pub fn to_ids(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

// ── synthetic text ─────────────────────────────────────────────────────

const LETTER_FREQ: [(u8, f64); 26] = [
    (b'e', 12.7), (b't', 9.1), (b'a', 8.2), (b'o', 7.5), (b'i', 7.0), (b'n', 6.7),
    (b's', 6.3), (b'h', 6.1), (b'r', 6.0), (b'd', 4.3), (b'l', 4.0), (b'c', 2.8),
    (b'u', 2.8), (b'm', 2.4), (b'w', 2.4), (b'f', 2.2), (b'g', 2.0), (b'y', 2.0),
    (b'p', 1.9), (b'b', 1.5), (b'v', 1.0), (b'k', 0.8), (b'j', 0.15), (b'x', 0.15),
    (b'q', 0.1), (b'z', 0.07),
];

fn weighted_pick<R: Rng>(rng: &mut R, cumulative: &[f64]) -> usize {
    let u = rng.random::<f64>() * cumulative[cumulative.len() - 1];
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    weights
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

/// Deterministic text in the text8 alphabet for runs without a real corpus.
///
/// A lexicon of pronounceable pseudo-words with English letter frequencies
/// is drawn once; the text is a first-order word chain where each word has
/// a few preferred successors on top of a Zipfian background, so there is
/// structure at the spelling and the word-bigram level.
pub fn synthetic_text8(n_bytes: usize, seed: u64) -> Vec<u8> {
    const LEXICON: usize = 3000;
    const SUCCESSORS: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let is_vowel = |c: u8| matches!(c, b'a' | b'e' | b'i' | b'o' | b'u' | b'y');
    let vowels: Vec<(u8, f64)> = LETTER_FREQ.iter().copied().filter(|&(c, _)| is_vowel(c)).collect();
    let consonants: Vec<(u8, f64)> = LETTER_FREQ.iter().copied().filter(|&(c, _)| !is_vowel(c)).collect();
    let vc = cumulative(vowels.iter().map(|v| v.1));
    let cc = cumulative(consonants.iter().map(|v| v.1));

    let mut lexicon: Vec<Vec<u8>> = Vec::with_capacity(LEXICON);
    let mut seen = std::collections::HashSet::new();
    while lexicon.len() < LEXICON {
        let syllables = 1 + weighted_pick(&mut rng, &[0.35, 0.75, 0.95, 1.0]);
        let mut w = Vec::new();
        for _ in 0..syllables {
            if rng.random::<f64>() < 0.8 {
                w.push(consonants[weighted_pick(&mut rng, &cc)].0);
            }
            w.push(vowels[weighted_pick(&mut rng, &vc)].0);
            if rng.random::<f64>() < 0.35 {
                w.push(consonants[weighted_pick(&mut rng, &cc)].0);
            }
        }
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    let zipf = cumulative((1..=LEXICON).map(|r| 1.0 / r as f64));
    let successors: Vec<Vec<usize>> = (0..LEXICON)
        .map(|_| (0..SUCCESSORS).map(|_| weighted_pick(&mut rng, &zipf)).collect())
        .collect();
    let succ_w = cumulative((1..=SUCCESSORS).map(|r| 1.0 / r as f64));

    let mut out = Vec::with_capacity(n_bytes + 16);
    let mut word = weighted_pick(&mut rng, &zipf);
    while out.len() < n_bytes {
        if !out.is_empty() {
            out.push(b' ');
        }
        out.extend_from_slice(&lexicon[word]);
        word = if rng.random::<f64>() < 0.6 {
            successors[word][weighted_pick(&mut rng, &succ_w)]
        } else {
            weighted_pick(&mut rng, &zipf)
        };
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The tail of Mahoney's wikifil.pl, transcribed step by step:
    /// `$_=" $_ "; tr/A-Z/a-z/; s/0/ zero /g; ...; tr/a-z/ /cs;`
    fn wikifil_tail(raw: &str) -> String {
        let mut s = format!(" {raw} ").to_ascii_lowercase();
        for (d, name) in DIGIT_NAMES.iter().enumerate() {
            let name = std::str::from_utf8(name).unwrap();
            s = s.replace(&d.to_string(), &format!(" {name} "));
        }
        let mut out = String::new();
        for c in s.chars() {
            let c = if c.is_ascii_lowercase() { c } else { ' ' };
            if !(c == ' ' && out.ends_with(' ')) {
                out.push(c);
            }
        }
        out.trim().to_string()
    }

    #[test]
    fn text8_examples() {
        assert_eq!(preprocess_text8(b"20"), b"two zero");
        assert_eq!(preprocess_text8(b"abc"), b"abc");
        assert_eq!(preprocess_text8(b"A-B"), b"a b");
        assert_eq!(preprocess_text8(b"  In 1984, [[Orwell]]."), b"in one nine eight four orwell");
        assert_eq!(preprocess_text8("caf\u{e9}s".as_bytes()), b"caf s");
        assert_eq!(preprocess_text8(b"x2y"), b"x two y");
    }

    #[test]
    fn text8_matches_wikifil_rule_order() {
        for sample in [
            "A-B",
            "20",
            "The 3rd of May, 1808!",
            "<ref>cite</ref> Hello--World 42x",
            "MiXeD CaSe 007 \t\n tabs",
            "",
            "...",
        ] {
            assert_eq!(
                String::from_utf8(preprocess_text8(sample.as_bytes())).unwrap(),
                wikifil_tail(sample),
                "sample {sample:?}"
            );
        }
    }

    proptest! {
        #[test]
        fn text8_is_idempotent_and_clean(raw in proptest::collection::vec(any::<u8>(), 0..200)) {
            let once = preprocess_text8(&raw);
            prop_assert!(is_text8_clean(&once));
            prop_assert!(!once.starts_with(b" ") && !once.ends_with(b" "));
            prop_assert!(!once.windows(2).any(|w| w == b"  "));
            prop_assert_eq!(preprocess_text8(&once), once);
        }

        #[test]
        fn windows_stay_inside_split(seed in any::<u64>(), len in 1usize..10) {
            let bytes: Vec<u8> = (0..400u32).map(|i| (i % 251) as u8).collect();
            let c = Corpus::from_bytes("t", bytes, SplitFractions::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for split in [Split::Train, Split::Dev, Split::Test] {
                let r = c.split_range(split);
                let b = sample_batch(&c, split, 8, len, 2, &mut rng).unwrap();
                for (&o, w) in b.offsets.iter().zip(&b.windows) {
                    prop_assert!(o >= r.start && o + w.len() <= r.end);
                }
            }
        }
    }

    #[test]
    fn split_proportions() {
        let c = Corpus::from_bytes("x", vec![b'a'; 100], SplitFractions::default()).unwrap();
        assert_eq!(c.split(Split::Train).len(), 90);
        assert_eq!(c.split(Split::Dev).len(), 5);
        assert_eq!(c.split(Split::Test).len(), 5);
        let c = Corpus::from_bytes("x", vec![b'a'; 1000], "0.9/0.05/0.05".parse().unwrap()).unwrap();
        assert_eq!(c.split_range(Split::Dev), 900..950);
        assert!(Corpus::from_bytes("x", Vec::new(), SplitFractions::default()).is_err());
        assert!("0.5,0.2".parse::<SplitFractions>().is_err());
        assert!("0.5,0.2,0.2".parse::<SplitFractions>().is_err());
    }

    #[test]
    fn single_window_corpus() {
        // 90% of 20 bytes = 18 = L + n_targets
        let bytes: Vec<u8> = (0..20).collect();
        let c = Corpus::from_bytes("x", bytes, SplitFractions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let b = sample_batch(&c, Split::Train, 3, 16, 2, &mut rng).unwrap();
            assert_eq!(b.offsets, vec![0, 0, 0]);
        }
        assert!(matches!(
            sample_batch(&c, Split::Train, 1, 17, 2, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = Corpus::from_bytes("x", synthetic_text8(5000, 0), SplitFractions::default()).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(9);
        let a = sample_batch(&c, Split::Train, 16, 32, 2, &mut rng.clone()).unwrap();
        let b = sample_batch(&c, Split::Train, 16, 32, 2, &mut rng.clone()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn start_offsets_are_uniform() {
        // 50 possible starts, 1e5 draws; chi-square with 49 dof at p = 0.001
        // has critical value 85.35.
        let c = Corpus::from_bytes("x", vec![b'a'; 60], SplitFractions { train: 1.0, dev: 0.0, test: 0.0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0u32; 50];
        let draws = 100_000;
        for _ in 0..draws / 10 {
            for o in sample_batch(&c, Split::Train, 10, 9, 2, &mut rng).unwrap().offsets {
                counts[o] += 1;
            }
        }
        let expected = draws as f64 / 50.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 85.35, "chi2 {chi2}");
    }

    #[test]
    fn load_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..=255u8).cycle().take(3000).collect();
        let c = Corpus::from_bytes("x", bytes.clone(), SplitFractions::default()).unwrap();
        let path = dir.path().join("c.bin");
        save_corpus(&c, &path).unwrap();
        let back = load_corpus(&path, CorpusFormat::Enwik8, SplitFractions::default()).unwrap();
        assert_eq!(back.bytes(), bytes.as_slice());
        assert_eq!(back.split_range(Split::Dev), c.split_range(Split::Dev));

        let raw = dir.path().join("raw.txt");
        std::fs::write(&raw, b"Hello, World 7").unwrap();
        let t8 = load_corpus(&raw, CorpusFormat::Text8, SplitFractions::default()).unwrap();
        assert_eq!(t8.bytes(), b"hello world seven");

        assert!(matches!(
            load_corpus(&dir.path().join("missing"), CorpusFormat::Raw, SplitFractions::default()),
            Err(Error::Io { .. })
        ));
        let empty = dir.path().join("empty");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(
            load_corpus(&empty, CorpusFormat::Raw, SplitFractions::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn synthetic_text_is_text8_like() {
        let t = synthetic_text8(200_000, 3);
        assert_eq!(t.len(), 200_000);
        assert!(is_text8_clean(&t));
        assert_eq!(preprocess_text8(&t[..t.len() - 20]).len(), t.len() - 20 - usize::from(t[t.len() - 21] == b' '));
        let c = Corpus::from_bytes("s", t.clone(), SplitFractions::default()).unwrap();
        assert_eq!(c.distinct_symbols(), 27);
        let h = unigram_entropy_bits(&t);
        assert!((3.8..4.4).contains(&h), "unigram entropy {h}");
        assert_eq!(synthetic_text8(1000, 3), t[..1000]);
    }

    #[test]
    fn unigram_entropy_examples() {
        assert_eq!(unigram_entropy_bits(b"aaaa"), 0.0);
        assert!((unigram_entropy_bits(b"abab") - 1.0).abs() < 1e-12);
        let all: Vec<u8> = (0..=255).collect();
        assert!((unigram_entropy_bits(&all) - 8.0).abs() < 1e-12);
    }
}
