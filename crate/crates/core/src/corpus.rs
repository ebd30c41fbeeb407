//! Dataset complexity features: lexical entropy and out-of-vocabulary rate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: BTreeSet<String>,
}

impl Vocabulary {
    /// Builds a vocabulary; duplicates collapse. Empty vocabularies are rejected.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::invalid("vocabulary must contain at least one token"));
        }
        Ok(Self { tokens })
    }

    /// One token per line; blank lines are skipped, entries are lowercased.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_lowercase),
        )
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityStats {
    pub entropy_bits: f64,
    pub oov_rate: f64,
    pub token_count: u64,
}

/// Token occurrence counts. Tables from separate shards merge by addition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut t = Self::default();
        for tok in tokens {
            *t.counts.entry(tok.as_ref().to_string()).or_insert(0) += 1;
            t.total += 1;
        }
        t
    }

    pub fn merge(mut self, other: FrequencyTable) -> Self {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
        self.total += other.total;
        self
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn entropy_bits(&self) -> Result<f64> {
        entropy_from_counts(self.counts.values().copied(), self.total)
    }

    pub fn oov_rate(&self, vocab: &Vocabulary) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::invalid("OOV rate of an empty token sequence"));
        }
        let oov: u64 = self
            .counts
            .iter()
            .filter(|(k, _)| !vocab.contains(k))
            .map(|(_, v)| v)
            .sum();
        Ok(oov as f64 / self.total as f64)
    }

    pub fn stats(&self, vocab: &Vocabulary) -> Result<ComplexityStats> {
        Ok(ComplexityStats {
            entropy_bits: self.entropy_bits()?,
            oov_rate: self.oov_rate(vocab)?,
            token_count: self.total,
        })
    }
}

fn entropy_from_counts(counts: impl Iterator<Item = u64>, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("entropy of an empty token sequence"));
    }
    let n = total as f64;
    let h: f64 = counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // A single distinct token yields -0.0 from `-1·log2(1)`.
    Ok(h.max(0.0))
}

/// Shannon entropy, in bits, of the empirical token distribution.
pub fn lexical_entropy<S: AsRef<str>>(tokens: &[S]) -> Result<f64> {
    FrequencyTable::from_tokens(tokens).entropy_bits()
}

/// Fraction of token occurrences absent from `vocab`.
pub fn oov_rate<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::invalid("OOV rate of an empty token sequence"));
    }
    let oov = tokens.iter().filter(|t| !vocab.contains(t.as_ref())).count();
    Ok(oov as f64 / tokens.len() as f64)
}

pub fn measure<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<ComplexityStats> {
    FrequencyTable::from_tokens(tokens).stats(vocab)
}

/// Statistics over a whole corpus, tokenizing `shards` chunks of lines in
/// parallel and merging their frequency tables.
pub fn analyze_lines<S: AsRef<str> + Sync>(
    lines: &[S],
    vocab: &Vocabulary,
    shards: usize,
) -> Result<ComplexityStats> {
    let shards = shards.max(1);
    let chunk = lines.len().div_ceil(shards).max(1);
    let chunks: Vec<&[S]> = lines.chunks(chunk).collect();
    let tables = par::map(chunks, |c| {
        let mut t = FrequencyTable::default();
        for line in c {
            t = t.merge(FrequencyTable::from_tokens(&tokenize(line.as_ref())));
        }
        t
    });
    tables
        .into_iter()
        .fold(FrequencyTable::default(), FrequencyTable::merge)
        .stats(vocab)
}

/// Per-line statistics for every nonempty sample in a file-backed corpus.
#[derive(Debug, Clone)]
pub struct CorpusSamples {
    pub samples: Vec<ComplexityStats>,
    pub vocab_size: usize,
}

impl CorpusSamples {
    pub fn from_files(corpus: &Path, vocab: &Path) -> Result<Self> {
        let vocab = Vocabulary::from_file(vocab)?;
        let text = std::fs::read_to_string(corpus).map_err(|e| Error::io(corpus, e))?;
        let lines: Vec<&str> = text.lines().collect();
        let stats = par::map(lines, |l| {
            let toks = tokenize(l);
            if toks.is_empty() {
                None
            } else {
                Some(measure(&toks, &vocab))
            }
        });
        let samples = stats.into_iter().flatten().collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::invalid(format!("corpus {} has no tokens", corpus.display())));
        }
        Ok(Self {
            samples,
            vocab_size: vocab.size(),
        })
    }
}

/// Zipf-distributed token generator with a fixed out-of-vocabulary
/// injection rate. In-vocabulary tokens are `w<i>`, injected ones `oov<i>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub oov_injection: f64,
    pub sample_tokens: usize,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            vocab_size: 5000,
            zipf_exponent: 1.1,
            oov_injection: 0.05,
            sample_tokens: 256,
        }
    }
}

impl SyntheticCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("env.corpus.vocab_size", "must be at least 1"));
        }
        if !(self.zipf_exponent > 0.0) || !self.zipf_exponent.is_finite() {
            return Err(Error::config("env.corpus.zipf_exponent", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.oov_injection) {
            return Err(Error::config("env.corpus.oov_injection", "must lie in [0, 1]"));
        }
        if self.sample_tokens == 0 {
            return Err(Error::config("env.corpus.sample_tokens", "must be at least 1"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new((0..self.vocab_size).map(|i| format!("w{i}"))).expect("nonempty")
    }

    /// Draws `n` token ids; ids `>= vocab_size` are out of vocabulary.
    fn draw_ids<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let zipf = Zipf::new(self.vocab_size as f64, self.zipf_exponent).expect("validated");
        (0..n)
            .map(|_| {
                let oov = rng.random::<f64>() < self.oov_injection;
                let rank = zipf.sample(rng) as usize - 1;
                if oov {
                    self.vocab_size + rank
                } else {
                    rank
                }
            })
            .collect()
    }

    pub fn sample_tokens<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<String> {
        self.draw_ids(n, rng)
            .into_iter()
            .map(|id| {
                if id < self.vocab_size {
                    format!("w{id}")
                } else {
                    format!("oov{}", id - self.vocab_size)
                }
            })
            .collect()
    }

    /// Statistics of one freshly drawn sample of `sample_tokens` tokens.
    pub fn sample_stats<R: Rng + ?Sized>(&self, rng: &mut R) -> ComplexityStats {
        let ids = self.draw_ids(self.sample_tokens, rng);
        let mut counts = vec![0u64; 2 * self.vocab_size];
        for &id in &ids {
            counts[id] += 1;
        }
        let oov: u64 = counts[self.vocab_size..].iter().sum();
        let total = ids.len() as u64;
        ComplexityStats {
            entropy_bits: entropy_from_counts(counts.into_iter(), total).expect("nonempty"),
            oov_rate: oov as f64 / total as f64,
            token_count: total,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("A a b."), vec!["a", "a", "b"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("word-word"), vec!["word", "word"]);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(lexical_entropy(&["a", "a", "b", "b"]).unwrap(), 1.0);
        assert_eq!(lexical_entropy(&["a", "a", "a", "a"]).unwrap(), 0.0);
        assert_eq!(lexical_entropy(&["a", "a", "b", "c"]).unwrap(), 1.5);
        assert!(lexical_entropy::<&str>(&[]).is_err());
    }

    #[test]
    fn oov_examples() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        assert_eq!(oov_rate(&["a", "b", "a"], &v).unwrap(), 0.0);
        assert_eq!(oov_rate(&["x", "y"], &v).unwrap(), 1.0);
        assert_eq!(oov_rate(&["a", "b", "c", "d"], &v).unwrap(), 0.5);
        assert!(oov_rate::<&str>(&[], &v).is_err());
    }

    #[test]
    fn vocabulary_dedupes() {
        let v = Vocabulary::new(["a", "a", "b"]).unwrap();
        assert_eq!(v.size(), 2);
        assert!(Vocabulary::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn sharded_analysis_matches_whole() {
        let lines = ["the cat sat", "on the mat", "The END", "zzz qqq the"];
        let v = Vocabulary::new(["the", "cat", "sat", "on", "mat"]).unwrap();
        let whole = analyze_lines(&lines, &v, 1).unwrap();
        let sharded = analyze_lines(&lines, &v, 3).unwrap();
        assert_eq!(whole, sharded);
        assert_eq!(whole.token_count, 11);
        assert!((whole.oov_rate - 3.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn synthetic_oov_rate_tracks_injection() {
        let g = SyntheticCorpus {
            oov_injection: 0.1,
            ..SyntheticCorpus::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let toks = g.sample_tokens(10_000, &mut rng);
        let rho = oov_rate(&toks, &g.vocabulary()).unwrap();
        assert!((rho - 0.1).abs() <= 0.02, "rho = {rho}");
    }

    #[test]
    fn synthetic_stats_match_string_path() {
        let g = SyntheticCorpus::default();
        let s1 = g.sample_stats(&mut ChaCha8Rng::seed_from_u64(5));
        let toks = g.sample_tokens(g.sample_tokens, &mut ChaCha8Rng::seed_from_u64(5));
        let s2 = measure(&toks, &g.vocabulary()).unwrap();
        assert_eq!(s1.oov_rate, s2.oov_rate);
        assert!((s1.entropy_bits - s2.entropy_bits).abs() < 1e-12);
    }
}
