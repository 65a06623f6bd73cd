//! Token streams: byte-level text files and two synthetic tasks.
//!
//! A stream is split 90/10 into contiguous train and held-out blocks and cut
//! into non-overlapping windows of `seq_len + 1` tokens.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Vocabulary of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256;

/// Approximate length of a generated synthetic stream.
pub const SYNTHETIC_TOKENS: usize = 1 << 17;

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::Input(format!("token {t} is not a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::Input(format!("not valid UTF-8: {e}")))
}

/// Where a token stream comes from. Parses from `copy(len,vocab)`,
/// `mod_add(modulus)` or a file path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSpec {
    File(PathBuf),
    /// Records `w SEP w` with `w` drawn from `vocab − 1` symbols; the last
    /// id is the separator.
    Copy { len: usize, vocab: usize },
    /// Records `a b EQ c` with `c = (a + b) mod m`; `EQ = m`.
    ModAdd { modulus: usize },
}

fn call_args<'a>(s: &'a str, name: &str) -> Option<&'a str> {
    s.strip_prefix(name)?.trim_start().strip_prefix('(')?.strip_suffix(')')
}

fn parse_arg(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::config(format!("data: bad {what} {:?}", s.trim())))
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(args) = call_args(s, "copy") {
            let parts: Vec<&str> = args.split(',').collect();
            let [len, vocab] = parts[..] else {
                return Err(Error::config("data: copy takes (len, vocab)"));
            };
            let (len, vocab) = (parse_arg(len, "copy length")?, parse_arg(vocab, "copy vocab")?);
            if len == 0 || vocab < 2 {
                return Err(Error::config("data: copy needs len >= 1 and vocab >= 2"));
            }
            return Ok(DataSpec::Copy { len, vocab });
        }
        if let Some(args) = call_args(s, "mod_add") {
            let modulus = parse_arg(args, "modulus")?;
            if modulus < 2 {
                return Err(Error::config("data: mod_add modulus must be at least 2"));
            }
            return Ok(DataSpec::ModAdd { modulus });
        }
        if s.is_empty() {
            return Err(Error::config("data: empty spec"));
        }
        Ok(DataSpec::File(PathBuf::from(s)))
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::File(p) => write!(f, "{}", p.display()),
            DataSpec::Copy { len, vocab } => write!(f, "copy({len},{vocab})"),
            DataSpec::ModAdd { modulus } => write!(f, "mod_add({modulus})"),
        }
    }
}

impl Serialize for DataSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DataSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl DataSpec {
    /// Vocabulary size a model needs for this stream.
    pub fn vocab_size(&self) -> usize {
        match *self {
            DataSpec::File(_) => BYTE_VOCAB,
            DataSpec::Copy { vocab, .. } => vocab,
            DataSpec::ModAdd { modulus } => modulus + 1,
        }
    }

    /// Builds the stream; synthetic tasks are seeded, files are not random.
    pub fn ingest(&self, seed: u64) -> Result<Corpus> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tokens, task) = match *self {
            DataSpec::File(ref path) => (read_text(path)?, Task::Text),
            DataSpec::Copy { len, vocab } => {
                let rec = 2 * len + 1;
                let sep = vocab - 1;
                let mut tokens = Vec::with_capacity(SYNTHETIC_TOKENS + rec);
                while tokens.len() < SYNTHETIC_TOKENS {
                    let w: Vec<usize> = (0..len).map(|_| rng.random_range(0..sep)).collect();
                    tokens.extend_from_slice(&w);
                    tokens.push(sep);
                    tokens.extend_from_slice(&w);
                }
                (tokens, Task::Copy { len })
            }
            DataSpec::ModAdd { modulus } => {
                let mut tokens = Vec::with_capacity(SYNTHETIC_TOKENS + 4);
                while tokens.len() < SYNTHETIC_TOKENS {
                    let a = rng.random_range(0..modulus);
                    let b = rng.random_range(0..modulus);
                    tokens.extend_from_slice(&[a, b, modulus, (a + b) % modulus]);
                }
                (tokens, Task::ModAdd { modulus })
            }
        };
        Corpus::new(tokens, self.vocab_size(), task)
    }
}

fn read_text(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(tokenize(&text))
}

/// Which targets count towards the loss and accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Text,
    Copy { len: usize },
    ModAdd { modulus: usize },
}

impl Task {
    fn record_len(self) -> usize {
        match self {
            Task::Text => 1,
            Task::Copy { len } => 2 * len + 1,
            Task::ModAdd { .. } => 4,
        }
    }

    /// Whether the token at absolute stream index `g` is a scored target.
    /// Copy scores the repeated half; mod_add scores only the answer.
    pub fn scores(self, g: usize) -> bool {
        match self {
            Task::Text => true,
            Task::Copy { len } => g % (2 * len + 1) > len,
            Task::ModAdd { .. } => g % 4 == 3,
        }
    }
}

/// A token stream with its contiguous train/held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub vocab: usize,
    pub task: Task,
    /// First held-out index; aligned to a record boundary.
    pub split: usize,
}

/// Which side of the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

/// Inputs and next-token targets for one batch. Unscored targets are
/// [`IGNORE_INDEX`].
#[derive(Debug, Clone, PartialEq)]
pub struct LmBatch {
    pub input: TokenBatch,
    pub targets: Vec<usize>,
}

impl Corpus {
    pub fn new(tokens: Vec<usize>, vocab: usize, task: Task) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Input("corpus needs at least two tokens".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("token {t} outside vocabulary {vocab}")));
        }
        let rec = task.record_len();
        let split = (tokens.len() * 9 / 10) / rec * rec;
        Ok(Corpus {
            tokens,
            vocab,
            task,
            split,
        })
    }

    fn range(&self, which: Split) -> (usize, usize) {
        match which {
            Split::Train => (0, self.split),
            Split::HeldOut => (self.split, self.tokens.len()),
        }
    }

    /// Absolute start offsets of the full windows of `seq_len + 1` tokens.
    pub fn windows(&self, which: Split, seq_len: usize) -> Vec<usize> {
        let (lo, hi) = self.range(which);
        let w = seq_len + 1;
        (0..(hi - lo) / w).map(|i| lo + i * w).collect()
    }

    /// Assembles the batch made of the windows starting at `starts`.
    pub fn batch(&self, starts: &[usize], seq_len: usize) -> Result<LmBatch> {
        let mut input = Vec::with_capacity(starts.len() * seq_len);
        let mut targets = Vec::with_capacity(starts.len() * seq_len);
        for &s in starts {
            if s + seq_len >= self.tokens.len() {
                return Err(Error::Input(format!("window at {s} runs past the corpus")));
            }
            input.extend_from_slice(&self.tokens[s..s + seq_len]);
            targets.extend((s + 1..=s + seq_len).map(|g| {
                if self.task.scores(g) {
                    self.tokens[g]
                } else {
                    IGNORE_INDEX
                }
            }));
        }
        Ok(LmBatch {
            input: TokenBatch::new(input, starts.len(), seq_len)?,
            targets,
        })
    }

    /// A seeded sampler over the training windows.
    pub fn sampler(&self, seq_len: usize, batch_size: usize, seed: u64) -> Result<BatchSampler<'_>> {
        let windows = self.windows(Split::Train, seq_len);
        if windows.is_empty() {
            return Err(Error::Input(format!(
                "training split of {} tokens holds no window of {}",
                self.split,
                seq_len + 1
            )));
        }
        if batch_size == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(BatchSampler {
            corpus: self,
            windows,
            seq_len,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

/// Draws training batches uniformly (with replacement) from the windows.
pub struct BatchSampler<'a> {
    corpus: &'a Corpus,
    windows: Vec<usize>,
    seq_len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler<'_> {
    pub fn next_batch(&mut self) -> Result<LmBatch> {
        let starts: Vec<usize> = (0..self.batch_size)
            .map(|_| self.windows[self.rng.random_range(0..self.windows.len())])
            .collect();
        self.corpus.batch(&starts, self.seq_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_strings() {
        assert_eq!("copy(8, 32)".parse::<DataSpec>().unwrap(), DataSpec::Copy { len: 8, vocab: 32 });
        assert_eq!("mod_add(7)".parse::<DataSpec>().unwrap(), DataSpec::ModAdd { modulus: 7 });
        assert_eq!(
            "data/tiny.txt".parse::<DataSpec>().unwrap(),
            DataSpec::File("data/tiny.txt".into())
        );
        assert!("copy(8)".parse::<DataSpec>().is_err());
        assert!("mod_add(x)".parse::<DataSpec>().is_err());
        let s = DataSpec::Copy { len: 3, vocab: 9 };
        assert_eq!(s.to_string().parse::<DataSpec>().unwrap(), s);
    }

    #[test]
    fn byte_round_trip() {
        let text = "héllo, wörld ✓\nline two";
        assert_eq!(detokenize(&tokenize(text)).unwrap(), text);
        assert!(detokenize(&[300]).is_err());
    }

    #[test]
    fn copy_records() {
        let c = DataSpec::Copy { len: 3, vocab: 10 }.ingest(4).unwrap();
        for rec in c.tokens.chunks_exact(7).take(50) {
            assert_eq!(rec[3], 9);
            assert_eq!(rec[..3], rec[4..]);
            assert!(rec[..3].iter().all(|&t| t < 9));
        }
        // only the repeated half is scored
        let scored: Vec<bool> = (0..7).map(|g| c.task.scores(g)).collect();
        assert_eq!(scored, [false, false, false, false, true, true, true]);
    }

    #[test]
    fn mod_add_labels_are_closed_form() {
        let c = DataSpec::ModAdd { modulus: 7 }.ingest(1).unwrap();
        assert_eq!(c.vocab, 8);
        for rec in c.tokens.chunks_exact(4) {
            assert_eq!(rec[2], 7);
            assert_eq!(rec[3], (rec[0] + rec[1]) % 7);
        }
        assert_eq!(c.split % 4, 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let s = DataSpec::ModAdd { modulus: 5 };
        assert_eq!(s.ingest(3).unwrap(), s.ingest(3).unwrap());
        assert_ne!(s.ingest(3).unwrap().tokens, s.ingest(4).unwrap().tokens);
    }

    #[test]
    fn windows_drop_the_partial_tail() {
        let c = Corpus::new((0..95).map(|i| i % 5).collect(), 5, Task::Text).unwrap();
        assert_eq!(c.split, 85);
        assert_eq!(c.windows(Split::Train, 9), (0..8).map(|i| i * 10).collect::<Vec<_>>());
        assert_eq!(c.windows(Split::HeldOut, 4), vec![85, 90]);
        let b = c.batch(&[0, 10], 9).unwrap();
        assert_eq!(b.input.tokens[..3], [0, 1, 2]);
        assert_eq!(b.targets[..3], [1, 2, 3]);
    }

    #[test]
    fn sampler_is_seeded() {
        let c = DataSpec::Copy { len: 4, vocab: 12 }.ingest(0).unwrap();
        let a: Vec<_> = {
            let mut s = c.sampler(16, 4, 9).unwrap();
            (0..3).map(|_| s.next_batch().unwrap()).collect()
        };
        let mut s = c.sampler(16, 4, 9).unwrap();
        for b in a {
            assert_eq!(b, s.next_batch().unwrap());
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = DataSpec::File("/nonexistent/corpus.txt".into()).ingest(0).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/corpus.txt"));
    }
}
