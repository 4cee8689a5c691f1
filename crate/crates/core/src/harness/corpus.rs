//! Byte-level corpus handling: ingestion, splits and sequence windows.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MIN_CORPUS_BYTES: usize = 10_000;

/// Token streams of one corpus: 90% train, 5% estimation, 5% eval.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub estimation: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Corpus {
    /// Splits raw bytes into contiguous blocks; each byte is one token.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MIN_CORPUS_BYTES {
            return Err(Error::Input(format!(
                "corpus has {} bytes; at least {MIN_CORPUS_BYTES} are required",
                bytes.len()
            )));
        }
        let n = bytes.len();
        let train_end = n * 90 / 100;
        let est_end = n * 95 / 100;
        let tok = |s: &[u8]| s.iter().map(|&b| b as usize).collect::<Vec<_>>();
        Ok(Corpus {
            train: tok(&bytes[..train_end]),
            estimation: tok(&bytes[train_end..est_end]),
            eval: tok(&bytes[est_end..]),
        })
    }
}

pub fn ingest_corpus(path: &Path) -> Result<Corpus> {
    Corpus::from_bytes(&std::fs::read(path)?)
}

const SUBJECTS: &[&str] = &[
    "the farmer", "a child", "the old sailor", "my neighbour", "the teacher", "a small dog",
    "the river", "her brother", "the baker", "a tired horse", "the wind", "our captain",
];
const VERBS: &[&str] = &[
    "carries", "watches", "finds", "follows", "builds", "remembers", "paints", "opens",
    "sells", "hides", "loves", "crosses",
];
const OBJECTS: &[&str] = &[
    "the bread", "a wooden boat", "the green hill", "an empty box", "the long road",
    "a letter", "the garden gate", "some apples", "the bright lamp", "a quiet song",
    "the stone bridge", "an old map",
];
const ENDINGS: &[&str] = &[
    "in the morning", "before the rain", "near the market", "after dinner", "every day",
    "with great care", "at the edge of town", "without a word",
];

/// Deterministic English-like text built from a small grammar.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 128);
    while out.len() < n_bytes {
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
        let mut s = format!(
            "{} {} {}",
            pick(&mut rng, SUBJECTS),
            pick(&mut rng, VERBS),
            pick(&mut rng, OBJECTS)
        );
        if rng.random_bool(0.6) {
            s.push(' ');
            s.push_str(pick(&mut rng, ENDINGS));
        }
        let mut chars = s.chars();
        if let Some(first) = chars.next() {
            out.extend(first.to_uppercase());
            out.push_str(chars.as_str());
        }
        out.push_str(if rng.random_bool(0.15) { ".\n" } else { ". " });
    }
    out.truncate(n_bytes);
    out.into_bytes()
}

/// `count` windows of `len` tokens spread evenly over `stream`; windows
/// overlap when the stream is too short to hold them side by side.
pub fn evenly_spaced_windows(stream: &[usize], count: usize, len: usize) -> Result<Vec<Vec<usize>>> {
    if len < 2 {
        return Err(Error::Config("sequence length must be at least 2".into()));
    }
    if stream.len() < len {
        return Err(Error::Input(format!(
            "stream of {} tokens cannot hold a window of {len}",
            stream.len()
        )));
    }
    let span = stream.len() - len;
    Ok((0..count)
        .map(|i| {
            let start = if count <= 1 { 0 } else { i * span / (count - 1) };
            stream[start..start + len].to_vec()
        })
        .collect())
}

/// Non-overlapping windows of `len` tokens; a tail of at least two tokens is kept.
pub fn chunk_windows(stream: &[usize], len: usize) -> Vec<Vec<usize>> {
    stream
        .chunks(len.max(2))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// `count` random windows of `len` tokens.
pub fn random_windows(stream: &[usize], count: usize, len: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let span = stream.len().saturating_sub(len);
    (0..count)
        .map(|_| {
            let s = rng.random_range(0..=span);
            stream[s..(s + len).min(stream.len())].to_vec()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_eval_capacity() {
        let bytes = synthetic_text(10_000, 1);
        assert_eq!(bytes.len(), 10_000);
        let c = Corpus::from_bytes(&bytes).unwrap();
        assert_eq!(c.train.len() + c.estimation.len() + c.eval.len(), 10_000);
        assert_eq!(c.train.len(), 9_000);
        let full = chunk_windows(&c.eval, 128).into_iter().filter(|w| w.len() == 128).count();
        assert!(full >= 3);
    }

    #[test]
    fn too_small_is_rejected_with_minimum() {
        let err = Corpus::from_bytes(&[b'a'; 9_999]).unwrap_err();
        assert!(err.to_string().contains("10000"));
    }

    #[test]
    fn ingestion_is_deterministic_and_byte_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let mut bytes = synthetic_text(12_000, 2);
        bytes[50] = 0xff;
        bytes[51] = 0xfe;
        std::fs::write(&path, &bytes).unwrap();
        let a = ingest_corpus(&path).unwrap();
        assert_eq!(a, ingest_corpus(&path).unwrap());
        assert_eq!(a.train[50], 255);
    }

    #[test]
    fn windows() {
        let s: Vec<usize> = (0..100).collect();
        let w = evenly_spaced_windows(&s, 5, 30).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w[0][0], 0);
        assert_eq!(w[4][29], 99);
        assert!(evenly_spaced_windows(&s, 3, 200).is_err());
        let c = chunk_windows(&s, 30);
        assert_eq!(c.len(), 4);
        assert_eq!(c[3].len(), 10);
    }

    #[test]
    fn synthetic_text_is_seeded() {
        assert_eq!(synthetic_text(500, 3), synthetic_text(500, 3));
        assert_ne!(synthetic_text(500, 3), synthetic_text(500, 4));
    }
}
