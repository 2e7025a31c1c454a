//! Byte tokenization, the synthetic corpus and batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{CorpusSource, DataConfig};
use crate::error::{Error, Result};

/// Byte-level tokens of a file.
pub fn ingest(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(tokenize(&bytes))
}

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize`]; ids above 255 become `?`.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&t| u8::try_from(t).unwrap_or(b'?')).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

const SUBJECTS: &[&str] =
    &["the cat", "a dog", "the old man", "my sister", "the bird", "a child", "the farmer", "our teacher"];
const VERBS: &[&str] = &["sees", "likes", "finds", "chases", "holds", "paints", "watches", "builds"];
const OBJECTS: &[&str] = &[
    "the red ball",
    "a small box",
    "the green tree",
    "an apple",
    "the river",
    "a wooden chair",
    "the blue sky",
    "a long road",
];
const PLACES: &[&str] = &["today", "at night", "in the garden", "near the house", "again", "slowly"];
const NAMES: &[&str] = &["count", "total", "index", "width", "speed", "level"];

fn prose<R: Rng>(rng: &mut R, out: &mut String) {
    out.push_str(SUBJECTS.choose(rng).expect("non-empty"));
    out.push(' ');
    out.push_str(VERBS.choose(rng).expect("non-empty"));
    out.push(' ');
    out.push_str(OBJECTS.choose(rng).expect("non-empty"));
    if rng.gen_bool(0.5) {
        out.push(' ');
        out.push_str(PLACES.choose(rng).expect("non-empty"));
    }
    out.push_str(". ");
}

fn code<R: Rng>(rng: &mut R, out: &mut String) {
    let name = NAMES.choose(rng).expect("non-empty");
    match rng.gen_range(0..3) {
        0 => out.push_str(&format!("let {name} = {};\n", rng.gen_range(0..100))),
        1 => out.push_str(&format!("{name} += {name} * {};\n", rng.gen_range(2..10))),
        _ => out.push_str(&format!("if {name} > {} {{ return {name}; }}\n", rng.gen_range(0..50))),
    }
}

fn digits<R: Rng>(rng: &mut R, out: &mut String) {
    let start = rng.gen_range(0..50);
    let step = rng.gen_range(1..4);
    let terms: Vec<String> = (0..6).map(|i| (start + i * step).to_string()).collect();
    out.push_str(&terms.join(" "));
    out.push_str(" | ");
}

/// Deterministic synthetic text of exactly `len` bytes: paragraphs of
/// templated prose, code-like statements and arithmetic sequences, so that
/// neighboring tokens usually share a register.
pub fn toy_corpus(len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len + 128);
    while out.len() < len {
        let style = rng.gen_range(0..3);
        for _ in 0..rng.gen_range(3..7) {
            match style {
                0 => prose(&mut rng, &mut out),
                1 => code(&mut rng, &mut out),
                _ => digits(&mut rng, &mut out),
            }
        }
        out.push('\n');
    }
    out.truncate(len);
    out
}

/// Token stream described by `source`.
pub fn load_corpus(source: &CorpusSource) -> Result<Vec<usize>> {
    match source {
        CorpusSource::Path(p) => ingest(p),
        CorpusSource::Toy { bytes, seed } => Ok(tokenize(toy_corpus(*bytes, *seed).as_bytes())),
    }
}

/// Training and held-out parts of a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

/// Holds out the tail of the stream.
pub fn split(tokens: Vec<usize>, heldout_fraction: f64) -> Split {
    let cut = tokens.len() - (tokens.len() as f64 * heldout_fraction).round() as usize;
    let mut train = tokens;
    let heldout = train.split_off(cut);
    Split { train, heldout }
}

pub fn load_split(config: &DataConfig) -> Result<Split> {
    Ok(split(load_corpus(&config.corpus)?, config.heldout_fraction))
}

/// Random windows of `seq_len + 1` tokens, flattened into inputs and
/// next-token targets.
pub fn sample_batch<R: Rng + ?Sized>(
    tokens: &[usize],
    batch: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if tokens.len() <= seq_len {
        return Err(Error::SequenceTooShort { len: tokens.len(), chunk: seq_len + 1 });
    }
    let mut inputs = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    for _ in 0..batch {
        let start = rng.gen_range(0..tokens.len() - seq_len);
        inputs.extend_from_slice(&tokens[start..start + seq_len]);
        targets.extend_from_slice(&tokens[start + 1..start + seq_len + 1]);
    }
    Ok((inputs, targets))
}

/// Disjoint consecutive windows of `len` tokens; a short tail is dropped.
pub fn windows(tokens: &[usize], len: usize) -> impl Iterator<Item = &[usize]> {
    tokens.chunks_exact(len)
}
