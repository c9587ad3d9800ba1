//! Text front-ends producing fixed-dimension sentence embeddings.
//!
//! The default is a signed feature-hashing bag of word unigrams and bigrams.
//! Externally computed sentence embeddings can be supplied as a JSONL file
//! with one `{"text": ..., "vector": [...]}` object per line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::mix64;

pub const DEFAULT_HASH_DIM: usize = 1024;
pub const MIN_HASH_DIM: usize = 16;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SIGN_SALT: u64 = 0x5157_4e5f_5349_474e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EmbeddingSource {
    Hash,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot / (self.norm() * other.norm())
    }
}

fn seeded_hash(token: &str, seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ mix64(seed);
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix64(h)
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Signed feature hashing of unigrams and bigrams, L2-normalized.
pub fn featurize(text: &str, dim: usize, seed: u64) -> Result<Embedding> {
    if dim < MIN_HASH_DIM {
        return Err(Error::config(format!("hash dimension must be at least {MIN_HASH_DIM}, got {dim}")));
    }
    let words = tokenize(text);
    if words.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut values = vec![0.0; dim];
    let mut add = |token: &str| {
        let idx = (seeded_hash(token, seed) % dim as u64) as usize;
        let sign = if seeded_hash(token, seed ^ SIGN_SALT) & 1 == 0 { 1.0 } else { -1.0 };
        values[idx] += sign;
    };
    for w in &words {
        add(w);
    }
    for pair in words.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every token cancelled out; fall back to a deterministic unit vector
        let idx = (seeded_hash(&words.join(" "), seed) % dim as u64) as usize;
        values[idx] = 1.0;
    } else {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Embedding {
        values,
        source: EmbeddingSource::Hash,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingLine {
    text: String,
    vector: Vec<f64>,
}

/// Precomputed sentence embeddings keyed by exact instruction text.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalEmbeddings {
    dim: usize,
    map: HashMap<String, Vec<f64>>,
}

impl ExternalEmbeddings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut out = ExternalEmbeddings::default();
        for (i, (text, vector)) in pairs.into_iter().enumerate() {
            if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("entry {i} ({text:?}) has an empty or non-finite vector")));
            }
            if out.map.is_empty() {
                out.dim = vector.len();
            } else if vector.len() != out.dim {
                return Err(Error::Shape {
                    context: "external embedding",
                    expected: out.dim,
                    got: vector.len(),
                });
            }
            if out.map.insert(text.clone(), vector).is_some() {
                return Err(Error::config(format!("duplicate embedding text {text:?}")));
            }
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut pairs = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: EmbeddingLine =
                serde_json::from_str(&line).map_err(|e| Error::file(path, format!("line {}: {e}", n + 1)))?;
            pairs.push((entry.text, entry.vector));
        }
        Self::from_pairs(pairs).map_err(|e| Error::file(path, e))
    }

    /// Writes entries sorted by text so output is byte-stable.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut keys: Vec<_> = self.map.keys().collect();
        keys.sort();
        for k in keys {
            let line = EmbeddingLine {
                text: k.clone(),
                vector: self.map[k].clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, text: &str) -> Result<Embedding> {
        self.map
            .get(text)
            .map(|v| Embedding {
                values: v.clone(),
                source: EmbeddingSource::External,
            })
            .ok_or_else(|| Error::MissingEmbedding(text.to_string()))
    }
}

/// Maps instruction text to the embedding consumed by the encoder.
#[derive(Debug, Clone)]
pub enum TextFrontend {
    Hash { dim: usize, seed: u64 },
    External(ExternalEmbeddings),
}

impl Default for TextFrontend {
    fn default() -> Self {
        TextFrontend::Hash {
            dim: DEFAULT_HASH_DIM,
            seed: 0,
        }
    }
}

impl TextFrontend {
    pub fn dim(&self) -> usize {
        match self {
            TextFrontend::Hash { dim, .. } => *dim,
            TextFrontend::External(ext) => ext.dim(),
        }
    }

    pub fn embed(&self, text: &str) -> Result<Embedding> {
        match self {
            TextFrontend::Hash { dim, seed } => featurize(text, *dim, *seed),
            TextFrontend::External(ext) => ext.get(text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let a = featurize("Many bats, please!", 256, 0).unwrap();
        let b = featurize("Many bats, please!", 256, 0).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a.source, EmbeddingSource::Hash);
        assert_ne!(a, featurize("Many bats, please!", 256, 1).unwrap());
    }

    #[test]
    fn normalization_ignores_case_and_punctuation() {
        assert_eq!(
            featurize("Long path, MANY bats.", 64, 3).unwrap(),
            featurize("long path many bats", 64, 3).unwrap()
        );
    }

    #[test]
    fn similar_texts_are_closer() {
        let f = |t| featurize(t, 256, 0).unwrap();
        let many = f("many bats");
        assert!(many.cosine(&f("many many bats")) > many.cosine(&f("few walls")));
    }

    #[test]
    fn rejects_empty_and_tiny_dims() {
        assert!(matches!(featurize("  ?!. ", 256, 0), Err(Error::EmptyText)));
        assert!(matches!(featurize("bats", 8, 0), Err(Error::Config(_))));
    }

    #[test]
    fn external_map_basics() {
        let ext = ExternalEmbeddings::from_pairs(vec![
            ("many bats".to_string(), vec![0.5; 768]),
            ("few walls".to_string(), vec![-0.5; 768]),
        ])
        .unwrap();
        assert_eq!((ext.len(), ext.dim()), (2, 768));
        assert_eq!(ext.get("few walls").unwrap().source, EmbeddingSource::External);
        match ext.get("long path") {
            Err(Error::MissingEmbedding(t)) => assert_eq!(t, "long path"),
            other => panic!("unexpected {other:?}"),
        }
        let dup = ExternalEmbeddings::from_pairs(vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])]);
        assert!(dup.is_err());
        let ragged = ExternalEmbeddings::from_pairs(vec![("a".into(), vec![1.0]), ("b".into(), vec![2.0, 3.0])]);
        assert!(matches!(ragged, Err(Error::Shape { .. })));
    }

    #[test]
    fn external_file_duplicate_lines_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        std::fs::write(
            &path,
            "{\"text\":\"x\",\"vector\":[1.0,2.0]}\n{\"text\":\"x\",\"vector\":[1.0,2.0]}\n",
        )
        .unwrap();
        assert!(ExternalEmbeddings::load(&path).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn external_round_trip(entries in proptest::collection::hash_map("[a-z ]{1,20}", proptest::collection::vec(-1e3f64..1e3, 8), 1..20)) {
                let ext = ExternalEmbeddings::from_pairs(entries).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("e.jsonl");
                ext.save(&path).unwrap();
                prop_assert_eq!(ExternalEmbeddings::load(&path).unwrap(), ext);
            }

            #[test]
            fn hash_embedding_unit_norm(text in "[A-Za-z]{1,8}( [A-Za-z,.]{1,8}){0,8}", dim in 16usize..512, seed in any::<u64>()) {
                let e = featurize(&text, dim, seed).unwrap();
                prop_assert_eq!(e.dim(), dim);
                prop_assert!((e.norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}
