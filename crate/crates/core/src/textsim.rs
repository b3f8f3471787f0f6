//! Token-level text similarity over deterministic embeddings.
//!
//! Scores are computed by greedy maximum-cosine matching of token embeddings
//! and reported as precision/recall/F. The default embedding is a seeded
//! hash of character 3-grams, so scores are reproducible everywhere without
//! model files; a table mode accepts externally precomputed token vectors
//! when higher fidelity is wanted.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_f64(x: u64) -> f64 {
    // 53 high bits -> [0,1) -> [-1,1)
    ((x >> 11) as f64) * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// How token vectors are produced.
#[derive(Debug, Clone)]
pub enum EmbeddingMode {
    /// Seeded-hash accumulation of character 3-grams (the default).
    HashedNgram,
    /// Fixed token table; tokens absent from the table fall back to hashing.
    Table(BTreeMap<String, Vec<f64>>),
}

/// Deterministic token embedding model. All produced vectors are unit-norm
/// and depend only on (text, seed, mode).
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    dimension: usize,
    seed: u64,
    mode: EmbeddingMode,
}

impl Default for EmbeddingModel {
    fn default() -> Self {
        Self::hashed(64, 0).expect("default dimension is valid")
    }
}

impl EmbeddingModel {
    pub fn hashed(dimension: usize, seed: u64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Validation("embedding dimension must be >= 1".into()));
        }
        Ok(Self {
            dimension,
            seed,
            mode: EmbeddingMode::HashedNgram,
        })
    }

    /// Parse a token table: one `token v1 .. v_dim` record per line,
    /// whitespace separated; `#` starts a comment. Vectors are normalized
    /// on load.
    pub fn from_table_str(text: &str, dimension: usize, seed: u64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Validation("embedding dimension must be >= 1".into()));
        }
        let mut table = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: missing token", lineno + 1)))?
                .to_lowercase();
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| {
                        Error::Parse(format!("line {}: bad float {:?}", lineno + 1, p))
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != dimension {
                return Err(Error::Parse(format!(
                    "line {}: expected {} components, got {}",
                    lineno + 1,
                    dimension,
                    values.len()
                )));
            }
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::Parse(format!(
                    "line {}: vector for {:?} is zero or non-finite",
                    lineno + 1,
                    token
                )));
            }
            table.insert(token, values.iter().map(|v| v / norm).collect());
        }
        Ok(Self {
            dimension,
            seed,
            mode: EmbeddingMode::Table(table),
        })
    }

    pub fn load_table(path: impl AsRef<Path>, dimension: usize, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_table_str(&text, dimension, seed)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Lowercased tokens split on whitespace and punctuation.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect()
    }

    fn hashed_vector(&self, token: &str) -> Vec<f64> {
        let chars: Vec<char> = token.chars().collect();
        let mut acc = vec![0.0; self.dimension];
        let mut add_gram = |gram: &str| {
            let mut state = fnv1a(self.seed, gram.as_bytes());
            for slot in acc.iter_mut() {
                *slot += unit_f64(splitmix64(&mut state));
            }
        };
        if chars.len() < 3 {
            add_gram(token);
        } else {
            for w in chars.windows(3) {
                add_gram(&w.iter().collect::<String>());
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in acc.iter_mut() {
                *v /= norm;
            }
        } else {
            // Cannot happen in practice; keeps the unit-norm contract total.
            acc[(fnv1a(self.seed, token.as_bytes()) as usize) % self.dimension] = 1.0;
        }
        acc
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if let EmbeddingMode::Table(table) = &self.mode {
            if let Some(v) = table.get(token) {
                return v.clone();
            }
        }
        self.hashed_vector(token)
    }

    /// Embed a text as one unit vector per token; empty text gives an empty
    /// sequence.
    pub fn embed(&self, text: &str) -> Vec<Vec<f64>> {
        Self::tokenize(text)
            .iter()
            .map(|t| self.token_vector(t))
            .collect()
    }
}

/// Precision/recall/F of a greedy token matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_best_match(from: &[Vec<f64>], against: &[Vec<f64>]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|v| {
            against
                .iter()
                .map(|w| dot(v, w))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / from.len() as f64
}

/// Greedy-matching similarity between a candidate and a reference text.
///
/// Recall is the mean over reference tokens of the best cosine against the
/// candidate tokens; precision is the dual; F is their harmonic mean. No idf
/// weighting and no rescaling baseline, so F is symmetric in its arguments.
pub fn bertscore(candidate: &str, reference: &str, model: &EmbeddingModel) -> Result<ScoreTriple> {
    let cand = model.embed(candidate);
    let refer = model.embed(reference);
    if cand.is_empty() || refer.is_empty() {
        return Err(Error::Domain(
            "bertscore requires both sides to have at least one token".into(),
        ));
    }
    let precision = mean_best_match(&cand, &refer);
    let recall = mean_best_match(&refer, &cand);
    let f = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(ScoreTriple {
        precision,
        recall,
        f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vectors_are_unit_norm_and_deterministic() {
        let m = EmbeddingModel::default();
        for token in ["abc", "components", "x", "mis-binding", "letters"] {
            let a = m.embed(token);
            let b = m.embed(token);
            assert_eq!(a, b);
            for v in &a {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9, "norm {} for {}", norm, token);
            }
        }
    }

    #[test]
    fn empty_text_embeds_to_empty() {
        let m = EmbeddingModel::default();
        assert!(m.embed("").is_empty());
        assert!(m.embed(" ,. ").is_empty());
    }

    #[test]
    fn cosine_reproducible_for_fixed_seed() {
        let m1 = EmbeddingModel::hashed(64, 7).unwrap();
        let m2 = EmbeddingModel::hashed(64, 7).unwrap();
        let a1 = &m1.embed("abc")[0];
        let b1 = &m1.embed("xyz")[0];
        let a2 = &m2.embed("abc")[0];
        let b2 = &m2.embed("xyz")[0];
        assert_eq!(dot(a1, b1), dot(a2, b2));
        // A different seed gives a different geometry.
        let m3 = EmbeddingModel::hashed(64, 8).unwrap();
        let a3 = &m3.embed("abc")[0];
        let b3 = &m3.embed("xyz")[0];
        assert_ne!(dot(a1, b1), dot(a3, b3));
    }

    #[test]
    fn self_similarity_is_one() {
        let m = EmbeddingModel::default();
        let s = bertscore("Distorted components.", "Distorted components.", &m).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-9);
        assert!((s.recall - 1.0).abs() < 1e-9);
        assert!((s.f - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_side_is_domain_error() {
        let m = EmbeddingModel::default();
        assert!(bertscore("", "abc", &m).is_err());
        assert!(bertscore("abc", "...", &m).is_err());
    }

    #[test]
    fn table_mode_overrides_tokens() {
        let table = "abc 1 0\nxyz 0 1\n";
        let m = EmbeddingModel::from_table_str(table, 2, 0).unwrap();
        let a = &m.embed("abc")[0];
        let b = &m.embed("xyz")[0];
        assert_eq!(a, &vec![1.0, 0.0]);
        assert!((dot(a, b)).abs() < 1e-12);
        // Unknown tokens fall back to the hashed embedding.
        let c = &m.embed("other")[0];
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn table_parse_errors() {
        assert!(EmbeddingModel::from_table_str("abc 1 nan_x", 2, 0).is_err());
        assert!(EmbeddingModel::from_table_str("abc 1", 2, 0).is_err());
        assert!(EmbeddingModel::from_table_str("abc 0 0", 2, 0).is_err());
    }

    /// Brute-force greedy matching written independently of the library path:
    /// full cosine formula with explicit norms, quadratic scans.
    fn brute_force(candidate: &str, reference: &str, model: &EmbeddingModel) -> (f64, f64, f64) {
        let cos = |a: &[f64], b: &[f64]| {
            let dp: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dp / (na * nb)
        };
        let c = model.embed(candidate);
        let r = model.embed(reference);
        let mut p_sum = 0.0;
        for v in &c {
            let mut best = f64::NEG_INFINITY;
            for w in &r {
                best = best.max(cos(v, w));
            }
            p_sum += best;
        }
        let mut r_sum = 0.0;
        for w in &r {
            let mut best = f64::NEG_INFINITY;
            for v in &c {
                best = best.max(cos(w, v));
            }
            r_sum += best;
        }
        let p = p_sum / c.len() as f64;
        let rr = r_sum / r.len() as f64;
        let f = if p + rr > 0.0 { 2.0 * p * rr / (p + rr) } else { 0.0 };
        (p, rr, f)
    }

    #[test]
    fn matches_brute_force_oracle() {
        let m = EmbeddingModel::default();
        let pairs = [
            ("Distorted components.", "No artifacts."),
            ("Blur, Out of frame", "Out of frame."),
            ("alpha beta gamma", "beta gamma delta"),
            ("one", "one two three four"),
            ("Shadow anomaly", "Shape mis-binding"),
        ];
        for (a, b) in pairs {
            let s = bertscore(a, b, &m).unwrap();
            let (p, r, f) = brute_force(a, b, &m);
            assert!((s.precision - p).abs() < 1e-12);
            assert!((s.recall - r).abs() < 1e-12);
            assert!((s.f - f).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn f_is_symmetric(a in "[a-z]{1,8}( [a-z]{1,8}){0,5}", b in "[a-z]{1,8}( [a-z]{1,8}){0,5}") {
            let m = EmbeddingModel::default();
            let ab = bertscore(&a, &b, &m).unwrap();
            let ba = bertscore(&b, &a, &m).unwrap();
            prop_assert_eq!(ab.f, ba.f);
            prop_assert_eq!(ab.precision, ba.recall);
        }

        #[test]
        fn self_score_is_one_for_random_strings(s in "[a-z]{1,10}( [a-z]{1,10}){0,6}") {
            let m = EmbeddingModel::default();
            let t = bertscore(&s, &s, &m).unwrap();
            prop_assert!((t.f - 1.0).abs() < 1e-9);
        }

        #[test]
        fn shared_token_keeps_f_above_floor(
            a in "[a-z]{2,8}( [a-z]{2,8}){0,4}",
            b in "[a-z]{2,8}( [a-z]{2,8}){0,4}",
            w in "[a-z]{3,8}",
        ) {
            let m = EmbeddingModel::default();
            let base = bertscore(&a, &b, &m).unwrap();
            let grown = bertscore(&format!("{a} {w}"), &format!("{b} {w}"), &m).unwrap();
            let floor = base.precision.min(base.recall);
            prop_assert!(grown.f >= floor - 1e-9, "{} < {}", grown.f, floor);
        }
    }
}
