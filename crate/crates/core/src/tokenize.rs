//! Word-level tokenisation with per-language vocabularies.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use cardiocap_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Language;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const OOV: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[START]", "[END]", "[OOV]", "[MASK]"];

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIAL
}

/// Lower-cases and splits on whitespace, trimming punctuation at token edges
/// only, so "v5,6" survives intact.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Canonical form of a text: its normalised tokens joined by single spaces.
pub fn normalize_text(text: &str) -> String {
    normalize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    language: Language,
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    language: Language,
    tokens: Vec<String>,
    specials: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw reports. Tokens seen fewer than
    /// `min_count` times are left out and later encode to `[OOV]`.
    pub fn build<S: AsRef<str>>(reports: &[S], language: Language, min_count: usize) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Argument(format!("no reports to build the {language} vocabulary from")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for r in reports {
            for tok in normalize(r.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(language, ranked.into_iter().map(|(t, _)| t))
    }

    /// Specials first, then `tokens` in the given order.
    pub fn from_tokens(language: Language, tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(tokens).collect();
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate token {t:?} in {language} vocabulary")));
            }
        }
        Ok(Vocabulary { language, id_to_token, token_to_id })
    }

    pub fn language(&self) -> Language {
        self.language
    }

    /// Number of ids including the special tokens.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Ids of all non-special tokens.
    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        NUM_SPECIAL..self.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 3 {
            return Err(Error::Argument(format!("max_len {max_len} leaves no room for [START] and [END]")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(START);
        ids.extend(normalize(text).iter().take(max_len - 2).map(|t| self.id(t).unwrap_or(OOV)));
        ids.push(END);
        let true_length = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSequence { language: self.language, ids, true_length })
    }

    /// Joins the non-special tokens of `ids` with single spaces.
    pub fn decode_ids(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::Corruption(format!("id {id} out of range for {} vocabulary of {}", self.language, self.len()))
            })?;
            if !is_special(id) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        self.decode_ids(&seq.ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let specials = SPECIAL_TOKENS.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect();
        let file = VocabFile { language: self.language, tokens: self.id_to_token[NUM_SPECIAL..].to_vec(), specials };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if file.specials.get(*s) != Some(&i) {
                return Err(Error::format(path, format!("special token {s} must have id {i}")));
            }
        }
        Self::from_tokens(file.language, file.tokens).map_err(|e| Error::format(path, e))
    }
}

/// A padded id sequence: `[START] body [END] [PAD]...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub language: Language,
    pub ids: Vec<usize>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions holding regular (non-special) tokens.
    pub fn eligible_positions(&self) -> Vec<usize> {
        self.ids.iter().enumerate().filter(|(_, &id)| !is_special(id)).map(|(i, _)| i).collect()
    }
}

/// Per-language token embedding matrix `[C, M]`.
#[derive(Clone, Debug)]
pub struct EmbeddingTable<T> {
    pub language: Language,
    pub matrix: Tensor<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn row(&self, id: usize) -> &[T] {
        let m = self.matrix.shape()[1];
        &self.matrix.data()[id * m..(id + 1) * m]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// Entries drawn i.i.d. from U(−1/√m, 1/√m).
pub fn init_embeddings<T: Scalar>(vocab: &Vocabulary, m: usize, seed: u64) -> Result<EmbeddingTable<T>> {
    if m == 0 {
        return Err(Error::Argument("embedding dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrix = Tensor::uniform(&[vocab.len(), m], 1.0 / (m as f64).sqrt(), &mut rng);
    Ok(EmbeddingTable { language: vocab.language(), matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sinus() -> Vocabulary {
        Vocabulary::build(&["Sinus rhythm.", "sinus RHYTHM"], Language::En, 1).unwrap()
    }

    #[test]
    fn folds_case_and_punctuation() {
        let v = sinus();
        assert_eq!(v.len(), 7);
        // equal counts, so lexicographic order decides
        assert_eq!(v.id("rhythm"), Some(5));
        assert_eq!(v.id("sinus"), Some(6));
        assert_eq!(normalize("ST depressed in I, aVL, V5,6."), ["st", "depressed", "in", "i", "avl", "v5,6"]);
    }

    #[test]
    fn ids_ordered_by_frequency_then_lexicographically() {
        let v = Vocabulary::build(&["b a c", "c b", "c"], Language::En, 1).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIAL..], ["c", "b", "a"]);
        let rare = Vocabulary::build(&["b a c", "c b", "c"], Language::En, 2).unwrap();
        assert_eq!(&rare.tokens()[NUM_SPECIAL..], ["c", "b"]);
        assert!(Vocabulary::build::<&str>(&[], Language::En, 1).is_err());
    }

    #[test]
    fn encode_rules() {
        let v = sinus();
        let empty = v.encode("", 5).unwrap();
        assert_eq!(empty.ids, [START, END, PAD, PAD, PAD]);
        assert_eq!(empty.true_length, 2);
        let oov = v.encode("sinus zzz", 6).unwrap();
        assert_eq!(oov.ids, [START, 6, OOV, END, PAD, PAD]);
        let cut = v.encode("sinus rhythm sinus", 4).unwrap();
        assert_eq!(cut.ids, [START, 6, 5, END]);
        assert!(v.encode("x", 2).is_err());
    }

    #[test]
    fn decode_drops_specials() {
        let v = sinus();
        assert_eq!(v.decode_ids(&[START, END]).unwrap(), "");
        assert_eq!(v.decode_ids(&[START, 6, 5, END, PAD]).unwrap(), "sinus rhythm");
        assert!(matches!(v.decode_ids(&[START, 99]), Err(Error::Corruption(_))));
    }

    #[test]
    fn greek_round_trip_is_byte_identical() {
        let text = "Τα κύματα T είναι ανεστραμμένα.";
        let v = Vocabulary::build(&[text], Language::El, 1).unwrap();
        let seq = v.encode(text, 12).unwrap();
        let out = v.decode(&seq).unwrap();
        assert_eq!(out, "τα κύματα t είναι ανεστραμμένα");
        assert_eq!(out.as_bytes(), normalize_text(text).as_bytes());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("en.json");
        let v = sinus();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn embeddings_deterministic_and_bounded() {
        let v = sinus();
        let a = init_embeddings::<f32>(&v, 4, 3).unwrap();
        let b = init_embeddings::<f32>(&v, 4, 3).unwrap();
        assert_eq!(a.matrix.shape(), [7, 4]);
        assert_eq!(a.matrix.data(), b.matrix.data());
        assert!(a.matrix.data().iter().all(|x| x.abs() <= 0.5 && x.is_finite()));
    }

    #[test]
    fn embedding_variance_matches_uniform() {
        let tokens = (0..20_000).map(|i| format!("t{i}"));
        let v = Vocabulary::from_tokens(Language::En, tokens).unwrap();
        let m = 5;
        let e = init_embeddings::<f64>(&v, m, 9).unwrap();
        let data = e.matrix.data();
        assert!(data.len() >= 100_000);
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / data.len() as f64;
        let expected = 1.0 / (3.0 * m as f64);
        assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_inverts_encode(picks in proptest::collection::vec(0usize..6, 0..12)) {
            let words = ["sinus", "rhythm", "st", "v5,6", "κύματα", "ischämie"];
            let v = Vocabulary::build(&[words.join(" ")], Language::En, 1).unwrap();
            let text = picks.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
            let seq = v.encode(&text, 16).unwrap();
            prop_assert_eq!(v.decode(&seq).unwrap(), text);
            prop_assert_eq!(seq.ids[seq.true_length - 1], END);
        }

        #[test]
        fn ids_stable_under_reordering(mut reports in proptest::collection::vec("[a-d]( [a-d]){0,4}", 1..8)) {
            let a = Vocabulary::build(&reports, Language::En, 1).unwrap();
            reports.reverse();
            let b = Vocabulary::build(&reports, Language::En, 1).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
