//! Corpus BLEU, ROUGE-L, exact-match METEOR and Self-BLEU.
//!
//! All scorers take pre-tokenised input; tokens may be any hashable type.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::tokenize::normalize;

fn ngram_counts<W: Eq + Hash>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_default() += 1;
    }
    counts
}

/// Clipped matches and total candidate n-grams of order `n`.
fn clipped<W: Eq + Hash>(cand: &[W], refs: &[&[W]], n: usize) -> (usize, usize) {
    let counts = ngram_counts(cand, n);
    let total = cand.len().saturating_sub(n - 1);
    let mut max_ref: HashMap<&[W], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(c);
        }
    }
    let matched = counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, total)
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_ref_len<W>(c: usize, refs: &[&[W]]) -> usize {
    refs.iter().map(|r| r.len()).min_by_key(|&r| (r.abs_diff(c), r)).unwrap_or(0)
}

/// Shared BLEU core. With `smoothing = None`, an order with no matches
/// zeroes the score; with `Some(eps)` a zero precision is replaced by `eps`.
/// Orders for which no candidate has any n-gram are left out of the mean
/// when smoothing is on.
fn bleu_core<W: Eq + Hash>(candidates: &[&[W]], references: &[Vec<&[W]>], max_n: usize, smoothing: Option<f64>) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Argument("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Argument(format!("{} candidates but {} reference sets", candidates.len(), references.len())));
    }
    if max_n == 0 {
        return Err(Error::Argument("max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for n in 1..=max_n {
            let (m, t) = clipped(cand, refs, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for (&m, &t) in matched.iter().zip(&totals) {
        let p = match smoothing {
            None if t == 0 || m == 0 => return Ok(0.0),
            None => m as f64 / t as f64,
            Some(_) if t == 0 => continue,
            Some(eps) if m == 0 => eps,
            Some(_) => m as f64 / t as f64,
        };
        log_sum += p.ln();
        orders += 1;
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Corpus-level BLEU with one reference per candidate, in [0, 100].
pub fn bleu<W: Eq + Hash, C: AsRef<[W]>, R: AsRef<[W]>>(candidates: &[C], references: &[R], max_n: usize) -> Result<f64> {
    let cands: Vec<&[W]> = candidates.iter().map(AsRef::as_ref).collect();
    let refs: Vec<Vec<&[W]>> = references.iter().map(|r| vec![r.as_ref()]).collect();
    bleu_core(&cands, &refs, max_n, None)
}

/// Corpus-level BLEU where each candidate has several references.
pub fn bleu_multi<W: Eq + Hash>(candidates: &[&[W]], references: &[Vec<&[W]>], max_n: usize) -> Result<f64> {
    bleu_core(candidates, references, max_n, None)
}

fn lcs_len<W: Eq>(a: &[W], b: &[W]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure (β = 1) of one pair, in [0, 100]. Empty input scores 0.
pub fn rouge_l<W: Eq>(candidate: &[W], reference: &[W]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Mean pairwise ROUGE-L.
pub fn rouge_l_corpus<W: Eq, C: AsRef<[W]>, R: AsRef<[W]>>(candidates: &[C], references: &[R]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Argument("ROUGE-L needs equally many, non-zero candidates and references".into()));
    }
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c.as_ref(), r.as_ref())).sum();
    Ok(sum / candidates.len() as f64)
}

/// Search state for the chunk-minimising alignment.
struct Aligner<'a, W> {
    cand: &'a [W],
    reference: &'a [W],
    used_ref: Vec<bool>,
    budget: usize,
    best: Option<usize>,
}

impl<'a, W: Eq + Hash> Aligner<'a, W> {
    /// `need[w]` holds (matches still required, occurrences left) for type `w`
    /// over `cand[i..]`.
    fn search(&mut self, i: usize, prev: Option<usize>, chunks: usize, need: &mut HashMap<&'a W, (usize, usize)>) {
        if self.budget == 0 || self.best.is_some_and(|b| chunks >= b) {
            return;
        }
        self.budget -= 1;
        if i == self.cand.len() {
            self.best = Some(chunks);
            return;
        }
        let cand = self.cand;
        let w = &cand[i];
        let Some(&(required, left)) = need.get(w) else {
            self.search(i + 1, None, chunks, need);
            return;
        };
        if required > 0 {
            // Prefer extending the current chunk, then every other slot in order.
            let mut slots: Vec<usize> = (0..self.reference.len()).filter(|&j| !self.used_ref[j] && self.reference[j] == *w).collect();
            if let Some(p) = prev {
                if let Some(pos) = slots.iter().position(|&j| j == p + 1) {
                    slots[..=pos].rotate_right(1);
                }
            }
            for j in slots {
                let extends = prev.is_some_and(|p| p + 1 == j);
                self.used_ref[j] = true;
                need.insert(w, (required - 1, left - 1));
                self.search(i + 1, Some(j), chunks + usize::from(!extends), need);
                need.insert(w, (required, left));
                self.used_ref[j] = false;
            }
        }
        // Skipping this occurrence is only allowed if the rest can still reach the maximum.
        if left > required {
            need.insert(w, (required, left - 1));
            self.search(i + 1, None, chunks, need);
            need.insert(w, (required, left));
        }
    }
}

/// Maximum exact matches and the fewest chunks among maximal alignments.
fn align<W: Eq + Hash>(candidate: &[W], reference: &[W]) -> (usize, usize) {
    let mut cc: HashMap<&W, usize> = HashMap::new();
    let mut rc: HashMap<&W, usize> = HashMap::new();
    candidate.iter().for_each(|w| *cc.entry(w).or_default() += 1);
    reference.iter().for_each(|w| *rc.entry(w).or_default() += 1);
    let mut need: HashMap<&W, (usize, usize)> = HashMap::new();
    let mut matches = 0;
    for (w, &c) in &cc {
        let m = c.min(rc.get(w).copied().unwrap_or(0));
        if m > 0 {
            need.insert(*w, (m, c));
            matches += m;
        }
    }
    if matches == 0 {
        return (0, 0);
    }
    let mut aligner = Aligner { cand: candidate, reference, used_ref: vec![false; reference.len()], budget: 200_000, best: None };
    aligner.search(0, None, 0, &mut need);
    // The first leaf is reached after at most |cand| nodes, so `best` is set.
    (matches, aligner.best.unwrap_or(matches))
}

/// Exact-match METEOR of one pair, in [0, 100].
pub fn meteor<W: Eq + Hash>(candidate: &[W], reference: &[W]) -> f64 {
    let (m, chunks) = align(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    100.0 * f_mean * (1.0 - penalty)
}

pub fn meteor_corpus<W: Eq + Hash, C: AsRef<[W]>, R: AsRef<[W]>>(candidates: &[C], references: &[R]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Argument("METEOR needs equally many, non-zero candidates and references".into()));
    }
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| meteor(c.as_ref(), r.as_ref())).sum();
    Ok(sum / candidates.len() as f64)
}

pub const SELF_BLEU_EPSILON: f64 = 1e-9;

/// Sentence BLEU with several references and ε-smoothed zero precisions.
pub fn smoothed_sentence_bleu<W: Eq + Hash>(candidate: &[W], references: &[&[W]], max_n: usize) -> Result<f64> {
    bleu_core(&[candidate], &[references.to_vec()], max_n, Some(SELF_BLEU_EPSILON))
}

/// Mean BLEU of every text against all the others, scaled to [0, 1].
pub fn self_bleu<S: AsRef<str>>(generated: &[S], max_n: usize) -> Result<f64> {
    if generated.len() < 2 {
        return Err(Error::Argument("Self-BLEU needs at least two texts".into()));
    }
    let toks: Vec<Vec<String>> = generated.iter().map(|t| normalize(t.as_ref())).collect();
    let mut sum = 0.0;
    for (i, cand) in toks.iter().enumerate() {
        let refs: Vec<&[String]> = toks.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t.as_slice()).collect();
        sum += smoothed_sentence_bleu(cand, &refs, max_n)?;
    }
    Ok(sum / toks.len() as f64 / 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_cases() {
        assert_eq!(bleu(&[w("sinus rhythm")], &[w("sinus rhythm")], 1).unwrap(), 100.0);
        assert!((bleu(&[w("sinus rhythm normal ecg")], &[w("sinus rhythm normal ecg")], 4).unwrap() - 100.0).abs() < 1e-9);
        // no 3-grams in the candidate: unsmoothed BLEU-4 is zero
        assert_eq!(bleu(&[w("sinus rhythm")], &[w("sinus rhythm")], 4).unwrap(), 0.0);
        let bp = bleu(&[w("sinus rhythm normal")], &[w("sinus rhythm normal ecg")], 1).unwrap();
        assert!((bp - 100.0 * (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-9);
        assert!((bp - 71.65).abs() < 0.01);
        assert_eq!(bleu(&[w("a b")], &[w("c d")], 1).unwrap(), 0.0);
        assert!(bleu::<&str, Vec<&str>, Vec<&str>>(&[], &[], 1).is_err());
    }

    #[test]
    fn bleu_is_corpus_level() {
        // pooled counts: 3 of 4 unigrams match, c = r = 4
        let score = bleu(&[w("a b"), w("c x")], &[w("a b"), w("c d")], 1).unwrap();
        assert!((score - 75.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&w("a b c d"), &w("a b c d")), 100.0);
        assert!((rouge_l(&w("a b c d"), &w("a c b d")) - 75.0).abs() < 1e-12);
        assert_eq!(rouge_l(&w("a b"), &w("c d")), 0.0);
        assert_eq!(rouge_l::<&str>(&[], &w("c d")), 0.0);
    }

    #[test]
    fn meteor_cases() {
        let same = meteor(&w("a b c"), &w("a b c"));
        assert!((same - 100.0 * (1.0 - 0.5 / 27.0)).abs() < 1e-9);
        assert!((meteor(&w("b a"), &w("a b")) - 50.0).abs() < 1e-12);
        assert_eq!(meteor(&w("x y"), &w("a b")), 0.0);
    }

    #[test]
    fn meteor_prefers_fewest_chunks() {
        // greedy left-to-right alignment of "a" would split into 3 chunks
        assert_eq!(align(&w("a b a"), &w("x a b")), (2, 1));
        assert_eq!(align(&w("the cat the dog"), &w("the dog the cat")), (4, 2));
    }

    #[test]
    fn self_bleu_cases() {
        assert!((self_bleu(&["sinus rhythm normal ecg"; 3], 4).unwrap() - 1.0).abs() < 1e-12);
        assert!((self_bleu(&["a b", "a b"], 4).unwrap() - 1.0).abs() < 1e-12);
        // only the ε floor remains
        assert!(self_bleu(&["a", "b", "c"], 1).unwrap() < 1e-6);
        assert!(self_bleu(&["a"], 4).is_err());
    }

    proptest! {
        #[test]
        fn scores_stay_in_range(c in proptest::collection::vec(0u8..5, 0..10), r in proptest::collection::vec(0u8..5, 1..10)) {
            let b = bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), 2).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
            prop_assert!((0.0..=100.0 + 1e-9).contains(&rouge_l(&c, &r)));
            prop_assert!((0.0..=100.0 + 1e-9).contains(&meteor(&c, &r)));
        }

        #[test]
        fn invariant_under_renaming(c in proptest::collection::vec(0u8..5, 1..10), r in proptest::collection::vec(0u8..5, 1..10)) {
            let rename = |v: &[u8]| v.iter().map(|x| (x * 3 + 7) % 11).collect::<Vec<u8>>();
            let (rc, rr) = (rename(&c), rename(&r));
            prop_assert_eq!(bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), 2).unwrap(), bleu(std::slice::from_ref(&rc), std::slice::from_ref(&rr), 2).unwrap());
            prop_assert_eq!(rouge_l(&c, &r), rouge_l(&rc, &rr));
        }

        #[test]
        fn bleu1_is_precision_times_brevity(c in proptest::collection::vec(0u8..6, 1..12), r in proptest::collection::vec(0u8..6, 1..12)) {
            let mut rc = [0usize; 6];
            r.iter().for_each(|&x| rc[x as usize] += 1);
            let mut cc = [0usize; 6];
            c.iter().for_each(|&x| cc[x as usize] += 1);
            let m: usize = (0..6).map(|i| cc[i].min(rc[i])).sum();
            let p = m as f64 / c.len() as f64;
            let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
            let got = bleu(&[c], &[r], 1).unwrap();
            prop_assert!((got - 100.0 * p * bp).abs() < 1e-9);
        }

        #[test]
        fn meteor_chunks_match_exhaustive_search(c in proptest::collection::vec(0u8..3, 1..7), r in proptest::collection::vec(0u8..3, 1..7)) {
            let (m, chunks) = align(&c, &r);
            prop_assert_eq!(m, brute_force(&c, &r).0);
            if m > 0 {
                prop_assert_eq!(chunks, brute_force(&c, &r).1);
            }
        }

        #[test]
        fn self_bleu_order_free(texts in proptest::collection::vec("[a-c]( [a-c]){1,5}", 2..6)) {
            let a = self_bleu(&texts, 4).unwrap();
            let mut rev = texts.clone();
            rev.reverse();
            prop_assert!((a - self_bleu(&rev, 4).unwrap()).abs() < 1e-12);
        }
    }

    /// Enumerates every partial injective alignment of equal tokens.
    fn brute_force(c: &[u8], r: &[u8]) -> (usize, usize) {
        fn rec(c: &[u8], r: &[u8], i: usize, used: &mut Vec<bool>, map: &mut Vec<Option<usize>>, best: &mut (usize, usize)) {
            if i == c.len() {
                let m = map.iter().flatten().count();
                let mut chunks = 0;
                for k in 0..map.len() {
                    if let Some(j) = map[k] {
                        if k == 0 || map[k - 1] != Some(j.wrapping_sub(1)) || j == 0 {
                            chunks += 1;
                        }
                    }
                }
                if m > best.0 || (m == best.0 && chunks < best.1) {
                    *best = (m, chunks);
                }
                return;
            }
            map.push(None);
            rec(c, r, i + 1, used, map, best);
            map.pop();
            for j in 0..r.len() {
                if !used[j] && r[j] == c[i] {
                    used[j] = true;
                    map.push(Some(j));
                    rec(c, r, i + 1, used, map, best);
                    map.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (0, usize::MAX);
        rec(c, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
        best
    }
}
