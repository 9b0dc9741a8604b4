//! Report translation through a pluggable provider, with re-translation of
//! records whose output is not detected as the target language.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{template_units, ReportRecord};
use crate::error::{Error, Result};
use crate::lang::Language;
use crate::tokenize::normalize;

/// Share of records per target language that must detect correctly.
pub const PASS_THRESHOLD: f64 = 0.9;
/// Attempts per provider call before giving up.
pub const MAX_ATTEMPTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `None` when nothing could be recognised.
    pub language: Option<Language>,
    pub confidence: f64,
}

impl Detection {
    pub const UNKNOWN: Detection = Detection { language: None, confidence: 0.0 };
}

pub trait TranslationProvider {
    fn translate(&mut self, text: &str, source: Option<Language>, target: Language) -> Result<String>;
    fn detect(&mut self, text: &str) -> Result<Detection>;
}

const STOP_WORDS: [&[&str]; 7] = [
    &["der", "die", "das", "und", "ist", "nicht", "mit", "in", "im", "durch", "kann", "sein", "ein", "eine", "bei", "von", "zu", "wahrscheinlich"],
    &[],
    &["the", "and", "is", "are", "of", "in", "with", "this", "may", "be", "to", "due", "a", "an", "probably", "no"],
    &["el", "la", "los", "las", "de", "del", "y", "es", "en", "con", "que", "esto", "puede", "están", "un", "una", "probablemente"],
    &["le", "la", "les", "de", "du", "des", "et", "est", "en", "avec", "une", "un", "cela", "peut", "être", "sont", "à", "probablement"],
    &["il", "lo", "la", "i", "le", "di", "del", "della", "e", "è", "in", "con", "questo", "può", "essere", "sono", "a", "probabilmente"],
    &["o", "a", "os", "as", "de", "do", "da", "e", "é", "em", "com", "isso", "pode", "ser", "são", "estão", "à", "provavelmente"],
];

fn is_greek(c: char) -> bool {
    matches!(c, '\u{0370}'..='\u{03FF}' | '\u{1F00}'..='\u{1FFF}')
}

/// Word profile of a Latin-script language: function words plus the
/// clinical vocabulary of the synthetic report phrases.
fn profile(lang: Language) -> BTreeSet<String> {
    let mut words: BTreeSet<String> = STOP_WORDS[lang.index()].iter().map(|w| w.to_string()).collect();
    words.extend(template_units(lang).iter().flat_map(|u| normalize(u)));
    words
}

/// Script check for Greek, then the share of tokens found in each
/// language's word profile. Confidence is the margin between the best and
/// second-best profile.
pub fn detect_language_heuristic(text: &str) -> Detection {
    let letters: Vec<char> = text.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.is_empty() {
        return Detection::UNKNOWN;
    }
    let greek = letters.iter().filter(|&&c| is_greek(c)).count() as f64 / letters.len() as f64;
    if greek > 0.5 {
        return Detection { language: Some(Language::El), confidence: greek };
    }
    let tokens = normalize(text);
    let mut scores: Vec<(f64, Language)> = Language::ALL
        .iter()
        .filter(|&&l| l != Language::El)
        .map(|&l| {
            let p = profile(l);
            (tokens.iter().filter(|t| p.contains(t.as_str())).count() as f64 / tokens.len() as f64, l)
        })
        .collect();
    scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (best, lang) = scores[0];
    if best == 0.0 {
        return Detection::UNKNOWN;
    }
    Detection { language: Some(lang), confidence: (best - scores[1].0).clamp(0.0, 1.0) }
}

/// Splits a report into lower-cased sentences without the final period.
fn sentences(text: &str) -> Vec<String> {
    text.split_terminator(". ")
        .map(|s| s.trim().trim_end_matches('.').trim().to_lowercase())
        .filter(|s| !s.is_empty())
        .collect()
}

fn capitalise(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => format!("{}{}.", c.to_uppercase(), chars.as_str()),
        None => String::new(),
    }
}

/// Exact phrase-table translation. Row `i` of every language holds the same
/// statement; sentences missing from the source table pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryProvider {
    pub phrases: BTreeMap<Language, Vec<String>>,
}

impl DictionaryProvider {
    /// The phrase tables of the synthetic corpus.
    pub fn synthetic() -> Self {
        DictionaryProvider { phrases: Language::ALL.iter().map(|&l| (l, template_units(l).iter().map(|s| s.to_string()).collect())).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: DictionaryProvider = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let lens: BTreeSet<usize> = d.phrases.values().map(Vec::len).collect();
        if lens.len() > 1 {
            return Err(Error::format(path, "phrase tables differ in length"));
        }
        Ok(d)
    }
}

impl TranslationProvider for DictionaryProvider {
    fn translate(&mut self, text: &str, source: Option<Language>, target: Language) -> Result<String> {
        let source = match source {
            Some(l) => l,
            None => match detect_language_heuristic(text).language {
                Some(l) => l,
                None => return Ok(text.to_string()),
            },
        };
        let (Some(from), Some(to)) = (self.phrases.get(&source), self.phrases.get(&target)) else {
            return Err(Error::Config(format!("dictionary cannot translate {source} to {target}")));
        };
        let out: Vec<String> = sentences(text)
            .iter()
            .map(|s| match from.iter().position(|p| p == s) {
                Some(i) => capitalise(&to[i]),
                None => capitalise(s),
            })
            .collect();
        Ok(out.join(" "))
    }

    fn detect(&mut self, text: &str) -> Result<Detection> {
        Ok(detect_language_heuristic(text))
    }
}

/// Returns its input and always reports one fixed language.
#[derive(Clone, Copy, Debug)]
pub struct IdentityProvider {
    pub language: Language,
}

impl TranslationProvider for IdentityProvider {
    fn translate(&mut self, text: &str, _source: Option<Language>, _target: Language) -> Result<String> {
        Ok(text.to_string())
    }

    fn detect(&mut self, text: &str) -> Result<Detection> {
        Ok(if text.trim().is_empty() { Detection::UNKNOWN } else { Detection { language: Some(self.language), confidence: 1.0 } })
    }
}

/// Wraps a provider and, with probability `1 - success`, returns the input
/// untranslated.
#[derive(Clone, Debug)]
pub struct FlakyProvider<P> {
    pub inner: P,
    pub success: f64,
    rng: ChaCha8Rng,
}

impl<P> FlakyProvider<P> {
    pub fn new(inner: P, success: f64, seed: u64) -> Self {
        FlakyProvider { inner, success, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl<P: TranslationProvider> TranslationProvider for FlakyProvider<P> {
    fn translate(&mut self, text: &str, source: Option<Language>, target: Language) -> Result<String> {
        if self.rng.random::<f64>() < self.success {
            self.inner.translate(text, source, target)
        } else {
            Ok(text.to_string())
        }
    }

    fn detect(&mut self, text: &str) -> Result<Detection> {
        self.inner.detect(text)
    }
}

fn with_retry<R>(mut call: impl FnMut() -> Result<R>) -> Result<R> {
    let mut last = String::new();
    for _ in 0..MAX_ATTEMPTS {
        match call() {
            Ok(r) => return Ok(r),
            Err(Error::Transport { msg, .. }) => last = msg,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Transport { attempts: MAX_ATTEMPTS, msg: last })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Pass rate of each target language after every iteration.
    pub pass_rates: BTreeMap<Language, Vec<f64>>,
    pub iterations: usize,
    /// Records still failing detection per language after the last iteration.
    pub failed: BTreeMap<Language, Vec<String>>,
    pub criterion_met: bool,
}

impl PipelineReport {
    pub fn final_pass_rate(&self, lang: Language) -> Option<f64> {
        self.pass_rates.get(&lang).and_then(|h| h.last().copied())
    }
}

/// Detects each record's source language, translates it into every target
/// and re-translates, from the original, records whose output is not
/// detected as the target until each language passes or `max_iters` runs
/// out. Input records are left untouched.
pub fn translate_corpus(
    records: &[ReportRecord],
    source_default: Language,
    targets: &[Language],
    provider: &mut dyn TranslationProvider,
    max_iters: usize,
) -> Result<(Vec<ReportRecord>, PipelineReport)> {
    if max_iters == 0 {
        return Err(Error::Argument("max_iters must be at least 1".into()));
    }
    if records.is_empty() {
        return Err(Error::Argument("no records to translate".into()));
    }
    let originals: Vec<&str> = records
        .iter()
        .enumerate()
        .map(|(i, r)| r.text(source_default).ok_or_else(|| Error::Schema { index: i, msg: format!("missing {source_default} source text") }))
        .collect::<Result<_>>()?;
    let mut sources = Vec::with_capacity(records.len());
    for text in &originals {
        let d = with_retry(|| provider.detect(text))?;
        sources.push(d.language.unwrap_or(source_default));
    }
    let mut out: Vec<BTreeMap<Language, String>> = originals.iter().map(|t| BTreeMap::from([(source_default, t.to_string())])).collect();
    let mut pending: BTreeMap<Language, Vec<usize>> = targets.iter().map(|&l| (l, (0..records.len()).collect())).collect();
    let mut report = PipelineReport { pass_rates: targets.iter().map(|&l| (l, Vec::new())).collect(), iterations: 0, failed: BTreeMap::new(), criterion_met: false };
    let mut active: BTreeSet<Language> = targets.iter().copied().collect();
    while report.iterations < max_iters && !active.is_empty() {
        report.iterations += 1;
        for &l in targets {
            if active.contains(&l) {
                for &i in &pending[&l] {
                    let text = if sources[i] == l { originals[i].to_string() } else { with_retry(|| provider.translate(originals[i], Some(sources[i]), l))? };
                    out[i].insert(l, text);
                }
            }
            let mut failing = Vec::new();
            for (i, texts) in out.iter().enumerate() {
                if with_retry(|| provider.detect(&texts[&l]))?.language != Some(l) {
                    failing.push(i);
                }
            }
            let rate = 1.0 - failing.len() as f64 / records.len() as f64;
            report.pass_rates.get_mut(&l).expect("target listed").push(rate);
            if rate >= PASS_THRESHOLD {
                active.remove(&l);
            }
            pending.insert(l, failing);
        }
    }
    report.criterion_met = active.is_empty();
    report.failed = pending.into_iter().filter(|(_, f)| !f.is_empty()).map(|(l, f)| (l, f.iter().map(|&i| records[i].frame.clone()).collect())).collect();
    let translated = records.iter().zip(out).map(|(r, texts)| ReportRecord { patient_id: r.patient_id.clone(), frame: r.frame.clone(), texts }).collect();
    Ok((translated, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{template_text, TEMPLATES};

    fn english_records(n: usize) -> Vec<ReportRecord> {
        (0..n)
            .map(|i| ReportRecord { patient_id: format!("p{i}"), frame: format!("p{i}_0"), texts: BTreeMap::from([(Language::En, template_text(i % TEMPLATES.len(), Language::En))]) })
            .collect()
    }

    #[test]
    fn heuristic_cases() {
        assert_eq!(detect_language_heuristic("φλεβοκομβικό ρυθμό"), Detection { language: Some(Language::El), confidence: 1.0 });
        assert_eq!(detect_language_heuristic(""), Detection::UNKNOWN);
        // pt hits all four tokens, es misses "os"
        let d = detect_language_heuristic("ritmo sinusal os segmentos");
        assert_eq!(d.language, Some(Language::Pt));
        assert!((d.confidence - 0.25).abs() < 1e-12);
    }

    #[test]
    fn every_template_detects_as_its_language() {
        for l in Language::ALL {
            for c in 0..TEMPLATES.len() {
                let d = detect_language_heuristic(&template_text(c, l));
                assert_eq!(d.language, Some(l), "class {c} in {l}");
                assert!((0.0..=1.0).contains(&d.confidence));
            }
        }
    }

    #[test]
    fn dictionary_translation_is_exact() {
        let mut p = DictionaryProvider::synthetic();
        for c in 0..TEMPLATES.len() {
            let en = template_text(c, Language::En);
            for l in Language::ALL {
                assert_eq!(p.translate(&en, Some(Language::En), l).unwrap(), template_text(c, l));
                assert_eq!(p.translate(&en, None, l).unwrap(), template_text(c, l));
            }
        }
    }

    #[test]
    fn identity_provider_passes_in_one_iteration() {
        let recs = english_records(20);
        let (out, report) = translate_corpus(&recs, Language::En, &[Language::En], &mut IdentityProvider { language: Language::En }, 5).unwrap();
        assert_eq!(report.iterations, 1);
        assert_eq!(report.final_pass_rate(Language::En), Some(1.0));
        assert_eq!(out, recs);
    }

    #[test]
    fn dictionary_passes_in_one_iteration() {
        let recs = english_records(30);
        let targets = [Language::De, Language::El, Language::Fr];
        let (out, report) = translate_corpus(&recs, Language::En, &targets, &mut DictionaryProvider::synthetic(), 5).unwrap();
        assert_eq!(report.iterations, 1);
        assert!(report.criterion_met && report.failed.is_empty());
        assert_eq!(out[3].text(Language::Fr).unwrap(), template_text(3, Language::Fr));
        assert_eq!(recs, english_records(30));
    }

    #[test]
    fn stuck_provider_stops_at_max_iters() {
        let recs = english_records(10);
        let mut p = FlakyProvider::new(DictionaryProvider::synthetic(), 0.0, 1);
        let (_, report) = translate_corpus(&recs, Language::En, &[Language::Es], &mut p, 3).unwrap();
        assert_eq!(report.iterations, 3);
        assert!(!report.criterion_met);
        assert_eq!(report.pass_rates[&Language::Es], [0.0, 0.0, 0.0]);
        assert_eq!(report.failed[&Language::Es].len(), 10);
    }

    struct Broken;

    impl TranslationProvider for Broken {
        fn translate(&mut self, _: &str, _: Option<Language>, _: Language) -> Result<String> {
            Err(Error::Transport { attempts: 1, msg: "connection refused".into() })
        }
        fn detect(&mut self, text: &str) -> Result<Detection> {
            Ok(detect_language_heuristic(text))
        }
    }

    #[test]
    fn transport_errors_report_attempts() {
        let err = translate_corpus(&english_records(2), Language::En, &[Language::It], &mut Broken, 2).unwrap_err();
        assert!(matches!(err, Error::Transport { attempts: MAX_ATTEMPTS, .. }));
    }
}
