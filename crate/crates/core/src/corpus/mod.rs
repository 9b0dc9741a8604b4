//! Dataset model, patient-level splits and the synthetic corpus.

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use cardiocap_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Language;

pub use io::{index_dataset, load_dataset, write_dataset, DatasetIndex, FrameMeta};
pub use synth::{generate_synthetic_corpus, template_text, template_units, TEMPLATES};

pub const LEADS: usize = 12;
pub const SAMPLES: usize = 2500;
pub const NUM_CLASSES: usize = 5;

/// One 12-lead signal segment of fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalFrame<T> {
    pub id: String,
    pub patient_id: String,
    /// `[LEADS, SAMPLES]`, row-major.
    pub leads: Tensor<T>,
    pub label: usize,
    pub frame_index: usize,
}

impl<T: Scalar> SignalFrame<T> {
    pub fn validate(&self) -> Result<()> {
        if self.leads.shape() != [LEADS, SAMPLES] {
            return Err(Error::Shape { what: format!("frame {}", self.id), expected: vec![LEADS, SAMPLES], found: self.leads.shape().to_vec() });
        }
        if self.label >= NUM_CLASSES {
            return Err(Error::Argument(format!("frame {} has label {} outside [0, {NUM_CLASSES})", self.id, self.label)));
        }
        Ok(())
    }
}

/// The reports written for one frame, keyed by language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub patient_id: String,
    pub frame: String,
    pub texts: BTreeMap<Language, String>,
}

impl ReportRecord {
    pub fn languages(&self) -> Vec<Language> {
        self.texts.keys().copied().collect()
    }

    pub fn text(&self, lang: Language) -> Option<&str> {
        self.texts.get(&lang).map(String::as_str)
    }
}

/// Frames and their reports; `records[i]` describes `frames[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub languages: Vec<Language>,
    pub frames: Vec<SignalFrame<T>>,
    pub records: Vec<ReportRecord>,
}

impl<T: Scalar> Dataset<T> {
    /// Checks every frame and record against the dataset invariants.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.records.len() {
            return Err(Error::Argument(format!("{} frames but {} records", self.frames.len(), self.records.len())));
        }
        for (i, (f, r)) in self.frames.iter().zip(&self.records).enumerate() {
            f.validate()?;
            if r.frame != f.id || r.patient_id != f.patient_id {
                return Err(Error::Schema { index: i, msg: format!("record refers to {}/{} but frame is {}/{}", r.patient_id, r.frame, f.patient_id, f.id) });
            }
            validate_texts(i, r, &self.languages)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Distinct patient ids in sorted order.
    pub fn patients(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.frames.iter().map(|f| f.patient_id.as_str()).collect();
        set.into_iter().collect()
    }

    /// The frames (and records) whose patient is in `patients`, order kept.
    pub fn subset(&self, patients: &[String]) -> Dataset<T> {
        let keep: BTreeSet<&str> = patients.iter().map(String::as_str).collect();
        let (frames, records) = self
            .frames
            .iter()
            .zip(&self.records)
            .filter(|(f, _)| keep.contains(f.patient_id.as_str()))
            .map(|(f, r)| (f.clone(), r.clone()))
            .unzip();
        Dataset { languages: self.languages.clone(), frames, records }
    }

    pub fn split(&self, manifest: &SplitManifest, split: Split) -> Dataset<T> {
        self.subset(manifest.patients(split))
    }

    /// Restricts every record to `langs`, which must be a subset of the
    /// dataset's languages.
    pub fn with_languages(&self, langs: &[Language]) -> Result<Dataset<T>> {
        if let Some(l) = langs.iter().find(|l| !self.languages.contains(l)) {
            return Err(Error::Config(format!("language {l} is not in the dataset")));
        }
        let records = self
            .records
            .iter()
            .map(|r| ReportRecord { texts: r.texts.iter().filter(|(l, _)| langs.contains(l)).map(|(l, t)| (*l, t.clone())).collect(), ..r.clone() })
            .collect();
        Ok(Dataset { languages: langs.to_vec(), frames: self.frames.clone(), records })
    }

    /// Texts of one language in frame order.
    pub fn texts(&self, lang: Language) -> Vec<&str> {
        self.records.iter().filter_map(|r| r.text(lang)).collect()
    }
}

pub(crate) fn validate_texts(index: usize, r: &ReportRecord, languages: &[Language]) -> Result<()> {
    for l in languages {
        match r.texts.get(l) {
            Some(t) if !t.trim().is_empty() => {}
            Some(_) => return Err(Error::Schema { index, msg: format!("empty {l} text") }),
            None => return Err(Error::Schema { index, msg: format!("missing {l} text") }),
        }
    }
    if r.texts.len() != languages.len() {
        return Err(Error::Schema { index, msg: format!("languages {:?} differ from dataset languages {languages:?}", r.languages()) });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Argument(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn patients(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, patient: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.patients(s).iter().any(|p| p == patient))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        let mut seen = BTreeSet::new();
        for p in m.train.iter().chain(&m.val).chain(&m.test) {
            if !seen.insert(p) {
                return Err(Error::format(path, format!("patient {p} appears in more than one split")));
            }
        }
        Ok(m)
    }
}

/// Shuffles the (sorted, de-duplicated) patient ids with a seeded RNG and
/// cuts them into train/val/test by rounding each fraction's share.
pub fn split_patients<S: AsRef<str>>(patients: &[S], fractions: (f64, f64, f64), seed: u64) -> Result<SplitManifest> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Argument(format!("split fractions must be non-negative, got {fractions:?}")));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split fractions must sum to 1, got {}", a + b + c)));
    }
    let set: BTreeSet<&str> = patients.iter().map(AsRef::as_ref).collect();
    let mut ids: Vec<String> = set.into_iter().map(str::to_owned).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(SplitManifest { train: ids, val, test, seed })
}

pub fn make_splits<T: Scalar>(dataset: &Dataset<T>, fractions: (f64, f64, f64), seed: u64) -> Result<SplitManifest> {
    split_patients(&dataset.patients(), fractions, seed)
}

/// Global mean and standard deviation over every sample of a set of frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit<T: Scalar>(frames: &[SignalFrame<T>]) -> Result<Self> {
        let n = frames.len() * LEADS * SAMPLES;
        if n == 0 {
            return Err(Error::Argument("cannot fit standardisation on an empty split".into()));
        }
        let all = || frames.iter().flat_map(|f| f.leads.data().iter().map(|x| x.as_f64()));
        let mean = all().sum::<f64>() / n as f64;
        let var = all().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        if !(var > 0.0) {
            return Err(Error::Numeric("signal variance is zero".into()));
        }
        Ok(Standardizer { mean, std: var.sqrt() })
    }

    pub fn apply<T: Scalar>(&self, dataset: &mut Dataset<T>) {
        for f in &mut dataset.frames {
            for x in f.leads.data_mut() {
                *x = T::of((x.as_f64() - self.mean) / self.std);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_patients_split_8_1_1_deterministically() {
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let a = split_patients(&ids, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 1, 1));
        assert_eq!(a, split_patients(&ids, (0.8, 0.1, 0.1), 7).unwrap());
        assert!(split_patients(&ids, (1.2, -0.1, -0.1), 7).is_err());
        assert!(split_patients(&ids, (0.5, 0.1, 0.1), 7).is_err());
    }

    #[test]
    fn table_sized_patient_counts() {
        let (tr, va, te) = (11_335usize, 1_642usize, 1_152usize);
        let n = tr + va + te;
        let ids: Vec<String> = (0..n).map(|i| format!("{i:05}")).collect();
        let f = |k: usize| k as f64 / n as f64;
        let m = split_patients(&ids, (f(tr), f(va), f(te)), 0).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (tr, va, te));
    }

    #[test]
    fn standardised_corpus_is_unit_gaussian() {
        let mut d = generate_synthetic_corpus::<f32>(12, &[Language::En], 3).unwrap();
        let s = Standardizer::fit(&d.frames).unwrap();
        s.apply(&mut d);
        let after = Standardizer::fit(&d.frames).unwrap();
        assert!(after.mean.abs() < 0.05 && (after.std - 1.0).abs() < 0.05, "{after:?}");
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_patient_level(
            frames_per_patient in proptest::collection::vec(1usize..4, 1..40),
            seed in 0u64..1000,
            a in 0.0f64..1.0,
        ) {
            let b = (1.0 - a) / 2.0;
            let frame_patients: Vec<String> = frames_per_patient
                .iter()
                .enumerate()
                .flat_map(|(p, &k)| std::iter::repeat_n(format!("p{p}"), k))
                .collect();
            let m = split_patients(&frame_patients, (a, b, 1.0 - a - b), seed).unwrap();
            let all: BTreeSet<&String> = m.train.iter().chain(&m.val).chain(&m.test).collect();
            prop_assert_eq!(all.len(), m.train.len() + m.val.len() + m.test.len());
            prop_assert_eq!(all.len(), frames_per_patient.len());
            for p in &frame_patients {
                prop_assert!(m.split_of(p).is_some());
            }
        }
    }
}
