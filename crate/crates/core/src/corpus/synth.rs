//! Desk-scale synthetic corpus: class-dependent 12-lead sinusoids and
//! parallel template reports in up to seven languages.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use cardiocap_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, ReportRecord, SignalFrame, LEADS, NUM_CLASSES, SAMPLES};
use crate::error::{Error, Result};
use crate::lang::Language;

const SAMPLE_RATE: f64 = 500.0;
const NOISE_STD: f64 = 0.3;
const CLASS_OFFSET: f64 = 0.6;

/// Report phrases; index `u` means the same statement in every language.
const UNITS: [[&str; 10]; 7] = [
    // de
    [
        "sinusrhythmus",
        "normales ekg",
        "vorderwandinfarkt",
        "wahrscheinlich alt",
        "st senkungen in i avl v5,6",
        "t-negativierungen",
        "dies kann durch ischämie bedingt sein",
        "linksschenkelblock",
        "linksventrikuläre hypertrophie",
        "mit erregungsrückbildungsstörung",
    ],
    // el
    [
        "φλεβοκομβικός ρυθμός",
        "φυσιολογικό ηκγ",
        "πρόσθιο έμφραγμα του μυοκαρδίου",
        "πιθανώς παλαιό",
        "τα τμήματα st είναι κατεσπασμένα στις i avl v5,6",
        "τα κύματα t είναι ανεστραμμένα",
        "αυτό μπορεί να οφείλεται σε ισχαιμία",
        "αποκλεισμός αριστερού σκέλους",
        "υπερτροφία αριστερής κοιλίας",
        "με διαταραχή επαναπόλωσης",
    ],
    // en
    [
        "sinus rhythm",
        "normal ecg",
        "anterior myocardial infarction",
        "probably old",
        "st segments are depressed in i avl v5,6",
        "t waves are inverted",
        "this may be due to ischemia",
        "left bundle branch block",
        "left ventricular hypertrophy",
        "with repolarization abnormality",
    ],
    // es
    [
        "ritmo sinusal",
        "electrocardiograma normal",
        "infarto de miocardio anterior",
        "probablemente antiguo",
        "los segmentos st están deprimidos en i avl v5,6",
        "las ondas t están invertidas",
        "esto puede deberse a isquemia",
        "bloqueo de rama izquierda",
        "hipertrofia ventricular izquierda",
        "con alteración de la repolarización",
    ],
    // fr
    [
        "rythme sinusal",
        "électrocardiogramme normal",
        "infarctus du myocarde antérieur",
        "probablement ancien",
        "les segments st sont sous-décalés en i avl v5,6",
        "les ondes t sont inversées",
        "cela peut être dû à une ischémie",
        "bloc de branche gauche",
        "hypertrophie ventriculaire gauche",
        "avec trouble de la repolarisation",
    ],
    // it
    [
        "ritmo sinusale",
        "elettrocardiogramma normale",
        "infarto miocardico anteriore",
        "probabilmente vecchio",
        "i segmenti st sono depressi in i avl v5,6",
        "le onde t sono invertite",
        "questo può essere dovuto a ischemia",
        "blocco di branca sinistra",
        "ipertrofia ventricolare sinistra",
        "con alterazione della ripolarizzazione",
    ],
    // pt
    [
        "ritmo sinusal",
        "eletrocardiograma normal",
        "infarto do miocárdio anterior",
        "provavelmente antigo",
        "os segmentos st estão deprimidos em i avl v5,6",
        "as ondas t são invertidas",
        "isso pode ser devido à isquemia",
        "bloqueio de ramo esquerdo",
        "hipertrofia ventricular esquerda",
        "com alteração da repolarização",
    ],
];

/// Units making up the report of each class.
pub const TEMPLATES: [&[usize]; NUM_CLASSES] = [&[0, 1], &[0, 2, 3], &[0, 4, 5, 6], &[0, 7], &[0, 8, 9]];

pub fn template_units(lang: Language) -> &'static [&'static str; 10] {
    &UNITS[lang.index()]
}

fn sentence(unit: &str) -> String {
    let mut chars = unit.chars();
    let first = chars.next().map(|c| c.to_uppercase().collect::<String>()).unwrap_or_default();
    format!("{first}{}.", chars.as_str())
}

/// The report for `class` in `lang`, one capitalised sentence per unit.
pub fn template_text(class: usize, lang: Language) -> String {
    TEMPLATES[class].iter().map(|&u| sentence(UNITS[lang.index()][u])).collect::<Vec<_>>().join(" ")
}

fn synth_leads(class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f64> {
    let freq = rng.random_range(1.0..1.6);
    let phase = rng.random_range(0.0..TAU);
    let mut out = Vec::with_capacity(LEADS * SAMPLES);
    for lead in 0..LEADS {
        let amp = 0.5 + 0.05 * lead as f64;
        let offset = if lead % NUM_CLASSES == class { CLASS_OFFSET } else { 0.0 };
        for t in 0..SAMPLES {
            let wave = amp * (TAU * freq * t as f64 / SAMPLE_RATE + phase + 0.3 * lead as f64).sin();
            out.push(wave + offset + noise.sample(rng));
        }
    }
    out
}

/// Generates `n_patients` patients with one or two frames each. Classes are
/// dealt round-robin and shuffled, so class counts differ by at most one.
pub fn generate_synthetic_corpus<T: Scalar>(n_patients: usize, languages: &[Language], grammar_seed: u64) -> Result<Dataset<T>> {
    if n_patients == 0 {
        return Err(Error::Argument("n_patients must be at least 1".into()));
    }
    if languages.is_empty() {
        return Err(Error::Argument("at least one language is required".into()));
    }
    let mut langs = languages.to_vec();
    langs.sort();
    langs.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(grammar_seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let mut classes: Vec<usize> = (0..n_patients).map(|i| i % NUM_CLASSES).collect();
    classes.shuffle(&mut rng);
    let mut frames = Vec::new();
    let mut records = Vec::new();
    for (p, &class) in classes.iter().enumerate() {
        let patient_id = format!("p{p:05}");
        let n_frames = rng.random_range(1..=2);
        for k in 0..n_frames {
            let id = format!("{patient_id}_{k}");
            let data = synth_leads(class, &mut rng, &noise).into_iter().map(T::of).collect();
            frames.push(SignalFrame { id: id.clone(), patient_id: patient_id.clone(), leads: Tensor::new(vec![LEADS, SAMPLES], data)?, label: class, frame_index: k });
            let texts: BTreeMap<Language, String> = langs.iter().map(|&l| (l, template_text(class, l))).collect();
            records.push(ReportRecord { patient_id: patient_id.clone(), frame: id, texts });
        }
    }
    Ok(Dataset { languages: langs, frames, records })
}
