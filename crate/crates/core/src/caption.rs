//! Captioning fine-tuning, greedy generation and per-language evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use cardiocap_tensor::{Adam, AdamConfig, Graph, Reduction, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ReportRecord, SignalFrame};
use crate::decoder::{Decoder, Head, Memory, TokenBatch};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::lang::Language;
use crate::metrics::{bleu, meteor_corpus, rouge_l_corpus};
use crate::tokenize::{normalize, TokenSequence, Vocabulary, END, MASK, PAD, START};
use crate::train::{check_loss, EarlyStopping, TrainConfig, Verdict};

/// Which languages a fine-tuning run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Multilingual,
    Monolingual(Language),
}

impl Mode {
    pub fn languages(self, available: &[Language]) -> Result<Vec<Language>> {
        match self {
            Mode::Multilingual => Ok(available.to_vec()),
            Mode::Monolingual(l) if available.contains(&l) => Ok(vec![l]),
            Mode::Monolingual(l) => Err(Error::Config(format!("model has no {l} head"))),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "multi" => Ok(Mode::Multilingual),
            Some(("mono", l)) => Ok(Mode::Monolingual(l.parse()?)),
            _ => Err(Error::Argument(format!("mode must be multi or mono:<lang>, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Multilingual => f.write_str("multi"),
            Mode::Monolingual(l) => write!(f, "mono:{l}"),
        }
    }
}

/// A frozen encoder feeding a multilingual decoder.
#[derive(Clone, Debug)]
pub struct CaptioningModel<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub vocabs: BTreeMap<Language, Vocabulary>,
}

impl<T: Scalar> CaptioningModel<T> {
    pub fn new(mut encoder: Encoder<T>, decoder: Decoder<T>, vocabs: BTreeMap<Language, Vocabulary>) -> Result<Self> {
        if encoder.cfg.feature_dim != decoder.cfg.width {
            return Err(Error::Config(format!("encoder features ({}) must match decoder width ({})", encoder.cfg.feature_dim, decoder.cfg.width)));
        }
        let langs: Vec<Language> = vocabs.keys().copied().collect();
        if langs != decoder.languages {
            return Err(Error::Config(format!("vocabularies {langs:?} do not match decoder heads {:?}", decoder.languages)));
        }
        for (l, v) in &vocabs {
            if decoder.vocab_size(*l)? != v.len() {
                return Err(Error::Config(format!("{l} vocabulary has {} tokens but the decoder has {}", v.len(), decoder.vocab_size(*l)?)));
            }
        }
        encoder.set_frozen(true);
        Ok(CaptioningModel { encoder, decoder, vocabs })
    }

    pub fn languages(&self) -> &[Language] {
        &self.decoder.languages
    }

    fn vocab(&self, lang: Language) -> Result<&Vocabulary> {
        self.vocabs.get(&lang).ok_or_else(|| Error::Argument(format!("model has no {lang} vocabulary")))
    }
}

/// Cached encoder features plus tokenised references for a set of frames.
#[derive(Clone, Debug)]
pub struct CaptionSet<T> {
    pub frame_ids: Vec<String>,
    /// `[L, M]` per frame.
    pub features: Vec<Tensor<T>>,
    pub references: BTreeMap<Language, Vec<String>>,
    pub targets: BTreeMap<Language, Vec<TokenSequence>>,
}

impl<T: Scalar> CaptionSet<T> {
    /// Runs the encoder once over `data` and encodes every report of the
    /// model's languages to `max_len`.
    pub fn prepare(model: &CaptioningModel<T>, data: &Dataset<T>, max_len: usize) -> Result<Self> {
        let frames: Vec<&SignalFrame<T>> = data.frames.iter().collect();
        let features = model.encoder.encode_features(&frames)?;
        let mut references = BTreeMap::new();
        let mut targets = BTreeMap::new();
        for &l in model.languages() {
            if !data.languages.contains(&l) {
                return Err(Error::Config(format!("dataset has no {l} reports")));
            }
            let texts: Vec<String> = data.texts(l).into_iter().map(str::to_owned).collect();
            let v = model.vocab(l)?;
            targets.insert(l, texts.iter().map(|t| v.encode(t, max_len)).collect::<Result<Vec<_>>>()?);
            references.insert(l, texts);
        }
        Ok(CaptionSet { frame_ids: data.frames.iter().map(|f| f.id.clone()).collect(), features, references, targets })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Tokens in the longest report of `data` plus `[START]` and `[END]`.
pub fn default_max_len<T>(data: &Dataset<T>) -> usize {
    records_max_len(&data.records)
}

pub fn records_max_len(records: &[ReportRecord]) -> usize {
    records.iter().flat_map(|r| r.texts.values()).map(|t| normalize(t).len()).max().unwrap_or(0) + 2
}

fn stack_features<T: Scalar>(g: &mut Graph<T>, features: &[&Tensor<T>]) -> Result<(Var, usize)> {
    let first = features.first().ok_or_else(|| Error::Batching("empty caption batch".into()))?;
    let (l, m) = (first.shape()[0], first.shape()[1]);
    let mut data = Vec::with_capacity(features.len() * l * m);
    for f in features {
        data.extend_from_slice(f.data());
    }
    Ok((g.input(Tensor::new(vec![features.len() * l, m], data)?), l))
}

/// Teacher-forced cross-entropy of one language batch, averaged over the
/// non-padding target positions.
pub fn language_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &CaptioningModel<T>,
    set: &CaptionSet<T>,
    lang: Language,
    indices: &[usize],
    rng: &mut R,
) -> Result<Var> {
    let seqs = set.targets.get(&lang).ok_or_else(|| Error::Config(format!("no {lang} targets")))?;
    let s = indices.iter().map(|&i| seqs[i].true_length).max().ok_or_else(|| Error::Batching("empty caption batch".into()))?;
    let mut inputs = Vec::with_capacity(indices.len() * (s - 1));
    let mut targets = Vec::with_capacity(indices.len() * (s - 1));
    for &i in indices {
        inputs.extend_from_slice(&seqs[i].ids[..s - 1]);
        targets.extend_from_slice(&seqs[i].ids[1..s]);
    }
    let tokens = TokenBatch::mixed(indices.len(), s - 1, inputs, vec![lang; indices.len() * (s - 1)])?;
    let feats: Vec<&Tensor<T>> = indices.iter().map(|&i| &set.features[i]).collect();
    let (memory, len) = stack_features(g, &feats)?;
    let d = &model.decoder;
    let trace = d.forward(g, &d.params, "dec", &tokens, Memory::Features { var: memory, len }, true, rng)?;
    let logits = d.project(g, &d.params, "dec", trace.hidden, Head::Language(lang))?;
    Ok(g.cross_entropy(logits, &targets, PAD, Reduction::Mean)?)
}

/// The multi-task loss: mean of the per-language losses over one batch per
/// language.
pub fn caption_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &CaptioningModel<T>,
    set: &CaptionSet<T>,
    batches: &[(Language, Vec<usize>)],
    rng: &mut R,
) -> Result<Var> {
    let sizes: Vec<usize> = batches.iter().map(|(_, b)| b.len()).collect();
    if batches.is_empty() || sizes.iter().any(|&n| n != sizes[0]) {
        return Err(Error::Batching(format!("language batches must be non-empty and equally sized, got {sizes:?}")));
    }
    let mut total: Option<Var> = None;
    for (lang, idx) in batches {
        let l = language_loss(g, model, set, *lang, idx, rng)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / batches.len() as f64)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub train: TrainConfig,
    /// Validate every this many optimiser steps instead of once per epoch.
    pub eval_every: Option<usize>,
    pub max_steps: Option<usize>,
    /// Stop as soon as validation BLEU-1 (0 to 100) reaches this value.
    pub target_bleu: Option<f64>,
    /// Generation budget for validation, in tokens including the markers.
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bleu1: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    pub model: CaptioningModel<T>,
    pub history: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_bleu1: f64,
    pub steps: usize,
}

/// Mean over `langs` of corpus BLEU-1 of greedy captions on `set`.
pub fn validation_bleu1<T: Scalar>(model: &CaptioningModel<T>, set: &CaptionSet<T>, langs: &[Language], max_len: usize) -> Result<f64> {
    let mut sum = 0.0;
    for &l in langs {
        let gen = generate_set(model, set, l, max_len)?;
        let cands: Vec<Vec<String>> = gen.iter().map(|r| normalize(&r.text)).collect();
        let refs: Vec<Vec<String>> = set.references[&l].iter().map(|t| normalize(t)).collect();
        sum += bleu(&cands, &refs, 1)?;
    }
    Ok(sum / langs.len() as f64)
}

/// Fine-tunes the decoder with the encoder frozen, keeping the parameters
/// with the best validation BLEU-1.
pub fn finetune<T: Scalar>(
    mut model: CaptioningModel<T>,
    train: &CaptionSet<T>,
    val: &CaptionSet<T>,
    mode: Mode,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome<T>> {
    let cfg = &opts.train;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("fine-tuning needs non-empty train and validation sets".into()));
    }
    let langs = mode.languages(model.languages())?;
    model.encoder.set_frozen(true);
    let snapshot = model.encoder.params.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopping::maximize(cfg.patience);
    let mut best = model.decoder.params.clone();
    let mut best_step = 0;
    let mut history = Vec::new();
    let (mut step, mut loss_sum, mut loss_n) = (0usize, 0.0, 0usize);
    let n = train.len();

    let mut evaluate = |model: &CaptioningModel<T>, step: usize, epoch: usize, loss_sum: &mut f64, loss_n: &mut usize, best: &mut _, best_step: &mut usize| -> Result<bool> {
        let score = validation_bleu1(model, val, &langs, opts.max_len)?;
        history.push(EvalRecord { step, epoch, train_loss: *loss_sum / (*loss_n).max(1) as f64, val_bleu1: score });
        (*loss_sum, *loss_n) = (0.0, 0);
        let verdict = stopper.observe(step, score);
        if verdict == Verdict::Improved {
            *best = model.decoder.params.clone();
            *best_step = step;
        }
        Ok(verdict == Verdict::Stop || opts.target_bleu.is_some_and(|t| score >= t))
    };

    'outer: for epoch in 0..cfg.max_epochs {
        let orders: Vec<(Language, Vec<usize>)> = langs
            .iter()
            .map(|&l| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                (l, o)
            })
            .collect();
        for start in (0..n).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(n);
            let batches: Vec<(Language, Vec<usize>)> = orders.iter().map(|(l, o)| (*l, o[start..end].to_vec())).collect();
            let mut g = Graph::new(true);
            let loss = caption_loss(&mut g, &model, train, &batches, &mut rng)?;
            loss_sum += check_loss("caption fine-tuning", g.data(loss)[0].as_f64())?;
            loss_n += 1;
            g.backward(loss)?;
            g.accumulate_into(&mut model.decoder.params)?;
            adam.step(&mut model.decoder.params)?;
            step += 1;
            if opts.eval_every.is_some_and(|k| step % k == 0) && evaluate(&model, step, epoch, &mut loss_sum, &mut loss_n, &mut best, &mut best_step)? {
                break 'outer;
            }
            if opts.max_steps.is_some_and(|m| step >= m) {
                if loss_n > 0 {
                    evaluate(&model, step, epoch, &mut loss_sum, &mut loss_n, &mut best, &mut best_step)?;
                }
                break 'outer;
            }
        }
        if opts.eval_every.is_none() && evaluate(&model, step, epoch, &mut loss_sum, &mut loss_n, &mut best, &mut best_step)? {
            break;
        }
    }
    let best_bleu1 = stopper.best().unwrap_or(0.0);
    if snapshot.iter().any(|(name, p)| model.encoder.params.tensor(name).map(|t| t.data() != p.value.data()).unwrap_or(true)) {
        return Err(Error::Invariant("encoder parameters changed during fine-tuning".into()));
    }
    model.decoder.params = best;
    Ok(FinetuneOutcome { model, history, best_step, best_bleu1, steps: step })
}

/// A greedily decoded caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub language: Language,
    /// `[START]`, the generated tokens and `[END]` if it was produced.
    pub ids: Vec<usize>,
    pub text: String,
    /// Model probability of each chosen token.
    pub step_probs: Vec<f64>,
}

fn allowed(id: usize) -> bool {
    !matches!(id, PAD | START | MASK)
}

/// Greedy decoding for a batch of frames' features. At most `max_len - 2`
/// tokens are produced before `[END]`.
pub fn generate_batch<T: Scalar>(model: &CaptioningModel<T>, features: &[&Tensor<T>], lang: Language, max_len: usize) -> Result<Vec<GenerationResult>> {
    if max_len < 2 {
        return Err(Error::Argument(format!("max_len {max_len} leaves no room for [START] and [END]")));
    }
    let vocab = model.vocab(lang)?;
    model.decoder.language_index(lang).map_err(|_| Error::Argument(format!("model has no {lang} head")))?;
    let b = features.len();
    let mut ids: Vec<Vec<usize>> = vec![vec![START]; b];
    let mut probs: Vec<Vec<f64>> = vec![Vec::new(); b];
    let mut done = vec![max_len == 2; b];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = &model.decoder;
    for t in 1..max_len - 1 {
        let active: Vec<usize> = (0..b).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut g = Graph::new(false);
        let feats: Vec<&Tensor<T>> = active.iter().map(|&i| features[i]).collect();
        let (memory, len) = stack_features(&mut g, &feats)?;
        let flat: Vec<usize> = active.iter().flat_map(|&i| ids[i].iter().copied()).collect();
        let tokens = TokenBatch::mixed(active.len(), t, flat, vec![lang; active.len() * t])?;
        let trace = d.forward(&mut g, &d.params, "dec", &tokens, Memory::Features { var: memory, len }, true, &mut rng)?;
        let hidden = g.reshape(trace.hidden, &[active.len(), t, d.cfg.width])?;
        let last = g.slice(hidden, 1, t - 1, 1)?;
        let last = g.reshape(last, &[active.len(), d.cfg.width])?;
        let logits = d.project(&mut g, &d.params, "dec", last, Head::Language(lang))?;
        let p = g.softmax(logits, 1)?;
        let c = g.shape(p)[1];
        for (row, &i) in g.data(p).chunks(c).zip(&active) {
            let (best, prob) = row.iter().enumerate().filter(|(id, _)| allowed(*id)).fold((END, f64::NEG_INFINITY), |acc, (id, v)| {
                if v.as_f64() > acc.1 { (id, v.as_f64()) } else { acc }
            });
            ids[i].push(best);
            probs[i].push(prob);
            if best == END || t + 1 == max_len - 1 {
                done[i] = true;
            }
        }
    }
    ids.into_iter()
        .zip(probs)
        .map(|(ids, step_probs)| Ok(GenerationResult { language: lang, text: vocab.decode_ids(&ids)?, ids, step_probs }))
        .collect()
}

/// Greedy caption of one frame's features.
pub fn generate<T: Scalar>(model: &CaptioningModel<T>, features: &Tensor<T>, lang: Language, max_len: usize) -> Result<GenerationResult> {
    Ok(generate_batch(model, &[features], lang, max_len)?.remove(0))
}

/// Greedy captions for every frame of a set, in chunks.
pub fn generate_set<T: Scalar>(model: &CaptioningModel<T>, set: &CaptionSet<T>, lang: Language, max_len: usize) -> Result<Vec<GenerationResult>> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.features.chunks(64) {
        let refs: Vec<&Tensor<T>> = chunk.iter().collect();
        out.extend(generate_batch(model, &refs, lang, max_len)?);
    }
    Ok(out)
}

/// Log-probability the model assigns to `ids[1..]` given `ids[..]` prefixes.
pub fn sequence_log_prob<T: Scalar>(model: &CaptioningModel<T>, features: &Tensor<T>, lang: Language, ids: &[usize]) -> Result<f64> {
    if ids.len() < 2 {
        return Ok(0.0);
    }
    let d = &model.decoder;
    let s = ids.len() - 1;
    let mut g = Graph::new(false);
    let (memory, len) = stack_features(&mut g, &[features])?;
    let tokens = TokenBatch::mixed(1, s, ids[..s].to_vec(), vec![lang; s])?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = d.forward(&mut g, &d.params, "dec", &tokens, Memory::Features { var: memory, len }, true, &mut rng)?;
    let logits = d.project(&mut g, &d.params, "dec", trace.hidden, Head::Language(lang))?;
    let loss = g.cross_entropy(logits, &ids[1..], usize::MAX, Reduction::Sum)?;
    Ok(-g.data(loss)[0].as_f64())
}

/// BLEU-1, METEOR and ROUGE-L, each in [0, 100].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu1: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

/// Scores normalised candidate texts against their references.
pub fn score_texts<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<Scores> {
    if candidates.is_empty() {
        return Err(Error::Argument("nothing to score".into()));
    }
    let c: Vec<Vec<String>> = candidates.iter().map(|t| normalize(t.as_ref())).collect();
    let r: Vec<Vec<String>> = references.iter().map(|t| normalize(t.as_ref())).collect();
    Ok(Scores { bleu1: bleu(&c, &r, 1)?, meteor: meteor_corpus(&c, &r)?, rouge_l: rouge_l_corpus(&c, &r)? })
}

/// Per-language scores plus their unweighted average, in table order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub languages: BTreeMap<Language, Scores>,
}

impl MetricTable {
    pub fn average(&self) -> Scores {
        let n = self.languages.len().max(1) as f64;
        let sum = |f: fn(&Scores) -> f64| self.languages.values().map(f).sum::<f64>() / n;
        Scores { bleu1: sum(|s| s.bleu1), meteor: sum(|s| s.meteor), rouge_l: sum(|s| s.rouge_l) }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,bleu1,meteor,rougeL\n");
        let rows = self.languages.iter().map(|(l, s)| (l.code(), *s)).chain(std::iter::once(("avg", self.average())));
        for (name, s) in rows {
            writeln!(out, "{name},{:.4},{:.4},{:.4}", s.bleu1, s.meteor, s.rouge_l).expect("writing to a string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One generated caption next to its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReport {
    pub frame: String,
    pub language: Language,
    pub text: String,
    pub reference: String,
}

/// Generates captions for every frame in each of `langs` and scores them.
pub fn evaluate_split<T: Scalar>(model: &CaptioningModel<T>, set: &CaptionSet<T>, langs: &[Language], max_len: usize) -> Result<(MetricTable, Vec<GeneratedReport>)> {
    if set.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    let mut table = BTreeMap::new();
    let mut reports = Vec::new();
    for &l in langs {
        let refs = set.references.get(&l).ok_or_else(|| Error::Argument(format!("split has no {l} references")))?;
        let gen = generate_set(model, set, l, max_len)?;
        let texts: Vec<&str> = gen.iter().map(|r| r.text.as_str()).collect();
        table.insert(l, score_texts(&texts, refs)?);
        reports.extend(gen.into_iter().zip(refs).zip(&set.frame_ids).map(|((g, r), f)| GeneratedReport { frame: f.clone(), language: l, text: g.text, reference: r.clone() }));
    }
    Ok((MetricTable { languages: table }, reports))
}

pub fn write_reports(path: &Path, reports: &[GeneratedReport]) -> Result<()> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<GeneratedReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
