//! Corruption-based decoder pre-training: replaced token language
//! prediction (RTLP), masked language modelling and ELECTRA.

use std::collections::BTreeMap;

use cardiocap_tensor::{Adam, AdamConfig, Graph, Reduction, Scalar, Var};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, Head, Memory, TokenBatch};
use crate::encoder::argmax;
use crate::error::{Error, Result};
use crate::lang::Language;
use crate::tokenize::{EmbeddingTable, TokenSequence, MASK, NUM_SPECIAL, PAD};
use crate::train::{check_loss, EarlyStopping, EpochRecord, TrainConfig, Verdict};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rtlp,
    Mlm,
    Electra,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtlp" => Ok(Task::Rtlp),
            "mlm" => Ok(Task::Mlm),
            "electra" => Ok(Task::Electra),
            _ => Err(Error::Argument(format!("unknown pre-training task {s:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Rtlp => "rtlp",
            Task::Mlm => "mlm",
            Task::Electra => "electra",
        })
    }
}

/// How RTLP picks the replacement token in the target language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetTokenMode {
    Uniform,
    /// Softmax over embedding dot products with the source token.
    Similarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Share of eligible positions RTLP replaces.
    pub k_fraction: f64,
    /// Share of eligible positions MLM selects.
    pub mask_fraction: f64,
    /// Of the selected positions: `[MASK]`, random token, unchanged.
    pub mask_split: [f64; 3],
    pub target_token_mode: TargetTokenMode,
    pub temperature: f64,
    /// Use cosine instead of raw dot-product similarity.
    pub normalize: bool,
    /// Weight of the discriminator term in the ELECTRA loss.
    pub electra_lambda: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k_fraction: 0.15,
            mask_fraction: 0.15,
            mask_split: [0.8, 0.1, 0.1],
            target_token_mode: TargetTokenMode::Uniform,
            temperature: 1.0,
            normalize: false,
            electra_lambda: 50.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k_fraction) || !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::Config("corruption fractions must lie in [0, 1]".into()));
        }
        if self.mask_split.iter().any(|f| *f < 0.0) || (self.mask_split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mask split {:?} must be non-negative and sum to 1", self.mask_split)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Positions RTLP replaces: `max(1, round(k_fraction * eligible))`, or
    /// none when the fraction is zero or nothing is eligible.
    pub fn rtlp_k(&self, eligible: usize) -> usize {
        if eligible == 0 || self.k_fraction == 0.0 {
            0
        } else {
            ((self.k_fraction * eligible as f64).round() as usize).clamp(1, eligible)
        }
    }

    /// Positions MLM selects: `ceil(mask_fraction * eligible)`.
    pub fn mlm_count(&self, eligible: usize) -> usize {
        ((self.mask_fraction * eligible as f64 - 1e-9).ceil().max(0.0) as usize).min(eligible)
    }
}

/// A token sequence after corruption, with its supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptedSequence {
    pub task: Task,
    pub source: Language,
    pub ids: Vec<usize>,
    /// Embedding table used for each position.
    pub token_langs: Vec<Language>,
    /// RTLP: position was replaced. MLM/ELECTRA: position was selected.
    pub replaced: Vec<bool>,
    /// Language of each position (the source unless replaced).
    pub lang_labels: Vec<Language>,
    /// Original id at selected MLM/ELECTRA positions.
    pub mlm_targets: Vec<Option<usize>>,
}

impl CorruptedSequence {
    fn clean(task: Task, seq: &TokenSequence) -> Self {
        let n = seq.len();
        CorruptedSequence {
            task,
            source: seq.language,
            ids: seq.ids.clone(),
            token_langs: vec![seq.language; n],
            replaced: vec![false; n],
            lang_labels: vec![seq.language; n],
            mlm_targets: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `k` distinct eligible positions, uniformly without replacement, sorted.
pub fn select_positions<R: Rng + ?Sized>(seq: &TokenSequence, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let eligible = seq.eligible_positions();
    if k > eligible.len() {
        return Err(Error::Argument(format!("cannot pick {k} of {} eligible positions", eligible.len())));
    }
    let mut picked: Vec<usize> = index::sample(rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Uniform over the configured languages other than `source`.
pub fn select_target_language<R: Rng + ?Sized>(source: Language, languages: &[Language], rng: &mut R) -> Result<Language> {
    let others: Vec<Language> = languages.iter().copied().filter(|&l| l != source).collect();
    others.choose(rng).copied().ok_or_else(|| Error::Config("RTLP needs at least two languages".into()))
}

/// Sampling distribution over the regular tokens of `target`:
/// `q_j ∝ exp(e_src · e_j / temperature)`.
pub fn similarity_distribution<T: Scalar>(source_embedding: &[T], target: &EmbeddingTable<T>, temperature: f64, normalize: bool) -> Result<Vec<f64>> {
    let c = target.matrix.shape()[0];
    if c <= NUM_SPECIAL {
        return Err(Error::Config(format!("{} vocabulary has no regular tokens", target.language)));
    }
    let norm = |v: &[T]| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt().max(1e-12);
    let src_norm = if normalize { norm(source_embedding) } else { 1.0 };
    let scores: Vec<f64> = (NUM_SPECIAL..c)
        .map(|j| {
            let row = target.row(j);
            let dot: f64 = row.iter().zip(source_embedding).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let scale = if normalize { src_norm * norm(row) } else { 1.0 };
            dot / scale / temperature
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

/// A regular token id of `target`, uniformly or by embedding similarity.
pub fn sample_target_token<T: Scalar, R: Rng + ?Sized>(source_embedding: &[T], target: &EmbeddingTable<T>, cfg: &SamplerConfig, rng: &mut R) -> Result<usize> {
    let c = target.matrix.shape()[0];
    if c <= NUM_SPECIAL {
        return Err(Error::Config(format!("{} vocabulary has no regular tokens", target.language)));
    }
    match cfg.target_token_mode {
        TargetTokenMode::Uniform => Ok(rng.random_range(NUM_SPECIAL..c)),
        TargetTokenMode::Similarity => {
            let q = similarity_distribution(source_embedding, target, cfg.temperature, cfg.normalize)?;
            let dist = WeightedIndex::new(&q).map_err(|e| Error::Numeric(format!("similarity distribution: {e}")))?;
            Ok(NUM_SPECIAL + dist.sample(rng))
        }
    }
}

/// Replaces `k` tokens with tokens of one randomly drawn other language.
pub fn corrupt_rtlp<T: Scalar, R: Rng + ?Sized>(
    seq: &TokenSequence,
    cfg: &SamplerConfig,
    languages: &[Language],
    tables: &BTreeMap<Language, EmbeddingTable<T>>,
    rng: &mut R,
) -> Result<CorruptedSequence> {
    let k = cfg.rtlp_k(seq.eligible_positions().len());
    corrupt_rtlp_k(seq, k, cfg, languages, tables, rng)
}

/// RTLP corruption with an explicit number of replaced positions.
pub fn corrupt_rtlp_k<T: Scalar, R: Rng + ?Sized>(
    seq: &TokenSequence,
    k: usize,
    cfg: &SamplerConfig,
    languages: &[Language],
    tables: &BTreeMap<Language, EmbeddingTable<T>>,
    rng: &mut R,
) -> Result<CorruptedSequence> {
    let mut out = CorruptedSequence::clean(Task::Rtlp, seq);
    let positions = select_positions(seq, k, rng)?;
    let target = select_target_language(seq.language, languages, rng)?;
    if positions.is_empty() {
        return Ok(out);
    }
    let table = |l: Language| tables.get(&l).ok_or_else(|| Error::Config(format!("no embedding table for {l}")));
    let (src, dst) = (table(seq.language)?, table(target)?);
    for s in positions {
        out.ids[s] = sample_target_token(src.row(seq.ids[s]), dst, cfg, rng)?;
        out.token_langs[s] = target;
        out.replaced[s] = true;
        out.lang_labels[s] = target;
    }
    Ok(out)
}

/// Masked-LM corruption with a vocabulary of `vocab_size` ids.
pub fn corrupt_mlm<R: Rng + ?Sized>(seq: &TokenSequence, cfg: &SamplerConfig, vocab_size: usize, rng: &mut R) -> Result<CorruptedSequence> {
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::Config("vocabulary has no regular tokens".into()));
    }
    let mut out = CorruptedSequence::clean(Task::Mlm, seq);
    let m = cfg.mlm_count(seq.eligible_positions().len());
    for s in select_positions(seq, m, rng)? {
        out.replaced[s] = true;
        out.mlm_targets[s] = Some(seq.ids[s]);
        let u: f64 = rng.random();
        if u < cfg.mask_split[0] {
            out.ids[s] = MASK;
        } else if u < cfg.mask_split[0] + cfg.mask_split[1] {
            out.ids[s] = rng.random_range(NUM_SPECIAL..vocab_size);
        }
    }
    Ok(out)
}

/// Stacks sequences into one batch, padding to the longest.
fn stack(seqs: &[&CorruptedSequence]) -> Result<TokenBatch> {
    let seq = seqs.iter().map(|s| s.len()).max().ok_or_else(|| Error::Batching("empty batch".into()))?;
    let mut ids = Vec::with_capacity(seqs.len() * seq);
    let mut langs = Vec::with_capacity(seqs.len() * seq);
    for s in seqs {
        ids.extend(s.ids.iter().copied().chain(std::iter::repeat_n(PAD, seq - s.len())));
        langs.extend(s.token_langs.iter().copied().chain(std::iter::repeat_n(s.source, seq - s.len())));
    }
    TokenBatch::mixed(seqs.len(), seq, ids, langs)
}

/// Orders N per-language batches by language, failing unless every
/// decoder language appears exactly once.
fn balanced<'a>(decoder_langs: &[Language], batches: &'a [Vec<CorruptedSequence>]) -> Result<Vec<&'a Vec<CorruptedSequence>>> {
    let mut by_lang: BTreeMap<Language, &Vec<CorruptedSequence>> = BTreeMap::new();
    for b in batches {
        let lang = b.first().map(|s| s.source).ok_or_else(|| Error::Batching("empty language batch".into()))?;
        if b.iter().any(|s| s.source != lang) {
            return Err(Error::Batching("a language batch mixes source languages".into()));
        }
        if by_lang.insert(lang, b).is_some() {
            return Err(Error::Batching(format!("two batches for {lang}")));
        }
    }
    decoder_langs
        .iter()
        .map(|l| by_lang.get(l).copied().ok_or_else(|| Error::Batching(format!("missing {l} batch"))))
        .collect()
}

/// A loss node plus accuracy bookkeeping on the supervised positions.
pub struct TaskLoss {
    pub loss: Var,
    pub correct: usize,
    pub counted: usize,
}

fn count_correct<T: Scalar>(logits: &[T], classes: usize, targets: &[usize], ignore: usize) -> (usize, usize) {
    let mut correct = 0;
    let mut counted = 0;
    for (row, &t) in logits.chunks(classes).zip(targets) {
        if t != ignore {
            counted += 1;
            correct += usize::from(argmax(row) == t);
        }
    }
    (correct, counted)
}

/// Language-ID cross-entropy over every non-padding position, averaged over
/// those positions. Accuracy is reported on replaced positions only.
pub fn loss_rtlp<T: Scalar, R: Rng + ?Sized>(g: &mut Graph<T>, decoder: &Decoder<T>, batches: &[Vec<CorruptedSequence>], rng: &mut R) -> Result<TaskLoss> {
    let ordered = balanced(&decoder.languages, batches)?;
    let seqs: Vec<&CorruptedSequence> = ordered.iter().flat_map(|b| b.iter()).collect();
    let tokens = stack(&seqs)?;
    let mut targets = Vec::with_capacity(tokens.ids.len());
    let mut replaced = Vec::with_capacity(tokens.ids.len());
    for s in &seqs {
        for i in 0..tokens.seq {
            let contributing = i < s.len() && s.ids[i] != PAD;
            targets.push(if contributing { decoder.language_index(s.lang_labels[i])? } else { usize::MAX });
            replaced.push(i < s.len() && s.replaced[i]);
        }
    }
    let trace = decoder.forward(g, &decoder.params, "dec", &tokens, Memory::Null, false, rng)?;
    let logits = decoder.project(g, &decoder.params, "dec", trace.hidden, Head::Rtlp)?;
    let loss = g.cross_entropy(logits, &targets, usize::MAX, Reduction::Mean)?;
    let only_replaced: Vec<usize> = targets.iter().zip(&replaced).map(|(&t, &r)| if r { t } else { usize::MAX }).collect();
    let (correct, counted) = count_correct(g.data(logits), decoder.languages.len(), &only_replaced, usize::MAX);
    Ok(TaskLoss { loss, correct, counted })
}

/// Summed cross-entropy at selected positions for the sequences of each
/// language, using the `prefix` stack's language heads. Returns the sum
/// node, the number of supervised positions and the logits per language.
fn mlm_terms<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    decoder: &Decoder<T>,
    prefix: &str,
    seqs: &[&CorruptedSequence],
    rng: &mut R,
) -> Result<(Var, usize, usize, Vec<(Language, Var, Vec<usize>)>)> {
    let tokens = stack(seqs)?;
    let trace = decoder.forward(g, &decoder.params, prefix, &tokens, Memory::Null, false, rng)?;
    let mut parts = Vec::new();
    let mut terms = Vec::new();
    let (mut correct, mut counted) = (0, 0);
    let mut start = 0;
    while start < seqs.len() {
        let lang = seqs[start].source;
        let end = start + seqs[start..].iter().take_while(|s| s.source == lang).count();
        let rows = g.slice(trace.hidden, 0, start * tokens.seq, (end - start) * tokens.seq)?;
        let logits = decoder.project(g, &decoder.params, prefix, rows, Head::Language(lang))?;
        let targets: Vec<usize> = seqs[start..end]
            .iter()
            .flat_map(|s| (0..tokens.seq).map(move |i| s.mlm_targets.get(i).copied().flatten().unwrap_or(usize::MAX)))
            .collect();
        let (c, n) = count_correct(g.data(logits), g.shape(logits)[1], &targets, usize::MAX);
        correct += c;
        counted += n;
        if n > 0 {
            terms.push(g.cross_entropy(logits, &targets, usize::MAX, Reduction::Sum)?);
        }
        parts.push((lang, logits, targets));
        start = end;
    }
    if counted == 0 {
        return Err(Error::Batching("no masked positions in the batch".into()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, correct, counted, parts))
}

/// Cross-entropy at the selected positions, averaged over them.
pub fn loss_mlm<T: Scalar, R: Rng + ?Sized>(g: &mut Graph<T>, decoder: &Decoder<T>, batches: &[Vec<CorruptedSequence>], rng: &mut R) -> Result<TaskLoss> {
    let ordered = balanced(&decoder.languages, batches)?;
    let seqs: Vec<&CorruptedSequence> = ordered.iter().flat_map(|b| b.iter()).collect();
    let (sum, correct, counted, _) = mlm_terms(g, decoder, "dec", &seqs, rng)?;
    let loss = g.scale(sum, 1.0 / counted as f64)?;
    Ok(TaskLoss { loss, correct, counted })
}

/// Breakdown of an ELECTRA loss evaluation.
pub struct ElectraLoss {
    pub total: TaskLoss,
    pub generator: Var,
    pub discriminator: Var,
}

/// Generator MLM loss plus `lambda` times the discriminator's
/// replaced-token detection loss over all non-padding positions.
pub fn loss_electra<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    decoder: &Decoder<T>,
    batches: &[Vec<CorruptedSequence>],
    lambda: f64,
    rng: &mut R,
) -> Result<ElectraLoss> {
    let ordered = balanced(&decoder.languages, batches)?;
    let seqs: Vec<&CorruptedSequence> = ordered.iter().flat_map(|b| b.iter()).collect();
    let (sum, _, counted, parts) = mlm_terms(g, decoder, "gen", &seqs, rng)?;
    let generator = g.scale(sum, 1.0 / counted as f64)?;

    // Replace each selected token by a sample from the generator.
    let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut disc: Vec<CorruptedSequence> = seqs.iter().map(|s| (*s).clone()).collect();
    let mut row0 = 0;
    for (_, logits, targets) in &parts {
        let classes = g.shape(*logits)[1];
        let data = g.data(*logits).to_vec();
        for (r, &t) in targets.iter().enumerate() {
            if t == usize::MAX {
                continue;
            }
            let row = &data[r * classes..(r + 1) * classes];
            let max = row[NUM_SPECIAL..].iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row[NUM_SPECIAL..].iter().map(|x| (x.as_f64() - max).exp()).collect();
            let dist = WeightedIndex::new(&w).map_err(|e| Error::Numeric(format!("generator distribution: {e}")))?;
            let (si, pos) = ((row0 + r) / seq_len, (row0 + r) % seq_len);
            disc[si].ids[pos] = NUM_SPECIAL + dist.sample(rng);
        }
        row0 += targets.len();
    }
    let disc_refs: Vec<&CorruptedSequence> = disc.iter().collect();
    let tokens = stack(&disc_refs)?;
    let mut labels = Vec::with_capacity(tokens.ids.len());
    for (s, orig) in disc.iter().zip(&seqs) {
        for i in 0..tokens.seq {
            labels.push(if i < s.len() && s.ids[i] != PAD {
                let original = orig.mlm_targets[i].unwrap_or(orig.ids[i]);
                usize::from(s.ids[i] != original)
            } else {
                usize::MAX
            });
        }
    }
    let trace = decoder.forward(g, &decoder.params, "dec", &tokens, Memory::Null, false, rng)?;
    let logits = decoder.project(g, &decoder.params, "dec", trace.hidden, Head::Electra)?;
    let discriminator = g.cross_entropy(logits, &labels, usize::MAX, Reduction::Mean)?;
    let (correct, counted) = count_correct(g.data(logits), 2, &labels, usize::MAX);
    let weighted = g.scale(discriminator, lambda)?;
    let loss = g.add(generator, weighted)?;
    Ok(ElectraLoss { total: TaskLoss { loss, correct, counted }, generator, discriminator })
}

/// Corrupts one language batch for `task`.
pub fn corrupt_batch<T: Scalar, R: Rng + ?Sized>(
    task: Task,
    seqs: &[&TokenSequence],
    cfg: &SamplerConfig,
    decoder: &Decoder<T>,
    tables: &BTreeMap<Language, EmbeddingTable<T>>,
    rng: &mut R,
) -> Result<Vec<CorruptedSequence>> {
    seqs.iter()
        .map(|s| match task {
            Task::Rtlp => corrupt_rtlp(s, cfg, &decoder.languages, tables, rng),
            Task::Mlm | Task::Electra => {
                let mut c = corrupt_mlm(s, cfg, decoder.vocab_size(s.language)?, rng)?;
                c.task = task;
                Ok(c)
            }
        })
        .collect()
}

/// Current embedding tables of a decoder.
pub fn embedding_tables<T: Scalar>(decoder: &Decoder<T>) -> Result<BTreeMap<Language, EmbeddingTable<T>>> {
    decoder
        .languages
        .iter()
        .map(|&l| Ok((l, EmbeddingTable { language: l, matrix: decoder.params.tensor(&format!("emb.{l}"))?.clone() })))
        .collect()
}

fn task_loss<T: Scalar, R: Rng + ?Sized>(g: &mut Graph<T>, task: Task, decoder: &Decoder<T>, batches: &[Vec<CorruptedSequence>], cfg: &SamplerConfig, rng: &mut R) -> Result<TaskLoss> {
    match task {
        Task::Rtlp => loss_rtlp(g, decoder, batches, rng),
        Task::Mlm => loss_mlm(g, decoder, batches, rng),
        Task::Electra => Ok(loss_electra(g, decoder, batches, cfg.electra_lambda, rng)?.total),
    }
}

/// Per-language sequences used for decoder pre-training.
pub type Corpora = BTreeMap<Language, Vec<TokenSequence>>;

#[derive(Clone, Debug)]
pub struct PretrainedDecoder<T> {
    pub decoder: Decoder<T>,
    pub task: Task,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Splits equally long per-language index lists into aligned batches.
fn balanced_steps(counts: &[usize], batch: usize) -> usize {
    let n = counts.iter().copied().min().unwrap_or(0);
    n.div_ceil(batch)
}

/// Mean validation loss and accuracy on pre-corrupted batches.
fn validate<T: Scalar>(task: Task, decoder: &Decoder<T>, batches: &[Vec<Vec<CorruptedSequence>>], cfg: &SamplerConfig, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut loss_sum, mut weight, mut correct, mut counted) = (0.0, 0.0, 0, 0);
    for step in batches {
        let mut g = Graph::new(false);
        let out = task_loss(&mut g, task, decoder, step, cfg, &mut rng)?;
        let w = step.iter().map(Vec::len).sum::<usize>() as f64;
        loss_sum += g.data(out.loss)[0].as_f64() * w;
        weight += w;
        correct += out.correct;
        counted += out.counted;
    }
    Ok((loss_sum / weight, if counted == 0 { 0.0 } else { correct as f64 / counted as f64 }))
}

fn make_steps<T: Scalar, R: Rng + ?Sized>(
    task: Task,
    corpora: &Corpora,
    orders: &BTreeMap<Language, Vec<usize>>,
    batch: usize,
    cfg: &SamplerConfig,
    decoder: &Decoder<T>,
    step: usize,
    rng: &mut R,
) -> Result<Vec<Vec<CorruptedSequence>>> {
    let n = orders.values().map(Vec::len).min().unwrap_or(0);
    let range = step * batch..((step + 1) * batch).min(n);
    let tables = if task == Task::Rtlp { embedding_tables(decoder)? } else { BTreeMap::new() };
    decoder
        .languages
        .iter()
        .map(|l| {
            let seqs: Vec<&TokenSequence> = orders[l][range.clone()].iter().map(|&i| &corpora[l][i]).collect();
            corrupt_batch(task, &seqs, cfg, decoder, &tables, rng)
        })
        .collect()
}

/// Trains the decoder on `task` with balanced batches (one equally sized
/// batch per language per step) and early stopping on validation loss.
/// Pre-training heads stay in the returned parameters.
pub fn pretrain_decoder<T: Scalar>(
    task: Task,
    mut decoder: Decoder<T>,
    train: &Corpora,
    val: &Corpora,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<PretrainedDecoder<T>> {
    cfg.validate()?;
    sampler.validate()?;
    for l in &decoder.languages {
        if train.get(l).is_none_or(Vec::is_empty) || val.get(l).is_none_or(Vec::is_empty) {
            return Err(Error::Batching(format!("no {l} sequences for pre-training")));
        }
    }
    if task == Task::Rtlp && decoder.languages.len() < 2 {
        return Err(Error::Config("RTLP needs at least two languages".into()));
    }
    if task == Task::Electra {
        if !decoder.params.contains("gen.null_memory") {
            decoder.add_generator(cfg.seed.wrapping_add(101));
        }
        if !decoder.params.contains("dec.head.electra.w") {
            decoder.add_electra_head(cfg.seed.wrapping_add(102));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_seed = cfg.seed ^ 0x5eed_0f_0a11;
    let val_batches: Vec<Vec<Vec<CorruptedSequence>>> = {
        let mut vrng = ChaCha8Rng::seed_from_u64(val_seed);
        let orders: BTreeMap<Language, Vec<usize>> = val.iter().map(|(l, v)| (*l, (0..v.len()).collect())).collect();
        let counts: Vec<usize> = decoder.languages.iter().map(|l| val[l].len()).collect();
        (0..balanced_steps(&counts, cfg.batch_size))
            .map(|s| make_steps(task, val, &orders, cfg.batch_size, sampler, &decoder, s, &mut vrng))
            .collect::<Result<_>>()?
    };
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopping::minimize(cfg.patience);
    let mut best = decoder.params.clone();
    let mut history = Vec::new();
    let counts: Vec<usize> = decoder.languages.iter().map(|l| train[l].len()).collect();
    for epoch in 0..cfg.max_epochs {
        let mut orders: BTreeMap<Language, Vec<usize>> = BTreeMap::new();
        for l in &decoder.languages {
            let mut o: Vec<usize> = (0..train[l].len()).collect();
            o.shuffle(&mut rng);
            orders.insert(*l, o);
        }
        let (mut loss_sum, mut seen) = (0.0, 0.0);
        for step in 0..balanced_steps(&counts, cfg.batch_size) {
            let batches = make_steps(task, train, &orders, cfg.batch_size, sampler, &decoder, step, &mut rng)?;
            let mut g = Graph::new(true);
            let out = task_loss(&mut g, task, &decoder, &batches, sampler, &mut rng)?;
            let value = check_loss(&format!("{task} pre-training"), g.data(out.loss)[0].as_f64())?;
            g.backward(out.loss)?;
            g.accumulate_into(&mut decoder.params)?;
            adam.step(&mut decoder.params)?;
            let w = batches.iter().map(Vec::len).sum::<usize>() as f64;
            loss_sum += value * w;
            seen += w;
        }
        let (val_loss, val_metric) = validate(task, &decoder, &val_batches, sampler, val_seed)?;
        check_loss(&format!("{task} validation"), val_loss)?;
        history.push(EpochRecord { epoch, train_loss: loss_sum / seen, val_loss, val_metric });
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best = decoder.params.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    decoder.params = best;
    Ok(PretrainedDecoder { decoder, task, history, best_epoch: stopper.best_epoch() })
}

/// Encodes every text of each language to a common padded length.
pub fn encode_corpora(texts: &BTreeMap<Language, Vec<String>>, vocabs: &BTreeMap<Language, crate::tokenize::Vocabulary>, max_len: usize) -> Result<Corpora> {
    texts
        .iter()
        .map(|(l, ts)| {
            let v = vocabs.get(l).ok_or_else(|| Error::Config(format!("no {l} vocabulary")))?;
            Ok((*l, ts.iter().map(|t| v.encode(t, max_len)).collect::<Result<Vec<_>>>()?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::tokenize::{Vocabulary, END, START};
    use cardiocap_tensor::Tensor;

    fn seq(lang: Language, ids: &[usize], len: usize) -> TokenSequence {
        let mut v = ids.to_vec();
        let true_length = v.len();
        v.resize(len, PAD);
        TokenSequence { language: lang, ids: v, true_length }
    }

    fn tables(n: usize) -> BTreeMap<Language, EmbeddingTable<f64>> {
        [Language::En, Language::Es]
            .into_iter()
            .map(|l| (l, EmbeddingTable { language: l, matrix: Tensor::full(&[n, 3], 0.1) }))
            .collect()
    }

    #[test]
    fn exhaustive_and_empty_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = seq(Language::En, &[START, 5, 6, 7, END], 7);
        assert_eq!(select_positions(&s, 3, &mut rng).unwrap(), [1, 2, 3]);
        assert!(select_positions(&s, 0, &mut rng).unwrap().is_empty());
        assert!(select_positions(&s, 4, &mut rng).is_err());
    }

    #[test]
    fn two_languages_force_the_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(select_target_language(Language::En, &[Language::En, Language::Es], &mut rng).unwrap(), Language::Es);
        }
        assert!(matches!(select_target_language(Language::En, &[Language::En], &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn similarity_two_candidates() {
        let target = EmbeddingTable { language: Language::Es, matrix: Tensor::from_f64(&[7, 2], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap() };
        let q = similarity_distribution(&[1.0, 0.0], &target, 1.0, false).unwrap();
        let e = std::f64::consts::E;
        assert!((q[0] - e / (e + 1.0)).abs() < 1e-12 && (q[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((q[0] - 0.731).abs() < 1e-3);
        let same = similarity_distribution(&[0.3, 0.2, 0.1], &tables(9)[&Language::Es], 1.0, false).unwrap();
        assert!(same.iter().all(|p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn rtlp_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let langs = [Language::En, Language::Es];
        let s = seq(Language::En, &[START, 5, 6, 7, END], 6);
        let cfg = SamplerConfig::default();
        let none = corrupt_rtlp_k(&s, 0, &cfg, &langs, &tables(9), &mut rng).unwrap();
        assert_eq!(none.ids, s.ids);
        assert!(none.lang_labels.iter().all(|&l| l == Language::En));
        let all = corrupt_rtlp_k(&s, 3, &cfg, &langs, &tables(9), &mut rng).unwrap();
        assert_eq!(all.replaced, [false, true, true, true, false, false]);
        for i in 1..4 {
            assert_eq!(all.lang_labels[i], Language::Es);
            assert_eq!(all.token_langs[i], Language::Es);
        }
        assert_eq!(cfg.rtlp_k(3), 1);
        assert_eq!(cfg.rtlp_k(20), 3);
    }

    #[test]
    fn mlm_ceiling_rule_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = seq(Language::En, &[START, 5, 6, 7, END], 9);
        for _ in 0..50 {
            let c = corrupt_mlm(&s, &SamplerConfig::default(), 10, &mut rng).unwrap();
            assert_eq!(c.replaced.iter().filter(|&&r| r).count(), 1);
            assert!(c.replaced[5..].iter().all(|&r| !r));
            assert_eq!(s.ids, [START, 5, 6, 7, END, PAD, PAD, PAD, PAD]);
        }
    }

    fn tiny_decoder(vocabs: &[&Vocabulary]) -> Decoder<f64> {
        let cfg = DecoderConfig { width: 8, layers: 1, heads: 2, ff_width: 16, dropout: 0.0, max_len: 16 };
        Decoder::new(cfg, vocabs, 0).unwrap()
    }

    #[test]
    fn uniform_rtlp_head_gives_ln_n() {
        let en = Vocabulary::build(&["a b c"], Language::En, 1).unwrap();
        let es = Vocabulary::build(&["x y z"], Language::Es, 1).unwrap();
        let mut dec = tiny_decoder(&[&en, &es]);
        dec.params.set("dec.head.rtlp.w", Tensor::zeros(&[8, 2])).unwrap();
        dec.params.set("dec.head.rtlp.b", Tensor::zeros(&[2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tabs = embedding_tables(&dec).unwrap();
        let langs = dec.languages.clone();
        let make = |v: &Vocabulary, rng: &mut ChaCha8Rng| {
            let s = v.encode(&v.tokens()[5..].join(" "), 7).unwrap();
            vec![corrupt_rtlp(&s, &SamplerConfig::default(), &langs, &tabs, rng).unwrap()]
        };
        let batches = vec![make(&es, &mut rng), make(&en, &mut rng)];
        let mut g = Graph::new(false);
        let out = loss_rtlp(&mut g, &dec, &batches, &mut rng).unwrap();
        assert!((g.data(out.loss)[0] - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(loss_rtlp(&mut g, &dec, &batches[..1], &mut rng), Err(Error::Batching(_))));
    }

    #[test]
    fn uniform_mlm_heads_give_ln_vocab_and_electra_combines() {
        let en = Vocabulary::build(&["a b c d e f"], Language::En, 1).unwrap();
        let es = Vocabulary::build(&["x y z"], Language::Es, 1).unwrap();
        let mut dec = tiny_decoder(&[&en, &es]);
        for (l, c) in [("en", en.len()), ("es", es.len())] {
            dec.params.set(&format!("dec.head.{l}.w"), Tensor::zeros(&[8, c])).unwrap();
            dec.params.set(&format!("dec.head.{l}.b"), Tensor::zeros(&[c])).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SamplerConfig::default();
        let batch = |v: &Vocabulary, rng: &mut ChaCha8Rng| {
            let s = v.encode(&v.tokens()[5..].join(" "), 10).unwrap();
            vec![corrupt_mlm(&s, &cfg, v.len(), rng).unwrap()]
        };
        let batches = vec![batch(&en, &mut rng), batch(&es, &mut rng)];
        // one selected position per language: (ln 11 + ln 8) / 2
        let mut g = Graph::new(false);
        let out = loss_mlm(&mut g, &dec, &batches, &mut rng).unwrap();
        assert_eq!(out.counted, 2);
        let expected = ((en.len() as f64).ln() + (es.len() as f64).ln()) / 2.0;
        assert!((g.data(out.loss)[0] - expected).abs() < 1e-12);

        dec.add_generator(7);
        dec.add_electra_head(8);
        let mut g = Graph::new(true);
        let e = loss_electra(&mut g, &dec, &batches, 50.0, &mut rng).unwrap();
        let (gen, disc, total) = (g.data(e.generator)[0], g.data(e.discriminator)[0], g.data(e.total.loss)[0]);
        assert!((total - (gen + 50.0 * disc)).abs() < 1e-9);
        g.backward(e.total.loss).unwrap();
        g.accumulate_into(&mut dec.params).unwrap();
    }
}
