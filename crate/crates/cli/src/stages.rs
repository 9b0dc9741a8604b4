//! One function per subcommand. Every stage reads its inputs from the
//! directories named in the config and writes its artifacts next to them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cardiocap::caption::{self, CaptionSet, CaptioningModel, FinetuneOptions, GeneratedReport, MetricTable, Mode};
use cardiocap::checkpoint::{self, Manifest};
use cardiocap::corpus::{self, Dataset, ReportRecord, Split, SplitManifest, Standardizer};
use cardiocap::decoder::Decoder;
use cardiocap::encoder::{pretrain_encoder, Encoder};
use cardiocap::metrics::self_bleu;
use cardiocap::pretrain::{self, Task};
use cardiocap::tokenize::Vocabulary;
use cardiocap::translate::{translate_corpus, DictionaryProvider, FlakyProvider};
use cardiocap::{Error, Language};
use cardiocap_tensor::ParamStore;
use serde_json::json;

use crate::config::{sha256_hex, Init, Loaded};
use crate::run::{require, write_file, write_json, CliError, Result, StageLog};

const RAW_REPORTS: &str = "reports.jsonl";
const SELF_BLEU_ORDER: usize = 4;

fn raw_reports(l: &Loaded) -> PathBuf {
    l.data_dir().join(RAW_REPORTS)
}

fn encoder_ckpt(l: &Loaded) -> PathBuf {
    l.checkpoint_dir().join("encoder.ckpt")
}

fn decoder_ckpt(l: &Loaded, task: Task) -> PathBuf {
    l.checkpoint_dir().join(format!("decoder-{task}.ckpt"))
}

fn slug(mode: Mode) -> String {
    mode.to_string().replace(':', "-")
}

fn run_name(init: Init, mode: Mode, split: Split) -> String {
    format!("{}-{}-{}", init.name(), slug(mode), split.name())
}

fn caption_ckpt(l: &Loaded, init: Init, mode: Mode) -> PathBuf {
    l.checkpoint_dir().join(format!("caption-{}-{}.ckpt", init.name(), slug(mode)))
}

fn generated_path(l: &Loaded, run: &str) -> PathBuf {
    l.output_dir().join(format!("generated-{run}.jsonl"))
}

fn records(l: &Loaded, stage: &'static str) -> Result<Vec<ReportRecord>> {
    let reports = l.reports();
    require(&reports, stage, "synth` or `ingest")?;
    Ok(corpus::index_dataset(&l.signals(), &reports)?.records)
}

fn split_manifest(l: &Loaded, stage: &'static str) -> Result<SplitManifest> {
    require(&l.splits(), stage, "split")?;
    Ok(SplitManifest::load(&l.splits())?)
}

fn in_split<'a>(records: &'a [ReportRecord], m: &SplitManifest, split: Split) -> Vec<&'a ReportRecord> {
    let patients: std::collections::BTreeSet<&str> = m.patients(split).iter().map(String::as_str).collect();
    records.iter().filter(|r| patients.contains(r.patient_id.as_str())).collect()
}

fn texts(records: &[&ReportRecord], langs: &[Language]) -> Result<BTreeMap<Language, Vec<String>>> {
    langs
        .iter()
        .map(|&lang| {
            let t = records
                .iter()
                .enumerate()
                .map(|(i, r)| r.text(lang).map(str::to_owned).ok_or_else(|| Error::Schema { index: i, msg: format!("no {lang} text") }))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((lang, t))
        })
        .collect()
}

fn vocabs(l: &Loaded, stage: &'static str) -> Result<BTreeMap<Language, Vocabulary>> {
    l.cfg
        .languages
        .iter()
        .map(|&lang| {
            let path = l.vocab(lang);
            require(&path, stage, "build-vocab")?;
            Ok((lang, Vocabulary::load(&path)?))
        })
        .collect()
}

fn max_len(l: &Loaded, train: &[&ReportRecord]) -> Result<usize> {
    let owned: Vec<ReportRecord> = train.iter().map(|r| (*r).clone()).collect();
    let ml = l.cfg.corpus.max_len.unwrap_or_else(|| caption::records_max_len(&owned));
    if ml > l.cfg.decoder.max_len {
        return Err(CliError::Config(format!("reports need {ml} positions but decoder.max_len is {}", l.cfg.decoder.max_len)));
    }
    Ok(ml)
}

/// Standardised dataset restricted to the configured languages.
fn dataset(l: &Loaded, stage: &'static str) -> Result<(Dataset<f32>, SplitManifest)> {
    let reports = l.reports();
    require(&reports, stage, "synth` or `ingest")?;
    let m = split_manifest(l, stage)?;
    require(&l.standardizer(), stage, "split")?;
    let text = std::fs::read_to_string(l.standardizer()).map_err(|e| CliError::io(&l.standardizer(), e))?;
    let st: Standardizer = serde_json::from_str(&text).map_err(|e| Error::Format { path: l.standardizer(), msg: e.to_string() })?;
    let mut d = corpus::load_dataset::<f32>(&l.signals(), &reports)?.with_languages(&l.cfg.languages)?;
    st.apply(&mut d);
    Ok((d, m))
}

fn manifest(l: &Loaded, phase: String, epoch: usize, val_metric: Option<f64>, seed: u64) -> Manifest {
    Manifest { phase, epoch, val_metric, config_hash: l.cfg.architecture_hash(), seed }
}

/// Restores the tensors of a checkpoint accepted by `filter`, refusing
/// checkpoints written for a different architecture.
fn restore_checked(l: &Loaded, path: &Path, stage: &'static str, needs: String, store: &mut ParamStore<f32>, filter: impl Fn(&str) -> bool) -> Result<Manifest> {
    require(path, stage, needs.clone())?;
    let m = checkpoint::load_manifest(path)?;
    if m.config_hash != l.cfg.architecture_hash() {
        return Err(Error::Compatibility(format!("{} was written for a different architecture; rerun `{needs}`", path.display())).into());
    }
    checkpoint::restore(path, store, filter)?;
    Ok(m)
}

fn is_pretraining_only(name: &str) -> bool {
    name.starts_with("gen.") || name.starts_with("dec.head.rtlp") || name.starts_with("dec.head.electra")
}

fn fresh_decoder(l: &Loaded, vocabs: &BTreeMap<Language, Vocabulary>) -> Result<Decoder<f32>> {
    let refs: Vec<&Vocabulary> = vocabs.values().collect();
    Ok(Decoder::new(l.cfg.decoder.clone(), &refs, l.cfg.decoder_seed())?)
}

fn modes(l: &Loaded, explicit: Option<&str>) -> Result<Vec<Mode>> {
    match explicit {
        Some(m) => Ok(vec![l.cfg.mode(m)?]),
        None => l.cfg.finetune.modes.iter().map(|m| l.cfg.mode(m)).collect(),
    }
}

pub fn synth(l: &Loaded, log: &mut StageLog) -> Result<()> {
    let c = &l.cfg;
    let d = corpus::generate_synthetic_corpus::<f32>(c.synth.patients, &c.languages, c.synth.grammar_seed)?;
    corpus::write_dataset(&d, &l.signals(), &raw_reports(l))?;
    let dict = l.data_dir().join("dictionary.json");
    crate::run::create_dir(&l.data_dir())?;
    DictionaryProvider::synthetic().save(&dict)?;
    log.artifact(&raw_reports(l));
    log.artifact(&l.signals());
    log.artifact(&dict);
    log.trajectory = json!({ "patients": d.patients().len(), "frames": d.len() });
    eprintln!("synth: {} frames from {} patients", d.len(), d.patients().len());
    Ok(())
}

pub fn ingest(l: &Loaded, log: &mut StageLog, signals: &Path, reports: &Path) -> Result<()> {
    let index = corpus::index_dataset(signals, reports)?;
    let d = index.load::<f32>()?;
    corpus::write_dataset(&d, &l.signals(), &raw_reports(l))?;
    log.artifact(&raw_reports(l));
    log.trajectory = json!({ "frames": d.len(), "excluded": index.excluded, "languages": index.languages });
    eprintln!("ingest: {} frames kept, {} multi-label frames excluded", d.len(), index.excluded.len());
    Ok(())
}

pub fn split(l: &Loaded, log: &mut StageLog) -> Result<()> {
    let reports = l.reports();
    require(&reports, "split", "synth` or `ingest")?;
    let index = corpus::index_dataset(&l.signals(), &reports)?;
    let patients: Vec<&str> = index.records.iter().map(|r| r.patient_id.as_str()).collect();
    let [a, b, c] = l.cfg.split.fractions;
    let m = corpus::split_patients(&patients, (a, b, c), l.cfg.split_seed())?;
    crate::run::create_dir(&l.data_dir())?;
    m.save(&l.splits())?;
    let d = index.load::<f32>()?;
    let st = Standardizer::fit(&d.split(&m, Split::Train).frames)?;
    write_json(&l.standardizer(), &st)?;
    let counts = index.frame_counts(&m);
    log.artifact(&l.splits());
    log.artifact(&l.standardizer());
    log.trajectory = json!({ "frames": counts, "patients": [m.train.len(), m.val.len(), m.test.len()] });
    eprintln!("split: {} / {} / {} frames", counts[&Split::Train], counts[&Split::Val], counts[&Split::Test]);
    Ok(())
}

pub fn build_vocab(l: &Loaded, log: &mut StageLog) -> Result<()> {
    let records = records(l, "build-vocab")?;
    let m = split_manifest(l, "build-vocab")?;
    let train = in_split(&records, &m, Split::Train);
    let mut sizes = BTreeMap::new();
    for (lang, t) in texts(&train, &l.cfg.languages)? {
        let v = Vocabulary::build(&t, lang, l.cfg.vocab.min_count)?;
        let path = l.vocab(lang);
        crate::run::create_dir(path.parent().expect("vocab dir"))?;
        v.save(&path)?;
        log.artifact(&path);
        sizes.insert(lang, v.len());
    }
    eprintln!("build-vocab: {sizes:?}");
    log.trajectory = json!(sizes);
    Ok(())
}

pub fn translate(l: &Loaded, log: &mut StageLog) -> Result<()> {
    let c = &l.cfg;
    require(&raw_reports(l), "translate-corpus", "synth` or `ingest")?;
    require(&l.dictionary(), "translate-corpus", "synth")?;
    let records = corpus::index_dataset(&l.signals(), &raw_reports(l))?.records;
    let mut provider = FlakyProvider::new(DictionaryProvider::load(&l.dictionary())?, c.translate.success, c.seed);
    let (out, report) = translate_corpus(&records, c.translate.source, &c.languages, &mut provider, c.translate.max_iters)?;
    let target = l.data_dir().join(&c.translate.output);
    let lines: String = out.iter().map(|r| serde_json::to_string(r).expect("record serialises") + "\n").collect();
    write_file(&target, lines)?;
    let summary = l.output_dir().join("translation.json");
    write_json(&summary, &report)?;
    log.artifact(&target);
    log.artifact(&summary);
    log.trajectory = serde_json::to_value(&report.pass_rates).expect("report serialises");
    eprintln!("translate-corpus: {} iteration(s), criterion {}", report.iterations, if report.criterion_met { "met" } else { "NOT met" });
    for (lang, rates) in &report.pass_rates {
        eprintln!("  {lang}: {}", rates.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" -> "));
    }
    Ok(())
}

pub fn pretrain_encoder_stage(l: &Loaded, log: &mut StageLog) -> Result<()> {
    let (d, m) = dataset(l, "pretrain-encoder")?;
    let (tr, va) = (d.split(&m, Split::Train), d.split(&m, Split::Val));
    let cfg = l.cfg.encoder_train();
    let enc = Encoder::new(l.cfg.encoder.clone(), cfg.seed)?;
    let out = pretrain_encoder(enc, &tr, &va, &cfg)?;
    let best = out.history.iter().find(|h| h.epoch == out.best_epoch);
    let path = encoder_ckpt(l);
    crate::run::create_dir(&l.checkpoint_dir())?;
    checkpoint::save(&path, &[&out.encoder.params], &manifest(l, "encoder".into(), out.best_epoch, best.map(|b| b.val_loss), cfg.seed))?;
    log.artifact(&path);
    log.trajectory = json!(out.history);
    if let Some(b) = best {
        eprintln!("pretrain-encoder: best epoch {} val loss {:.4} accuracy {:.3}", b.epoch, b.val_loss, b.val_metric);
    }
    Ok(())
}

pub fn pretrain_decoder_stage(l: &Loaded, log: &mut StageLog, task: Task) -> Result<()> {
    let stage = "pretrain-decoder";
    let records = records(l, stage)?;
    let m = split_manifest(l, stage)?;
    let vocabs = vocabs(l, stage)?;
    let (train, val) = (in_split(&records, &m, Split::Train), in_split(&records, &m, Split::Val));
    let ml = max_len(l, &train)?;
    let ctr = pretrain::encode_corpora(&texts(&train, &l.cfg.languages)?, &vocabs, ml)?;
    let cva = pretrain::encode_corpora(&texts(&val, &l.cfg.languages)?, &vocabs, ml)?;
    let cfg = l.cfg.pretrain_train();
    let out = pretrain::pretrain_decoder(task, fresh_decoder(l, &vocabs)?, &ctr, &cva, &cfg, &l.cfg.sampler)?;
    let best = out.history.iter().find(|h| h.epoch == out.best_epoch);
    let path = decoder_ckpt(l, task);
    crate::run::create_dir(&l.checkpoint_dir())?;
    checkpoint::save(&path, &[&out.decoder.params], &manifest(l, format!("decoder-{task}"), out.best_epoch, best.map(|b| b.val_loss), cfg.seed))?;
    log.artifact(&path);
    log.trajectory = json!(out.history);
    if let Some(b) = best {
        eprintln!("pretrain-decoder {task}: best epoch {} val loss {:.4} metric {:.3}", b.epoch, b.val_loss, b.val_metric);
    }
    Ok(())
}

fn load_encoder(l: &Loaded, stage: &'static str) -> Result<Encoder<f32>> {
    let mut enc = Encoder::new(l.cfg.encoder.clone(), l.cfg.encoder_seed())?;
    restore_checked(l, &encoder_ckpt(l), stage, "pretrain-encoder".into(), &mut enc.params, |_| true)?;
    Ok(enc)
}

fn initial_decoder(l: &Loaded, init: Init, vocabs: &BTreeMap<Language, Vocabulary>) -> Result<Decoder<f32>> {
    let mut dec = fresh_decoder(l, vocabs)?;
    if let Some(task) = init.task() {
        restore_checked(l, &decoder_ckpt(l, task), "finetune", format!("pretrain-decoder --task {task}"), &mut dec.params, |n| !is_pretraining_only(n))?;
    }
    dec.discard_pretraining_heads();
    Ok(dec)
}

pub fn finetune(l: &Loaded, log: &mut StageLog, mode: Option<&str>, init: Option<Init>) -> Result<()> {
    let stage = "finetune";
    let modes = modes(l, mode)?;
    let init = init.unwrap_or(l.cfg.finetune.init);
    let vocabs = vocabs(l, stage)?;
    let encoder = load_encoder(l, stage)?;
    let decoder = initial_decoder(l, init, &vocabs)?;
    let (d, m) = dataset(l, stage)?;
    let (tr, va) = (d.split(&m, Split::Train), d.split(&m, Split::Val));
    let ml = max_len(l, &tr.records.iter().collect::<Vec<_>>())?;
    let probe = CaptioningModel::new(encoder.clone(), decoder.clone(), vocabs.clone())?;
    let (s_tr, s_va) = (CaptionSet::prepare(&probe, &tr, ml)?, CaptionSet::prepare(&probe, &va, ml)?);
    let opts = FinetuneOptions {
        train: l.cfg.finetune_train(),
        eval_every: l.cfg.finetune.eval_every,
        max_steps: l.cfg.finetune.max_steps,
        target_bleu: l.cfg.finetune.target_bleu,
        max_len: ml,
    };
    crate::run::create_dir(&l.checkpoint_dir())?;
    let mut runs = Vec::new();
    for mode in modes {
        let model = CaptioningModel::new(encoder.clone(), decoder.clone(), vocabs.clone())?;
        let out = caption::finetune(model, &s_tr, &s_va, mode, &opts)?;
        let epoch = out.history.iter().find(|h| h.step == out.best_step).map_or(0, |h| h.epoch);
        let path = caption_ckpt(l, init, mode);
        let phase = format!("caption-{}-{mode}", init.name());
        checkpoint::save(&path, &[&out.model.encoder.params, &out.model.decoder.params], &manifest(l, phase, epoch, Some(out.best_bleu1), opts.train.seed))?;
        log.artifact(&path);
        eprintln!("finetune {} {mode}: best validation BLEU-1 {:.2} at step {} of {}", init.name(), out.best_bleu1, out.best_step, out.steps);
        runs.push(json!({ "init": init.name(), "mode": mode.to_string(), "best_step": out.best_step, "best_bleu1": out.best_bleu1, "history": out.history }));
    }
    log.trajectory = json!(runs);
    Ok(())
}

fn load_caption_model(l: &Loaded, init: Init, mode: Mode, vocabs: &BTreeMap<Language, Vocabulary>, stage: &'static str) -> Result<CaptioningModel<f32>> {
    let path = caption_ckpt(l, init, mode);
    let needs = format!("finetune --mode {mode} --init {}", init.name());
    let mut enc = Encoder::new(l.cfg.encoder.clone(), l.cfg.encoder_seed())?;
    restore_checked(l, &path, stage, needs.clone(), &mut enc.params, |n| n.starts_with("enc."))?;
    let mut dec = fresh_decoder(l, vocabs)?;
    dec.discard_pretraining_heads();
    restore_checked(l, &path, stage, needs, &mut dec.params, |n| !n.starts_with("enc."))?;
    Ok(CaptioningModel::new(enc, dec, vocabs.clone())?)
}

pub fn generate(l: &Loaded, log: &mut StageLog, mode: Option<&str>, init: Option<Init>, split: Option<Split>) -> Result<()> {
    let stage = "generate";
    let modes = modes(l, mode)?;
    let init = init.unwrap_or(l.cfg.finetune.init);
    let split = split.unwrap_or(l.cfg.generate.split);
    let vocabs = vocabs(l, stage)?;
    let (d, m) = dataset(l, stage)?;
    let ml = max_len(l, &d.split(&m, Split::Train).records.iter().collect::<Vec<_>>())?;
    let data = d.split(&m, split);
    if data.is_empty() {
        return Err(Error::Argument(format!("the {} split is empty", split.name())).into());
    }
    let mut summary = Vec::new();
    for mode in modes {
        let model = load_caption_model(l, init, mode, &vocabs, stage)?;
        let set = CaptionSet::prepare(&model, &data, ml)?;
        let langs = mode.languages(&l.cfg.languages)?;
        let (table, reports) = caption::evaluate_split(&model, &set, &langs, ml)?;
        let run = run_name(init, mode, split);
        let path = generated_path(l, &run);
        crate::run::create_dir(&l.output_dir())?;
        caption::write_reports(&path, &reports)?;
        log.artifact(&path);
        eprintln!("generate {run}: {} reports, mean BLEU-1 {:.2}", reports.len(), table.average().bleu1);
        summary.push(json!({ "run": run, "bleu1": table.average().bleu1 }));
    }
    log.trajectory = json!(summary);
    Ok(())
}

fn table_of(reports: &[GeneratedReport]) -> Result<MetricTable> {
    let mut by_lang: BTreeMap<Language, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for r in reports {
        let e = by_lang.entry(r.language).or_default();
        e.0.push(&r.text);
        e.1.push(&r.reference);
    }
    if by_lang.is_empty() {
        return Err(Error::Argument("no generated reports to score".into()).into());
    }
    let languages = by_lang.into_iter().map(|(lang, (c, r))| Ok((lang, caption::score_texts(&c, &r)?))).collect::<Result<_>>()?;
    Ok(MetricTable { languages })
}

fn file_id(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| CliError::io(path, e))?))
}

pub fn score(l: &Loaded, log: &mut StageLog, mode: Option<&str>, init: Option<Init>, split: Option<Split>, input: Option<&Path>) -> Result<()> {
    let split = split.unwrap_or(l.cfg.generate.split);
    let init = init.unwrap_or(l.cfg.finetune.init);
    let jobs: Vec<(PathBuf, String, Option<PathBuf>, String)> = match input {
        Some(p) => {
            let stem = p.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
            vec![(p.to_path_buf(), stem, None, "score".into())]
        }
        None => modes(l, mode)?
            .into_iter()
            .map(|m| {
                let run = run_name(init, m, split);
                (generated_path(l, &run), run, Some(caption_ckpt(l, init, m)), format!("generate --mode {m} --init {} --split {}", init.name(), split.name()))
            })
            .collect(),
    };
    for (source, run, ckpt, needs) in jobs {
        require(&source, "score", needs)?;
        let table = table_of(&caption::read_reports(&source)?)?;
        let csv = l.output_dir().join(format!("scores-{run}.csv"));
        crate::run::create_dir(&l.output_dir())?;
        table.write_csv(&csv)?;
        let checkpoint = match ckpt.filter(|p| p.exists()) {
            Some(p) => Some(file_id(&p)?),
            None => None,
        };
        let sidecar = csv.with_extension("json");
        let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned());
        write_json(&sidecar, &json!({ "seed": l.cfg.seed, "checkpoint": checkpoint, "input": name(&source), "split": split }))?;
        log.artifact(&csv);
        log.artifact(&sidecar);
        eprintln!("score {run}: mean BLEU-1 {:.2}", table.average().bleu1);
    }
    Ok(())
}

/// `(init, mode slug, split)` of a generated-report file name.
fn parse_run(run: &str) -> Option<(String, String, String)> {
    let (rest, split) = run.rsplit_once('-')?;
    let (init, mode) = rest.split_once('-')?;
    Some((init.into(), mode.into(), split.into()))
}

pub fn report(l: &Loaded, log: &mut StageLog) -> Result<()> {
    let out = l.output_dir();
    let mut runs: Vec<(String, Vec<GeneratedReport>)> = Vec::new();
    if let Ok(entries) = std::fs::read_dir(&out) {
        let mut names: Vec<String> = entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        for name in names {
            if let Some(run) = name.strip_prefix("generated-").and_then(|s| s.strip_suffix(".jsonl")) {
                runs.push((run.to_string(), caption::read_reports(&out.join(&name))?));
            }
        }
    }
    if runs.is_empty() {
        return Err(CliError::Dependency { stage: "report", path: out.join("generated-*.jsonl"), needs: "generate".into() });
    }

    let mut table_csv = String::from("run,language,bleu1,meteor,rougeL\n");
    let mut self_csv = String::from("run,language,self_bleu\n");
    let mut tables = BTreeMap::new();
    for (run, reports) in &runs {
        let table = table_of(reports)?;
        for line in table.to_csv().lines().skip(1) {
            table_csv.push_str(&format!("{run},{line}\n"));
        }
        for &lang in table.languages.keys() {
            let texts: Vec<&str> = reports.iter().filter(|r| r.language == lang).map(|r| r.text.as_str()).collect();
            if texts.len() >= 2 {
                self_csv.push_str(&format!("{run},{lang},{:.4}\n", self_bleu(&texts, SELF_BLEU_ORDER)?));
            }
        }
        tables.insert(run.clone(), table);
    }

    // Monolingual runs side by side with the multilingual run of the same
    // initialisation and split.
    let mut multi_csv = String::from("init,split,language,mono_bleu1,multi_bleu1,mono_meteor,multi_meteor,mono_rougeL,multi_rougeL\n");
    for (run, table) in &tables {
        let Some((init, mode, split)) = parse_run(run) else { continue };
        let Some(lang) = mode.strip_prefix("mono-") else { continue };
        let Some(multi) = tables.get(&format!("{init}-multi-{split}")) else { continue };
        let lang: Language = lang.parse()?;
        if let (Some(a), Some(b)) = (table.languages.get(&lang), multi.languages.get(&lang)) {
            multi_csv.push_str(&format!(
                "{init},{split},{lang},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                a.bleu1, b.bleu1, a.meteor, b.meteor, a.rouge_l, b.rouge_l
            ));
        }
    }

    for (name, body) in [("report.csv", &table_csv), ("self_bleu.csv", &self_csv), ("multilinguality.csv", &multi_csv)] {
        let path = out.join(name);
        write_file(&path, body)?;
        log.artifact(&path);
    }
    log.trajectory = json!(runs.iter().map(|(r, _)| r).collect::<Vec<_>>());
    eprintln!("report: {} run(s) summarised in {}", runs.len(), out.display());
    Ok(())
}
