//! Run configuration: one TOML file per experiment.

use std::path::{Path, PathBuf};

use cardiocap::decoder::DecoderConfig;
use cardiocap::encoder::EncoderConfig;
use cardiocap::pretrain::SamplerConfig;
use cardiocap::train::TrainConfig;
use cardiocap::Language;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "all_languages")]
    pub languages: Vec<Language>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub seeds: PhaseSeeds,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub translate: TranslateSection,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub train: TrainSections,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub generate: GenerateSection,
}

fn all_languages() -> Vec<Language> {
    Language::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data: "data".into(), checkpoints: "checkpoints".into(), outputs: "outputs".into() }
    }
}

/// Per-phase seeds; unset phases derive theirs from the global seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSeeds {
    pub split: Option<u64>,
    pub encoder: Option<u64>,
    pub decoder: Option<u64>,
    pub finetune: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub patients: usize,
    pub grammar_seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { patients: 500, grammar_seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub fractions: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { fractions: [0.8, 0.1, 0.1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Report file, relative to the data directory, read by every stage
    /// after `synth`/`ingest`.
    pub reports: PathBuf,
    /// Token budget including the start and end markers. Defaults to the
    /// longest training report plus two.
    pub max_len: Option<usize>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { reports: "reports.jsonl".into(), max_len: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub min_count: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection { min_count: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslateSection {
    /// Only `mock` (the dictionary provider) ships with this tool.
    pub provider: String,
    /// Phrase tables; the synthetic tables when unset.
    pub dictionary: Option<PathBuf>,
    pub source: Language,
    pub max_iters: usize,
    /// Probability that a single mock call actually translates.
    pub success: f64,
    /// Output report file, relative to the data directory.
    pub output: PathBuf,
}

impl Default for TranslateSection {
    fn default() -> Self {
        TranslateSection {
            provider: "mock".into(),
            dictionary: None,
            source: Language::En,
            max_iters: 5,
            success: 1.0,
            output: "translated.jsonl".into(),
        }
    }
}

/// Optimiser settings of one phase; unset fields take the phase defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseTrain {
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

impl PhaseTrain {
    fn resolve(&self, base: TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            lr: self.lr.unwrap_or(base.lr),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            patience: self.patience.unwrap_or(base.patience),
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSections {
    pub encoder: PhaseTrain,
    pub pretrain: PhaseTrain,
    pub finetune: PhaseTrain,
}

/// How the captioning decoder is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Random,
    Rtlp,
    Mlm,
    Electra,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::Random => "random",
            Init::Rtlp => "rtlp",
            Init::Mlm => "mlm",
            Init::Electra => "electra",
        }
    }

    pub fn task(self) -> Option<cardiocap::pretrain::Task> {
        use cardiocap::pretrain::Task;
        match self {
            Init::Random => None,
            Init::Rtlp => Some(Task::Rtlp),
            Init::Mlm => Some(Task::Mlm),
            Init::Electra => Some(Task::Electra),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub init: Init,
    /// Modes run when `--mode` is not given: `multi` or `mono:<lang>`.
    pub modes: Vec<String>,
    pub eval_every: Option<usize>,
    pub max_steps: Option<usize>,
    pub target_bleu: Option<f64>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection { init: Init::Rtlp, modes: vec!["multi".into()], eval_every: None, max_steps: None, target_bleu: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub split: cardiocap::corpus::Split,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection { split: cardiocap::corpus::Split::Test }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A parsed configuration together with the directory its relative paths
/// are resolved against.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub cfg: RunConfig,
    pub root: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Ok(s) = std::env::var("RTLP_SEED") {
            cfg.seed = s.trim().parse().map_err(|_| CliError::Config(format!("RTLP_SEED={s:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        let root = path.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok(Loaded { cfg, root })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.data)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.checkpoints)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.outputs)
    }

    pub fn signals(&self) -> PathBuf {
        self.data_dir().join("signals")
    }

    pub fn reports(&self) -> PathBuf {
        self.data_dir().join(&self.cfg.corpus.reports)
    }

    pub fn splits(&self) -> PathBuf {
        self.data_dir().join("splits.json")
    }

    pub fn standardizer(&self) -> PathBuf {
        self.data_dir().join("standardizer.json")
    }

    pub fn dictionary(&self) -> PathBuf {
        match &self.cfg.translate.dictionary {
            Some(p) => self.resolve(p),
            None => self.data_dir().join("dictionary.json"),
        }
    }

    pub fn vocab(&self, lang: Language) -> PathBuf {
        self.data_dir().join("vocab").join(format!("{lang}.json"))
    }

    pub fn lock_file(&self) -> PathBuf {
        self.root.join(".cardiocap.lock")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.languages.is_empty() {
            return bad("languages must not be empty".into());
        }
        let mut sorted = self.languages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.languages.len() {
            return bad("languages contain duplicates".into());
        }
        if self.encoder.feature_dim != self.decoder.width {
            return bad(format!("encoder.feature_dim {} must equal decoder.width {}", self.encoder.feature_dim, self.decoder.width));
        }
        if self.synth.patients == 0 {
            return bad("synth.patients must be positive".into());
        }
        if self.translate.provider != "mock" {
            return bad(format!("unknown translation provider {:?}; only \"mock\" is available", self.translate.provider));
        }
        if !(0.0..=1.0).contains(&self.translate.success) {
            return bad(format!("translate.success {} outside [0, 1]", self.translate.success));
        }
        for m in &self.finetune.modes {
            self.mode(m)?;
        }
        if let Some(l) = self.corpus.max_len.filter(|&l| l < 3) {
            return bad(format!("corpus.max_len {l} is below 3"));
        }
        self.encoder.validate().map_err(CliError::core)?;
        self.decoder.validate().map_err(CliError::core)?;
        self.sampler.validate().map_err(CliError::core)?;
        for phase in [self.encoder_train(), self.pretrain_train(), self.finetune_train()] {
            phase.validate().map_err(CliError::core)?;
        }
        Ok(())
    }

    pub fn mode(&self, s: &str) -> Result<cardiocap::caption::Mode, CliError> {
        let mode: cardiocap::caption::Mode = s.parse().map_err(|e: cardiocap::Error| CliError::Config(e.to_string()))?;
        mode.languages(&self.languages).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(mode)
    }

    pub fn split_seed(&self) -> u64 {
        self.seeds.split.unwrap_or(self.seed)
    }

    pub fn encoder_seed(&self) -> u64 {
        self.seeds.encoder.unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn decoder_seed(&self) -> u64 {
        self.seeds.decoder.unwrap_or(self.seed.wrapping_add(2))
    }

    pub fn finetune_seed(&self) -> u64 {
        self.seeds.finetune.unwrap_or(self.seed.wrapping_add(3))
    }

    pub fn encoder_train(&self) -> TrainConfig {
        self.train.encoder.resolve(TrainConfig::encoder(), self.encoder_seed())
    }

    pub fn pretrain_train(&self) -> TrainConfig {
        self.train.pretrain.resolve(TrainConfig::pretrain(), self.decoder_seed())
    }

    pub fn finetune_train(&self) -> TrainConfig {
        self.train.finetune.resolve(TrainConfig::finetune(), self.finetune_seed())
    }

    /// Hash of the whole configuration (after environment overrides).
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    /// Hash of the settings that fix parameter shapes. Checkpoints carry it
    /// so that loading into a differently shaped model is refused early.
    pub fn architecture_hash(&self) -> String {
        let arch = serde_json::json!({
            "languages": self.languages,
            "vocab": self.vocab,
            "encoder": self.encoder,
            "decoder": self.decoder,
        });
        sha256_hex(arch.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_table_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.languages.len(), 7);
        let (e, p, f) = (cfg.encoder_train(), cfg.pretrain_train(), cfg.finetune_train());
        assert_eq!((e.batch_size, e.lr, e.patience), (128, 1e-5, 10));
        assert_eq!((p.batch_size, p.lr, p.patience), (128, 1e-3, 25));
        assert_eq!((f.batch_size, f.lr), (128, 1e-3));
        assert_eq!((cfg.decoder.width, cfg.decoder.layers, cfg.decoder.heads), (300, 4, 4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[decoder]\nwidht = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train.encoder]\nlr = 0.1\nmomentum = 0.9").is_err());
    }

    #[test]
    fn partial_phase_settings_keep_other_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 4\n[train.pretrain]\nmax_epochs = 3\n").unwrap();
        let p = cfg.pretrain_train();
        assert_eq!((p.max_epochs, p.batch_size, p.seed), (3, 128, 6));
    }

    #[test]
    fn mismatched_widths_and_modes_fail_validation() {
        let cfg: RunConfig = toml::from_str("[decoder]\nwidth = 64\n").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let cfg: RunConfig = toml::from_str("languages = [\"en\"]\n[finetune]\nmodes = [\"mono:fr\"]\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn architecture_hash_ignores_training_settings() {
        let a: RunConfig = toml::from_str("").unwrap();
        let b: RunConfig = toml::from_str("[train.finetune]\nlr = 0.01\n").unwrap();
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        assert_ne!(a.hash(), b.hash());
    }
}
