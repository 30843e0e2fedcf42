//! End-to-end runs driven by one TOML file.
//!
//! Every stage reads named artifacts from the output directory and writes
//! its own, each with a `<artifact>.prov.json` record holding the stage
//! seed, a hash of the stage's resolved config and the fingerprints of its
//! inputs and output. A stage refuses inputs whose bytes no longer match
//! the fingerprint in their provenance record.
//!
//! Stage seeds come from the global seed: the first eight bytes
//! (little-endian) of `sha256(seed.to_le_bytes() ‖ stage name)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusConfig, CorpusSplits};
use crate::degrade::{corrupt, CorruptionReport, CorruptionSpec, NoiseKind};
use crate::distill::{
    full_distill_train, recover_lora_train, sft_lora_train, Mode, TeacherCache, TrainConfig,
    TrainLog,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, join_reports, sweep_ar, EvalConfig, EvalReport, EvalSuite, SweepCurve, SweepError,
};
use crate::lora::{AdaptedModel, AdapterSet, LoraConfig, TargetSet};
use crate::persist::{sha256_hex, write_atomic, Checkpoint, Dataset};
use crate::syndata::{generate_with_fingerprint, prefix_sizes, SamplerConfig};
use crate::transformer::{
    train_teacher, LanguageModel, ModelConfig, TeacherTrainConfig, Transformer,
};

pub const TEACHER: &str = "teacher.ckpt";
pub const CORRUPTED: &str = "corrupted.ckpt";
pub const SYNTHETIC: &str = "synthetic.rlds";
pub const TRAIN_SPLIT: &str = "corpus/train.rlds";
pub const LABELED_SPLIT: &str = "corpus/labeled.rlds";
pub const HOLDOUT_SPLIT: &str = "corpus/holdout.rlds";
pub const RECOVER_ADAPTERS: &str = "recover.adapter.ckpt";
pub const FULL_DISTILL: &str = "full_distill.ckpt";
pub const SFT_ADAPTERS: &str = "sft.adapter.ckpt";
pub const REPORT: &str = "report.txt";
pub const SWEEP_CURVE: &str = "sweep.tsv";
pub const SWEEP_SYNTHETIC: &str = "sweep/synthetic.rlds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub train_docs: usize,
    pub labeled_docs: usize,
    pub holdout_docs: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            train_docs: c.train_docs,
            labeled_docs: c.labeled_docs,
            holdout_docs: c.holdout_docs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherTrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSection {
    pub target_patterns: Vec<String>,
    pub noise_kind: NoiseKind,
    pub relative_scale: f64,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        let c = CorruptionSpec::default();
        Self {
            target_patterns: c.target_patterns,
            noise_kind: c.noise_kind,
            relative_scale: c.relative_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub n_greedy: usize,
    pub max_len: Option<usize>,
    pub temperature: f64,
    pub n_samples: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            n_greedy: s.n_greedy,
            max_len: s.max_len,
            temperature: s.temperature,
            n_samples: s.n_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub targets: TargetSet,
    pub init_std_a: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        let l = LoraConfig::desk();
        Self {
            rank: l.rank,
            alpha: l.alpha,
            targets: l.targets,
            init_std_a: l.init_std_a,
        }
    }
}

/// Overrides on top of a training mode's preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub grad_accum: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub cache_teacher: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub choice_items: usize,
    pub choices: usize,
    pub perplexity_records: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            choice_items: e.choice_items,
            choices: e.choices,
            perplexity_records: e.perplexity_records,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub sizes: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            sizes: vec![1000, 2000, 4000, 8000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub corruption: CorruptionSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub lora: LoraSection,
    #[serde(default)]
    pub recover: TrainSection,
    #[serde(default)]
    pub full_distill: TrainSection,
    #[serde(default)]
    pub sft: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

impl RunConfig {
    /// The desk defaults writing to `output_dir`.
    pub fn desk(output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            seed,
            output_dir: output_dir.into(),
            model: ModelConfig::desk(),
            corpus: CorpusSection::default(),
            teacher: TeacherSection::default(),
            corruption: CorruptionSection::default(),
            sampler: SamplerSection::default(),
            lora: LoraSection::default(),
            recover: TrainSection::default(),
            full_distill: TrainSection::default(),
            sft: TrainSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::RunConfig(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn seed_for(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            train_docs: self.corpus.train_docs,
            labeled_docs: self.corpus.labeled_docs,
            holdout_docs: self.corpus.holdout_docs,
            seed: self.seed_for("corpus"),
        }
    }

    pub fn teacher_config(&self) -> TeacherTrainConfig {
        TeacherTrainConfig {
            steps: self.teacher.steps,
            batch_size: self.teacher.batch_size,
            lr: self.teacher.lr,
            warmup_steps: self.teacher.warmup_steps,
            weight_decay: self.teacher.weight_decay,
            seed: self.seed_for("teacher"),
        }
    }

    pub fn corruption_spec(&self) -> CorruptionSpec {
        CorruptionSpec {
            target_patterns: self.corruption.target_patterns.clone(),
            noise_kind: self.corruption.noise_kind,
            relative_scale: self.corruption.relative_scale,
            seed: self.seed_for("corruption"),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_greedy: self.sampler.n_greedy,
            max_len: self.sampler.max_len,
            temperature: self.sampler.temperature,
            seed: self.seed_for("sampler"),
            n_samples: self.sampler.n_samples,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora.rank,
            alpha: self.lora.alpha,
            targets: self.lora.targets.clone(),
            init_std_a: self.lora.init_std_a,
            seed: self.seed_for("lora"),
        }
    }

    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        let (section, stage) = match mode {
            Mode::RecoverLora => (&self.recover, "recover"),
            Mode::FullDistill => (&self.full_distill, "full_distill"),
            Mode::SftLora => (&self.sft, "sft"),
        };
        let base = TrainConfig::for_mode(mode);
        TrainConfig {
            lr: section.lr.unwrap_or(base.lr),
            epochs: section.epochs.unwrap_or(base.epochs),
            batch_size: section.batch_size.unwrap_or(base.batch_size),
            grad_accum: section.grad_accum.unwrap_or(base.grad_accum),
            warmup_steps: section.warmup_steps.unwrap_or(base.warmup_steps),
            cache_teacher: section.cache_teacher.unwrap_or(base.cache_teacher),
            seed: self.seed_for(stage),
            lora: base.lora.map(|_| self.lora_config()),
            ..base
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            choice_items: self.eval.choice_items,
            choices: self.eval.choices,
            perplexity_records: self.eval.perplexity_records,
            seed: self.seed_for("eval"),
        }
    }
}

/// A model ready for evaluation, its trainable-parameter count and its
/// input artifacts with their fingerprints.
type Loaded = (Box<dyn LanguageModel>, usize, Vec<(String, String)>);

/// Models that can be evaluated and reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelLabel {
    Teacher,
    Corrupted,
    Recover,
    FullDistill,
    Sft,
}

impl ModelLabel {
    pub const ALL: [Self; 5] = [
        Self::Teacher,
        Self::Corrupted,
        Self::Recover,
        Self::FullDistill,
        Self::Sft,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Corrupted => "corrupted",
            Self::Recover => "recover",
            Self::FullDistill => "full_distill",
            Self::Sft => "sft",
        }
    }

    fn method(self) -> &'static str {
        match self {
            Self::Teacher => "original",
            Self::Corrupted => "degraded",
            Self::Recover => "recover_lora",
            Self::FullDistill => "full_distill",
            Self::Sft => "sft_lora",
        }
    }

    pub fn report_path(self) -> String {
        format!("eval/{}.json", self.as_str())
    }
}

impl FromStr for ModelLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown model {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    /// Input artifact path → fingerprint.
    pub inputs: BTreeMap<String, String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSummary {
    pub initial_perplexity: f64,
    pub perplexity: f64,
}

/// A run rooted at `config.output_dir`.
pub struct Pipeline {
    pub config: RunConfig,
    cache: Option<TeacherCache>,
}

fn config_hash(value: &impl Serialize) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serialises"))
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        Self {
            config,
            cache: None,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn prov_path(&self, name: &str) -> PathBuf {
        self.path(&format!("{name}.prov.json"))
    }

    fn write_artifact(
        &self,
        name: &str,
        bytes: &[u8],
        stage: &str,
        seed: u64,
        config: &impl Serialize,
        inputs: &[(&str, &str)],
    ) -> Result<String> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&path, bytes)?;
        let output = sha256_hex(bytes);
        let prov = Provenance {
            stage: stage.to_string(),
            seed,
            config_hash: config_hash(config),
            inputs: inputs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            output: output.clone(),
        };
        let json = serde_json::to_vec_pretty(&prov).expect("provenance serialises");
        write_atomic(&self.prov_path(name), &json)?;
        Ok(output)
    }

    /// Bytes and fingerprint of an artifact, checked against its provenance.
    fn read_artifact(&self, name: &str) -> Result<(Vec<u8>, String)> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let prov_path = self.prov_path(name);
        if !prov_path.exists() {
            return Err(Error::MissingArtifact(prov_path));
        }
        let bytes = fs::read(&path)?;
        let prov: Provenance = serde_json::from_slice(&fs::read(&prov_path)?)
            .map_err(|e| Error::Invalid(format!("{}: {e}", prov_path.display())))?;
        let actual = sha256_hex(&bytes);
        if actual != prov.output {
            return Err(Error::FingerprintMismatch {
                what: name.to_string(),
                expected: prov.output,
                actual,
            });
        }
        Ok((bytes, actual))
    }

    pub fn provenance(&self, name: &str) -> Result<Provenance> {
        let p = self.prov_path(name);
        let bytes = fs::read(&p).map_err(|_| Error::MissingArtifact(p.clone()))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))
    }

    fn read_checkpoint(&self, name: &str) -> Result<(Checkpoint, String)> {
        let (bytes, fp) = self.read_artifact(name)?;
        Ok((Checkpoint::decode(&bytes)?, fp))
    }

    fn read_model(&self, name: &str) -> Result<(Transformer, String)> {
        let (ck, fp) = self.read_checkpoint(name)?;
        let config = ck
            .config
            .ok_or_else(|| Error::Invalid(format!("{name} has no model config")))?;
        if config != self.config.model {
            return Err(Error::ConfigMismatch(format!(
                "{name} was built for a different model config"
            )));
        }
        Ok((Transformer::new(config, ck.weights)?, fp))
    }

    fn read_dataset(&self, name: &str) -> Result<(Dataset, String)> {
        let (bytes, fp) = self.read_artifact(name)?;
        Ok((Dataset::decode(&bytes)?, fp))
    }

    /// Reads adapters and checks they were trained on the current corrupted model.
    fn read_adapters(&self, name: &str, base_fp: &str) -> Result<(AdapterSet, String)> {
        let (ck, fp) = self.read_checkpoint(name)?;
        let recorded = ck.metadata.get("base").cloned().unwrap_or_default();
        if recorded != base_fp {
            return Err(Error::FingerprintMismatch {
                what: format!("base model of {name}"),
                expected: base_fp.to_string(),
                actual: recorded,
            });
        }
        Ok((AdapterSet::from_checkpoint(&ck)?, fp))
    }

    /// Generates the corpus splits and pretrains the teacher.
    pub fn train_teacher(&mut self) -> Result<TeacherSummary> {
        let cfg = &self.config;
        cfg.model.validate()?;
        let corpus_cfg = cfg.corpus_config();
        let splits = CorpusSplits::generate(&corpus_cfg)?;
        let mut fps = BTreeMap::new();
        for (name, split) in [
            (TRAIN_SPLIT, "train"),
            (LABELED_SPLIT, "labeled"),
            (HOLDOUT_SPLIT, "holdout"),
        ] {
            let ds = splits.dataset(split, corpus_cfg.seed)?;
            let fp = self.write_artifact(
                name,
                &ds.encode(),
                "corpus",
                corpus_cfg.seed,
                &corpus_cfg,
                &[],
            )?;
            fps.insert(name, fp);
        }
        let tcfg = cfg.teacher_config();
        let weights = train_teacher(&cfg.model, &splits.train, &tcfg)?;
        let teacher = Transformer::new(cfg.model.clone(), weights)?;
        let init = Transformer::init(cfg.model.clone(), tcfg.seed)?;
        let summary = TeacherSummary {
            initial_perplexity: crate::eval::perplexity(&init, &splits.holdout)?,
            perplexity: crate::eval::perplexity(&teacher, &splits.holdout)?,
        };
        let mut ck = Checkpoint::model(teacher.config, teacher.weights);
        ck.metadata.insert(
            "initial_holdout_perplexity".into(),
            format!("{:.6}", summary.initial_perplexity),
        );
        ck.metadata.insert(
            "holdout_perplexity".into(),
            format!("{:.6}", summary.perplexity),
        );
        self.write_artifact(
            TEACHER,
            &ck.encode(),
            "teacher",
            tcfg.seed,
            &(&cfg.model, &tcfg),
            &[(TRAIN_SPLIT, &fps[TRAIN_SPLIT])],
        )?;
        self.cache = None;
        Ok(summary)
    }

    /// Corrupts the saved teacher into the degraded student.
    pub fn corrupt(&mut self) -> Result<CorruptionReport> {
        let (_, teacher_fp) = self.read_artifact(TEACHER)?;
        let spec = self.config.corruption_spec();
        let out = self.path(CORRUPTED);
        let report = corrupt(self.path(TEACHER), &spec, &out)?;
        let bytes = fs::read(&out)?;
        let fp = self.write_artifact(
            CORRUPTED,
            &bytes,
            "corruption",
            spec.seed,
            &spec,
            &[(TEACHER, &teacher_fp)],
        )?;
        let inputs = [(CORRUPTED, fp.as_str())];
        let table = report.render_table();
        self.write_artifact(
            "corruption.txt",
            table.as_bytes(),
            "corruption",
            spec.seed,
            &spec,
            &inputs,
        )?;
        let json = serde_json::to_vec_pretty(&report).expect("report serialises");
        self.write_artifact(
            "corruption.json",
            &json,
            "corruption",
            spec.seed,
            &spec,
            &inputs,
        )?;
        Ok(report)
    }

    /// Samples the synthetic distillation corpus from the teacher.
    pub fn gen_data(&mut self) -> Result<Dataset> {
        let (teacher, teacher_fp) = self.read_model(TEACHER)?;
        let scfg = self.config.sampler_config();
        let ds =
            generate_with_fingerprint(&teacher, &self.config.model, &scfg, teacher_fp.clone())?;
        self.write_artifact(
            SYNTHETIC,
            &ds.encode(),
            "sampler",
            scfg.seed,
            &scfg,
            &[(TEACHER, &teacher_fp)],
        )?;
        Ok(ds)
    }

    fn synthetic_for(&self, teacher_fp: &str) -> Result<(Dataset, String)> {
        let (ds, fp) = self.read_dataset(SYNTHETIC)?;
        let generator = ds.header.generator_fingerprint.clone().unwrap_or_default();
        if generator != teacher_fp {
            return Err(Error::FingerprintMismatch {
                what: format!("generator of {SYNTHETIC}"),
                expected: teacher_fp.to_string(),
                actual: generator,
            });
        }
        Ok((ds, fp))
    }

    fn cache_for(&mut self, teacher: &Transformer, enabled: bool) -> Option<&mut TeacherCache> {
        if !enabled {
            return None;
        }
        let fp = crate::distill::teacher_fingerprint(teacher);
        if self.cache.as_ref().is_none_or(|c| c.teacher() != fp) {
            self.cache = Some(TeacherCache::new(teacher));
        }
        self.cache.as_mut()
    }

    fn save_adapters(
        &self,
        name: &str,
        set: &AdapterSet,
        base_fp: &str,
        cfg: &TrainConfig,
        inputs: &[(&str, &str)],
    ) -> Result<String> {
        let mut ck = set.to_checkpoint();
        ck.metadata.insert("base".into(), base_fp.to_string());
        self.write_artifact(name, &ck.encode(), cfg.mode.as_str(), cfg.seed, cfg, inputs)
    }

    fn write_log(&self, name: &str, log: &TrainLog) -> Result<()> {
        let path = self.path(name);
        write_atomic(&path, log.to_tsv().as_bytes())?;
        Ok(())
    }

    /// Trains distillation adapters on `data`, a prefix of the synthetic corpus.
    fn recover_on(&mut self, data: &Dataset) -> Result<(AdapterSet, TrainLog, [String; 2])> {
        let (teacher, teacher_fp) = self.read_model(TEACHER)?;
        let (student, student_fp) = self.read_model(CORRUPTED)?;
        let cfg = self.config.train_config(Mode::RecoverLora);
        let cache = self.cache_for(&teacher, cfg.cache_teacher);
        let (set, log) = recover_lora_train(&teacher, &student, data, &cfg, cache)?;
        Ok((set, log, [teacher_fp, student_fp]))
    }

    /// Distills LoRA adapters into the corrupted model.
    pub fn recover(&mut self) -> Result<(AdapterSet, TrainLog)> {
        let (_, teacher_fp) = self.read_artifact(TEACHER)?;
        let (data, data_fp) = self.synthetic_for(&teacher_fp)?;
        let (set, log, [teacher_fp, student_fp]) = self.recover_on(&data)?;
        let cfg = self.config.train_config(Mode::RecoverLora);
        self.save_adapters(
            RECOVER_ADAPTERS,
            &set,
            &student_fp,
            &cfg,
            &[
                (TEACHER, &teacher_fp),
                (CORRUPTED, &student_fp),
                (SYNTHETIC, &data_fp),
            ],
        )?;
        self.write_log("recover.log.tsv", &log)?;
        Ok((set, log))
    }

    /// Full-parameter distillation baseline.
    pub fn distill_full(&mut self) -> Result<TrainLog> {
        let (teacher, teacher_fp) = self.read_model(TEACHER)?;
        let (student, student_fp) = self.read_model(CORRUPTED)?;
        let (data, data_fp) = self.synthetic_for(&teacher_fp)?;
        let cfg = self.config.train_config(Mode::FullDistill);
        let cache = self.cache_for(&teacher, cfg.cache_teacher);
        let (weights, log) = full_distill_train(&teacher, &student, &data, &cfg, cache)?;
        let ck = Checkpoint::model(self.config.model.clone(), weights);
        self.write_artifact(
            FULL_DISTILL,
            &ck.encode(),
            cfg.mode.as_str(),
            cfg.seed,
            &cfg,
            &[
                (TEACHER, &teacher_fp),
                (CORRUPTED, &student_fp),
                (SYNTHETIC, &data_fp),
            ],
        )?;
        self.write_log("full_distill.log.tsv", &log)?;
        Ok(log)
    }

    /// Cross-entropy adapter baseline on the labeled split.
    pub fn sft_lora(&mut self) -> Result<TrainLog> {
        let (student, student_fp) = self.read_model(CORRUPTED)?;
        let (labeled, labeled_fp) = self.read_dataset(LABELED_SPLIT)?;
        let cfg = self.config.train_config(Mode::SftLora);
        let (set, log) = sft_lora_train(&student, &labeled, &cfg)?;
        self.save_adapters(
            SFT_ADAPTERS,
            &set,
            &student_fp,
            &cfg,
            &[(CORRUPTED, &student_fp), (LABELED_SPLIT, &labeled_fp)],
        )?;
        self.write_log("sft.log.tsv", &log)?;
        Ok(log)
    }

    /// Holdout suite, calibrated on the teacher.
    pub fn eval_suite(&self) -> Result<(EvalSuite, String)> {
        let (holdout, holdout_fp) = self.read_dataset(HOLDOUT_SPLIT)?;
        let (teacher, _) = self.read_model(TEACHER)?;
        let mut suite = EvalSuite::build(&holdout.records, &self.config.eval_config())?;
        suite.calibrate(&teacher)?;
        Ok((suite, holdout_fp))
    }

    fn load_labeled(&self, label: ModelLabel) -> Result<Loaded> {
        let adapted = |name: &str| -> Result<Loaded> {
            let (base, base_fp) = self.read_model(CORRUPTED)?;
            let (set, fp) = self.read_adapters(name, &base_fp)?;
            let count = set.param_count();
            let model = AdaptedModel::from_parts(base, set)?;
            Ok((
                Box::new(model),
                count,
                vec![(CORRUPTED.into(), base_fp), (name.into(), fp)],
            ))
        };
        match label {
            ModelLabel::Teacher | ModelLabel::Corrupted => {
                let name = if label == ModelLabel::Teacher {
                    TEACHER
                } else {
                    CORRUPTED
                };
                let (m, fp) = self.read_model(name)?;
                Ok((Box::new(m), 0, vec![(name.into(), fp)]))
            }
            ModelLabel::FullDistill => {
                let (m, fp) = self.read_model(FULL_DISTILL)?;
                let count = m.config.param_count();
                Ok((Box::new(m), count, vec![(FULL_DISTILL.into(), fp)]))
            }
            ModelLabel::Recover => adapted(RECOVER_ADAPTERS),
            ModelLabel::Sft => adapted(SFT_ADAPTERS),
        }
    }

    fn evaluate_label(
        &self,
        label: ModelLabel,
        suite: &EvalSuite,
        holdout_fp: &str,
        baseline: Option<(f64, f64)>,
    ) -> Result<EvalReport> {
        let (model, params, inputs) = self.load_labeled(label)?;
        let mut report = evaluate(model.as_ref(), suite, label.as_str())?;
        report.method = label.method().to_string();
        report.trainable_params = params;
        if let Some((e_s, e_t)) = baseline {
            report = report.with_ar(e_s, e_t)?;
        }
        let mut inputs: Vec<(&str, &str)> = inputs
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        inputs.push((HOLDOUT_SPLIT, holdout_fp));
        let json = serde_json::to_vec_pretty(&report).expect("report serialises");
        let ecfg = self.config.eval_config();
        self.write_artifact(
            &label.report_path(),
            &json,
            "eval",
            ecfg.seed,
            &ecfg,
            &inputs,
        )?;
        Ok(report)
    }

    /// Evaluates the teacher and corrupted models plus each requested label;
    /// recovered models get an AR% block.
    pub fn eval(&mut self, labels: &[ModelLabel]) -> Result<Vec<EvalReport>> {
        let (suite, holdout_fp) = self.eval_suite()?;
        let teacher = self.evaluate_label(ModelLabel::Teacher, &suite, &holdout_fp, None)?;
        let corrupted = self.evaluate_label(ModelLabel::Corrupted, &suite, &holdout_fp, None)?;
        let baseline = (corrupted.average, teacher.average);
        let mut out = vec![teacher, corrupted];
        for &label in labels {
            if matches!(label, ModelLabel::Teacher | ModelLabel::Corrupted) {
                continue;
            }
            out.push(self.evaluate_label(label, &suite, &holdout_fp, Some(baseline))?);
        }
        Ok(out)
    }

    /// Joins every saved evaluation report into one table.
    pub fn report(&self) -> Result<String> {
        let mut reports = Vec::new();
        let mut inputs = Vec::new();
        for label in ModelLabel::ALL {
            let name = label.report_path();
            if !self.path(&name).exists() {
                continue;
            }
            let (bytes, fp) = self.read_artifact(&name)?;
            let report: EvalReport = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Invalid(format!("{name}: {e}")))?;
            reports.push(report);
            inputs.push((name, fp));
        }
        let table = join_reports(&reports)?;
        let inputs: Vec<(&str, &str)> = inputs
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        self.write_artifact(
            REPORT,
            table.as_bytes(),
            "report",
            self.config.seed,
            &self.config.seed,
            &inputs,
        )?;
        Ok(table)
    }

    /// The synthetic corpus, extended to the largest sweep size if the saved
    /// one is shorter. Record `i` depends only on the sampler seed and `i`, so
    /// the saved corpus is a prefix of the extension.
    fn sweep_corpus(&self, teacher_fp: &str) -> Result<(Dataset, &'static str, String)> {
        let (data, fp) = self.synthetic_for(teacher_fp)?;
        let need = self.config.sweep.sizes.iter().copied().max().unwrap_or(0);
        if need <= data.len() {
            return Ok((data, SYNTHETIC, fp));
        }
        let (teacher, _) = self.read_model(TEACHER)?;
        let scfg = SamplerConfig {
            n_samples: need,
            ..self.config.sampler_config()
        };
        let ds =
            generate_with_fingerprint(&teacher, &self.config.model, &scfg, teacher_fp.to_string())?;
        if ds.records[..data.len()] != data.records[..] {
            return Err(Error::Invalid(format!(
                "{SYNTHETIC} is not a prefix of the extended corpus"
            )));
        }
        let fp = self.write_artifact(
            SWEEP_SYNTHETIC,
            &ds.encode(),
            "sampler",
            scfg.seed,
            &scfg,
            &[(TEACHER, teacher_fp)],
        )?;
        Ok((ds, SWEEP_SYNTHETIC, fp))
    }

    /// One recovery run per synthetic-corpus prefix size, each evaluated
    /// against the teacher and corrupted baselines.
    pub fn sweep(&mut self) -> std::result::Result<(SweepCurve, Vec<EvalReport>), SweepError> {
        let wrap = |source: Error| SweepError {
            size: 0,
            partial: SweepCurve::default(),
            source,
        };
        let (_, teacher_fp) = self.read_artifact(TEACHER).map_err(wrap)?;
        let (data, data_name, data_fp) = self.sweep_corpus(&teacher_fp).map_err(wrap)?;
        let (suite, holdout_fp) = self.eval_suite().map_err(wrap)?;
        let baseline = {
            let t = self.load_labeled(ModelLabel::Teacher).map_err(wrap)?;
            let c = self.load_labeled(ModelLabel::Corrupted).map_err(wrap)?;
            let e_t = evaluate(t.0.as_ref(), &suite, "teacher")
                .map_err(wrap)?
                .average;
            let e_s = evaluate(c.0.as_ref(), &suite, "corrupted")
                .map_err(wrap)?
                .average;
            (e_s, e_t)
        };
        let sizes = self.config.sweep.sizes.clone();
        let mut reports = Vec::new();
        let curve = sweep_ar(&sizes, |size| {
            let subset = prefix_sizes(&data, &[size])?.remove(0);
            let (set, log, [t_fp, s_fp]) = self.recover_on(&subset)?;
            let cfg = self.config.train_config(Mode::RecoverLora);
            let name = format!("sweep/size_{size}.adapter.ckpt");
            let adapter_fp = self.save_adapters(
                &name,
                &set,
                &s_fp,
                &cfg,
                &[(TEACHER, &t_fp), (CORRUPTED, &s_fp), (data_name, &data_fp)],
            )?;
            self.write_log(&format!("sweep/size_{size}.log.tsv"), &log)?;
            let (base, _) = self.read_model(CORRUPTED)?;
            let model = AdaptedModel::from_parts(base, set)?;
            let mut report = evaluate(&model, &suite, &format!("recover_{size}"))?;
            report.method = ModelLabel::Recover.method().to_string();
            report.trainable_params = log.trainable_params;
            let report = report.with_ar(baseline.0, baseline.1)?;
            let json = serde_json::to_vec_pretty(&report).expect("report serialises");
            let ecfg = self.config.eval_config();
            self.write_artifact(
                &format!("sweep/size_{size}.json"),
                &json,
                "eval",
                ecfg.seed,
                &ecfg,
                &[(name.as_str(), &adapter_fp), (HOLDOUT_SPLIT, &holdout_fp)],
            )?;
            let ar = report.ar.map(|a| a.ar_percent).unwrap_or(f64::NAN);
            reports.push(report);
            Ok(ar)
        })?;
        self.write_artifact(
            SWEEP_CURVE,
            curve.to_tsv().as_bytes(),
            "sweep",
            self.config.seed,
            &sizes,
            &[(data_name, &data_fp)],
        )
        .map_err(|source| SweepError {
            size: 0,
            partial: curve.clone(),
            source,
        })?;
        Ok((curve, reports))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_stable_and_distinct() {
        assert_eq!(stage_seed(7, "teacher"), stage_seed(7, "teacher"));
        assert_ne!(stage_seed(7, "teacher"), stage_seed(7, "sampler"));
        assert_ne!(stage_seed(7, "teacher"), stage_seed(8, "teacher"));
    }

    #[test]
    fn strict_parsing() {
        let cfg =
            RunConfig::from_toml("seed = 3\noutput_dir = \"out\"\n[lora]\nrank = 4\n").unwrap();
        assert_eq!(cfg.lora.rank, 4);
        assert_eq!(cfg.model, ModelConfig::desk());
        let err =
            RunConfig::from_toml("seed = 3\noutput_dir = \"out\"\n[lora]\nrnak = 4\n").unwrap_err();
        assert!(
            matches!(err, Error::RunConfig(ref m) if m.contains("rnak")),
            "{err}"
        );
        assert!(RunConfig::from_toml("seed = 3\noutput_dir = \"o\"\nextra = 1\n").is_err());
        let round = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn train_sections_override_presets() {
        let mut cfg = RunConfig::desk("x", 1);
        cfg.full_distill.lr = Some(1e-4);
        let full = cfg.train_config(Mode::FullDistill);
        assert_eq!(full.lr, 1e-4);
        assert!(full.lora.is_none());
        let rec = cfg.train_config(Mode::RecoverLora);
        assert_eq!(rec.lr, 5e-4);
        assert_eq!(rec.lora.unwrap().seed, cfg.seed_for("lora"));
        assert_eq!(rec.seed, cfg.seed_for("recover"));
    }

    #[test]
    fn labels_parse() {
        for l in ModelLabel::ALL {
            assert_eq!(l.as_str().parse::<ModelLabel>().unwrap(), l);
        }
        assert!("nope".parse::<ModelLabel>().is_err());
    }
}
