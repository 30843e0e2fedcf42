//! Training loops for adapter recovery and the two baselines.
//!
//! * `recover_lora`: adapters on the frozen corrupted student, trained to
//!   minimise `KL(p_teacher ‖ p_student)` on synthetic teacher samples.
//! * `full_distill`: the same objective with every student weight trainable.
//! * `sft_lora`: adapters trained with next-token cross-entropy on labeled text.
//!
//! Per-sequence losses are means over token positions. A micro-batch
//! gradient is the mean over its sequences and an optimizer step averages
//! `grad_accum` micro-batches.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{inject, AdaptedModel, AdapterSet, LoraConfig};
use crate::optim::{adamw_step, linear_warmup_schedule, AdamState, AdamW};
use crate::persist::{Checkpoint, Dataset};
use crate::tensor::Tensor;
use crate::transformer::{
    forward_graph, next_token_loss_graph, AdapterVars, GraphParams, ModelConfig, ModelWeights,
    Transformer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    RecoverLora,
    FullDistill,
    SftLora,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RecoverLora => "recover_lora",
            Self::FullDistill => "full_distill",
            Self::SftLora => "sft_lora",
        }
    }

    fn uses_adapters(self) -> bool {
        self != Self::FullDistill
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Linear warmup from 0, then linear decay to 0 at the last step.
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_steps: usize,
    #[serde(default)]
    pub scheduler: Scheduler,
    pub seed: u64,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    /// Keep teacher probabilities in memory after the first epoch.
    #[serde(default)]
    pub cache_teacher: bool,
}

impl TrainConfig {
    pub fn recover_lora() -> Self {
        Self {
            mode: Mode::RecoverLora,
            lr: 5e-4,
            epochs: 3,
            batch_size: 1,
            grad_accum: 32,
            warmup_steps: 80,
            scheduler: Scheduler::Linear,
            seed: 0,
            lora: Some(LoraConfig::desk()),
            cache_teacher: true,
        }
    }

    pub fn full_distill() -> Self {
        Self {
            mode: Mode::FullDistill,
            lr: 2e-5,
            lora: None,
            ..Self::recover_lora()
        }
    }

    pub fn sft_lora() -> Self {
        Self {
            mode: Mode::SftLora,
            cache_teacher: false,
            ..Self::recover_lora()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::RecoverLora => Self::recover_lora(),
            Mode::FullDistill => Self::full_distill(),
            Mode::SftLora => Self::sft_lora(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        AdamW::new(self.lr)?;
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Invalid(
                "batch_size and grad_accum must be positive".into(),
            ));
        }
        match (self.mode.uses_adapters(), &self.lora) {
            (true, None) => Err(Error::Invalid(format!(
                "{} needs a lora config",
                self.mode.as_str()
            ))),
            (false, Some(_)) => Err(Error::Invalid(
                "full_distill trains every weight; drop the lora config".into(),
            )),
            _ => Ok(()),
        }
    }

    /// `ceil(epochs · n / (batch_size · grad_accum))`.
    pub fn total_steps(&self, n: usize) -> usize {
        (self.epochs * n).div_ceil(self.batch_size * self.grad_accum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: Mode,
    pub steps: Vec<StepRecord>,
    pub wall_time_secs: f64,
    pub total_steps: usize,
    pub trainable_params: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// `step\tlr\tloss` lines, preceded by `#` summary lines.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# mode\t{}\n# total_steps\t{}\n# trainable_params\t{}\n# wall_time_secs\t{:.3}\nstep\tlr\tloss\n",
            self.mode.as_str(),
            self.total_steps,
            self.trainable_params,
            self.wall_time_secs
        );
        for s in &self.steps {
            let _ = writeln!(out, "{}\t{:e}\t{:.6}", s.step, s.lr, s.loss);
        }
        out
    }
}

/// Teacher output distributions keyed by record contents.
///
/// Records are identical across nested dataset prefixes, so one cache can
/// serve every point of a size sweep.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    teacher: String,
    probs: HashMap<Vec<u32>, Arc<Tensor<f32>>>,
}

impl TeacherCache {
    pub fn new(teacher: &Transformer) -> Self {
        Self {
            teacher: teacher_fingerprint(teacher),
            probs: HashMap::new(),
        }
    }

    /// Fingerprint of the teacher this cache belongs to.
    pub fn teacher(&self) -> &str {
        &self.teacher
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn teacher_fingerprint(teacher: &Transformer) -> String {
    Checkpoint::model(teacher.config.clone(), teacher.weights.clone()).fingerprint()
}

fn softmax_rows(logits: &Tensor<f32>) -> Tensor<f32> {
    let v = logits.last_dim();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(v) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

enum Targets<'a> {
    Teacher {
        model: &'a Transformer,
        cache: Option<&'a mut TeacherCache>,
    },
    NextToken,
}

impl Targets<'_> {
    fn probs(&mut self, record: &[u32]) -> Result<Option<Arc<Tensor<f32>>>> {
        match self {
            Self::NextToken => Ok(None),
            Self::Teacher { model, cache } => {
                if let Some(c) = cache.as_deref() {
                    if let Some(p) = c.probs.get(record) {
                        return Ok(Some(Arc::clone(p)));
                    }
                }
                let p = Arc::new(softmax_rows(&model.forward(record)?));
                if let Some(c) = cache.as_deref_mut() {
                    c.probs.insert(record.to_vec(), Arc::clone(&p));
                }
                Ok(Some(p))
            }
        }
    }
}

/// Loss of one record on `tape`: KL against `target` when given, otherwise
/// next-token cross-entropy.
fn record_loss(
    tape: &mut Tape<f32>,
    config: &ModelConfig,
    params: &GraphParams,
    adapters: &AdapterVars,
    record: &[u32],
    target: Option<&Tensor<f32>>,
) -> Result<Var> {
    match target {
        Some(t) => {
            let logits = forward_graph(tape, config, params, adapters, record)?;
            let probs = tape.softmax(logits, 1)?;
            let t = tape.constant(t.clone());
            Ok(tape.kl_div(t, probs)?)
        }
        None => next_token_loss_graph(tape, config, params, adapters, record),
    }
}

/// What the optimizer updates.
enum Student<'a> {
    Adapted(&'a mut AdaptedModel),
    Full(&'a mut Transformer),
}

impl Student<'_> {
    fn config(&self) -> &ModelConfig {
        match self {
            Self::Adapted(m) => &m.base().config,
            Self::Full(m) => &m.config,
        }
    }

    fn param_sizes(&self) -> Vec<usize> {
        match self {
            Self::Adapted(m) => m
                .adapters()
                .parameters()
                .iter()
                .map(|(_, t)| t.numel())
                .collect(),
            Self::Full(m) => m.weights.iter().map(|(_, t)| t.numel()).collect(),
        }
    }

    /// Loss and per-parameter gradients for one record.
    fn loss_and_grads(
        &self,
        record: &[u32],
        target: Option<&Tensor<f32>>,
    ) -> Result<(f64, Vec<Vec<f32>>)> {
        let mut tape = Tape::new();
        let (params, adapters, order) = match self {
            Self::Adapted(m) => m.bind(&mut tape, true),
            Self::Full(m) => {
                let p = GraphParams::bind(&mut tape, &m.weights, |_| true);
                let order = p.iter().map(|(_, v)| v).collect();
                (p, AdapterVars::new(), order)
            }
        };
        let loss = record_loss(&mut tape, self.config(), &params, &adapters, record, target)?;
        tape.backward(loss)?;
        let grads = order
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).numel()],
            })
            .collect();
        Ok((tape.value(loss).data()[0] as f64, grads))
    }

    fn apply(
        &mut self,
        grads: &[Vec<f32>],
        states: &mut [AdamState<f32>],
        hp: &AdamW,
        mult: f64,
    ) -> Result<()> {
        let params: Vec<&mut Tensor<f32>> = match self {
            Self::Adapted(m) => m.adapters_mut().parameters_mut(),
            Self::Full(m) => m.weights.iter_mut().map(|(_, t)| t).collect(),
        };
        for ((p, g), st) in params.into_iter().zip(grads).zip(states) {
            adamw_step(p.data_mut(), g, st, hp, mult)?;
        }
        Ok(())
    }
}

fn check_pair(teacher: &Transformer, student: &ModelConfig) -> Result<()> {
    if &teacher.config != student {
        return Err(Error::ConfigMismatch(format!(
            "teacher config {:?} differs from student config {:?}",
            teacher.config, student
        )));
    }
    Ok(())
}

fn run(
    mut student: Student<'_>,
    mut targets: Targets<'_>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let started = Instant::now();
    let n = data.len();
    let total = cfg.total_steps(n);
    let hp = AdamW::new(cfg.lr)?;
    let sizes = student.param_sizes();
    let mut states: Vec<AdamState<f32>> = sizes.iter().map(|&s| AdamState::new(s)).collect();
    let mut order = Vec::with_capacity(cfg.epochs * n);
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let per_step = cfg.batch_size * cfg.grad_accum;
    let mut steps = Vec::with_capacity(total);
    for (step, chunk) in order.chunks(per_step).enumerate() {
        let mut step_grads: Vec<Vec<f32>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut step_loss = 0.0;
        let micro: Vec<&[usize]> = chunk.chunks(cfg.batch_size).collect();
        let inv_accum = 1.0 / micro.len() as f32;
        for batch in &micro {
            let inv_batch = 1.0 / batch.len() as f32;
            let mut batch_grads: Vec<Vec<f32>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            let mut batch_loss = 0.0;
            for &i in batch.iter() {
                let record = &data.records[i];
                let target = targets.probs(record)?;
                let (loss, grads) = student.loss_and_grads(record, target.as_deref())?;
                batch_loss += loss;
                for (acc, g) in batch_grads.iter_mut().zip(&grads) {
                    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            step_loss += batch_loss / batch.len() as f64;
            for (acc, g) in step_grads.iter_mut().zip(&batch_grads) {
                acc.iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a += b * inv_batch * inv_accum);
            }
        }
        let mult = linear_warmup_schedule(step, cfg.warmup_steps, total);
        student.apply(&step_grads, &mut states, &hp, mult)?;
        steps.push(StepRecord {
            step,
            lr: cfg.lr * mult,
            loss: step_loss / micro.len() as f64,
        });
    }
    Ok(TrainLog {
        mode: cfg.mode,
        steps,
        wall_time_secs: started.elapsed().as_secs_f64(),
        total_steps: total,
        trainable_params: sizes.iter().sum(),
    })
}

fn expect_mode(cfg: &TrainConfig, mode: Mode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::Invalid(format!(
            "config is for {}, not {}",
            cfg.mode.as_str(),
            mode.as_str()
        )));
    }
    Ok(())
}

/// Trains `adapted`'s adapters in place. `teacher` selects distillation;
/// without it the objective is next-token cross-entropy.
pub fn train_adapters(
    teacher: Option<&Transformer>,
    adapted: &mut AdaptedModel,
    data: &Dataset,
    cfg: &TrainConfig,
    cache: Option<&mut TeacherCache>,
) -> Result<TrainLog> {
    let targets = match teacher {
        Some(t) => {
            check_pair(t, &adapted.base().config)?;
            if let Some(c) = cache.as_deref() {
                let fp = teacher_fingerprint(t);
                if c.teacher != fp {
                    return Err(Error::FingerprintMismatch {
                        what: "teacher cache".into(),
                        expected: fp,
                        actual: c.teacher.clone(),
                    });
                }
            }
            Targets::Teacher { model: t, cache }
        }
        None => Targets::NextToken,
    };
    run(Student::Adapted(adapted), targets, data, cfg)
}

/// Adapters on the frozen corrupted student, distilled from the teacher.
pub fn recover_lora_train(
    teacher: &Transformer,
    student: &Transformer,
    data: &Dataset,
    cfg: &TrainConfig,
    cache: Option<&mut TeacherCache>,
) -> Result<(AdapterSet, TrainLog)> {
    expect_mode(cfg, Mode::RecoverLora)?;
    cfg.validate()?;
    check_pair(teacher, &student.config)?;
    let mut adapted = inject(student.clone(), cfg.lora.as_ref().expect("validated"))?;
    let mut local;
    let cache = match cache {
        Some(c) => Some(c),
        None if cfg.cache_teacher => {
            local = TeacherCache::new(teacher);
            Some(&mut local)
        }
        None => None,
    };
    let log = train_adapters(Some(teacher), &mut adapted, data, cfg, cache)?;
    Ok((adapted.into_adapters(), log))
}

/// Every student weight trained on the distillation objective.
pub fn full_distill_train(
    teacher: &Transformer,
    student: &Transformer,
    data: &Dataset,
    cfg: &TrainConfig,
    cache: Option<&mut TeacherCache>,
) -> Result<(ModelWeights, TrainLog)> {
    expect_mode(cfg, Mode::FullDistill)?;
    check_pair(teacher, &student.config)?;
    let mut local;
    let cache = match cache {
        Some(c) => Some(c),
        None if cfg.cache_teacher => {
            local = TeacherCache::new(teacher);
            Some(&mut local)
        }
        None => None,
    };
    let mut model = student.clone();
    let log = run(
        Student::Full(&mut model),
        Targets::Teacher {
            model: teacher,
            cache,
        },
        data,
        cfg,
    )?;
    Ok((model.weights, log))
}

/// Adapters trained with next-token cross-entropy on labeled text.
pub fn sft_lora_train(
    student: &Transformer,
    labeled: &Dataset,
    cfg: &TrainConfig,
) -> Result<(AdapterSet, TrainLog)> {
    expect_mode(cfg, Mode::SftLora)?;
    cfg.validate()?;
    let mut adapted = inject(student.clone(), cfg.lora.as_ref().expect("validated"))?;
    let log = train_adapters(None, &mut adapted, labeled, cfg, None)?;
    Ok((adapted.into_adapters(), log))
}
