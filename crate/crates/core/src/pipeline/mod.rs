//! Training orchestration: schedules, early stopping, stage training with
//! best-dev checkpointing, and the sequential fine-tuning arms (direct
//! downstream, parsing-first, masked-LM-first).

mod checkpoint;
mod tasks;

pub use checkpoint::{
    fingerprint_bytes, load_checkpoint, restore_model, save_checkpoint, CheckpointError,
    CheckpointMeta, LoadedCheckpoint, RestoredModel,
};
pub use tasks::{MccTask, MlmTask, ParseTask, SeqcTask, StageTask};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biaffine::BiaffineError;
use crate::encoder::{AdapterConfig, Encoder, EncoderConfig, EncoderError};
use crate::heads::HeadError;
use crate::metrics::MetricsError;
use crate::synth::{MccInstance, SeqcInstance};
use crate::tensor::{Adam, ParamRegistry, Tape, Tensor, TensorError};
use crate::tokenizer::Vocab;
use crate::treebank::{Sentence, TreebankError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty data split: {0}")]
    EmptySplit(&'static str),
    #[error("schedule is invalid: {0}")]
    BadSchedule(String),
    #[error("adapter-mode training requested but the encoder has no adapters")]
    NoAdapters,
    #[error("non-finite training loss at update step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("need at least 2 distinct labels, got {0}")]
    DegenerateLabels(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Biaffine(#[from] BiaffineError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Treebank(#[from] TreebankError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Independent deterministic rng stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// stage-local stream ids
const STREAM_DROPOUT: u64 = 100;
const STREAM_SHUFFLE: u64 = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneMode {
    /// Update every parameter.
    Standard,
    /// Freeze base parameters; update adapters and the stage head only.
    Adapter,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Measure the dev loss every this many update steps.
    pub eval_every: usize,
    /// Stop when this many consecutive measurements fail to improve on the
    /// best loss seen before them.
    pub patience: usize,
    pub lr: f64,
    pub mode: TuneMode,
}

impl TrainSchedule {
    /// Treebank-style schedule: batches of 8, dev loss every 250 steps.
    pub fn treebank() -> TrainSchedule {
        TrainSchedule {
            max_epochs: 30,
            batch_size: 8,
            eval_every: 250,
            patience: 10,
            lr: 1e-5,
            mode: TuneMode::Standard,
        }
    }

    /// Large-set sequence classification: batches of 32, eval every 500.
    pub fn seqc() -> TrainSchedule {
        TrainSchedule {
            batch_size: 32,
            eval_every: 500,
            ..TrainSchedule::treebank()
        }
    }

    /// Multiple choice keeps the small-batch schedule.
    pub fn mcc() -> TrainSchedule {
        TrainSchedule::treebank()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.eval_every < 1 {
            return Err(PipelineError::BadSchedule("eval_every must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(PipelineError::BadSchedule("patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(PipelineError::BadSchedule("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PipelineError::BadSchedule(format!("bad lr {}", self.lr)));
        }
        Ok(())
    }
}

/// True when the last `patience` measurements contain nothing strictly
/// below the best value seen before them. Needs at least `patience + 1`
/// measurements to fire.
pub fn should_stop(history: &[f64], patience: usize) -> bool {
    if history.len() < patience + 1 {
        return false;
    }
    let split = history.len() - patience;
    let best_before = history[..split]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    !history[split..].iter().any(|&v| v < best_before)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageReport {
    pub task: String,
    pub initial_dev_loss: f64,
    pub best_dev_loss: f64,
    pub final_dev_loss: f64,
    pub measurements: Vec<f64>,
    pub update_steps: u64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

type Snapshot = Vec<(String, Vec<usize>, Vec<f64>)>;

fn snapshot_all(reg: &ParamRegistry, heads: &[(String, Tensor)]) -> Snapshot {
    let mut snap = reg.snapshot();
    for (name, t) in heads {
        snap.push((name.clone(), t.shape(), t.data()));
    }
    snap
}

fn restore_all(
    reg: &ParamRegistry,
    heads: &[(String, Tensor)],
    snap: &Snapshot,
) -> Result<(), TensorError> {
    reg.restore(snap)?;
    for (name, t) in heads {
        if let Some((_, _, data)) = snap.iter().find(|(n, _, _)| n == name) {
            t.assign(data.clone())?;
        }
    }
    Ok(())
}

/// Freezes the given tensors for the guard's lifetime; gradients neither
/// flow into nor through-from them while frozen.
struct FreezeGuard {
    frozen: Vec<Tensor>,
}

impl FreezeGuard {
    fn freeze(tensors: Vec<Tensor>) -> FreezeGuard {
        for t in &tensors {
            t.set_requires_grad(false);
        }
        FreezeGuard { frozen: tensors }
    }
}

impl Drop for FreezeGuard {
    fn drop(&mut self) {
        for t in &self.frozen {
            t.set_requires_grad(true);
        }
    }
}

/// Length-bucketed batches in a shuffled order: examples are sorted by
/// length, chunked, and the chunk order is drawn from `rng`.
fn make_batches(task: &dyn StageTask, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..task.num_train()).collect();
    indices.sort_by_key(|&i| (task.example_len(i), i));
    let mut batches: Vec<Vec<usize>> = indices
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    batches.shuffle(rng);
    batches
}

/// Trains one stage with dev-loss early stopping and returns the model at
/// its best measurement (parameters restored in place).
pub fn train_stage(
    encoder: &mut Encoder,
    task: &mut dyn StageTask,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<StageReport, PipelineError> {
    schedule.validate()?;
    if task.num_train() == 0 || task.num_dev() == 0 {
        return Err(PipelineError::EmptySplit("train or dev"));
    }
    if schedule.mode == TuneMode::Adapter && encoder.adapter.is_none() {
        return Err(PipelineError::NoAdapters);
    }
    let heads = task.head_params();
    let mut trainable = match schedule.mode {
        TuneMode::Standard => encoder.params.select(|_| true),
        TuneMode::Adapter => encoder.params.select(|n| n.starts_with("adapter/")),
    };
    trainable.extend(heads.iter().cloned());
    // in adapter mode the base parameters are frozen outright, so the set
    // of tensors receiving gradients is exactly adapters + head
    let _freeze = match schedule.mode {
        TuneMode::Adapter => Some(FreezeGuard::freeze(
            encoder
                .params
                .select(|n| !n.starts_with("adapter/"))
                .into_iter()
                .map(|(_, t)| t)
                .collect(),
        )),
        TuneMode::Standard => None,
    };

    let mut optimizer = Adam::new(schedule.lr);
    let mut dropout_rng = stream_rng(seed, STREAM_DROPOUT);
    let mut shuffle_rng = stream_rng(seed, STREAM_SHUFFLE);

    let zero_all = |encoder: &Encoder, heads: &[(String, Tensor)]| {
        encoder.params.zero_grads();
        for (_, t) in heads {
            t.zero_grad();
        }
    };

    let initial = task.dev_loss(encoder)?;
    let mut history = vec![initial];
    let mut best = initial;
    let mut best_snap = snapshot_all(&encoder.params, &heads);
    let mut steps = 0u64;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    'training: for _epoch in 0..schedule.max_epochs {
        epochs_run += 1;
        for batch in make_batches(task, schedule.batch_size, &mut shuffle_rng) {
            let tape = Tape::new();
            let mut total: Option<Tensor> = None;
            for &i in &batch {
                let loss = task.example_loss(&tape, encoder, i, &mut dropout_rng)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => tape.add(&acc, &loss)?,
                });
            }
            let loss = tape.mul_scalar(&total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            if !loss.item().is_finite() {
                return Err(PipelineError::NonFiniteLoss { step: steps });
            }
            tape.backward(&loss)?;
            optimizer.step(&trainable)?;
            zero_all(encoder, &heads);
            steps += 1;

            if steps % schedule.eval_every as u64 == 0 {
                let dev = task.dev_loss(encoder)?;
                history.push(dev);
                if dev < best {
                    best = dev;
                    best_snap = snapshot_all(&encoder.params, &heads);
                }
                if should_stop(&history, schedule.patience) {
                    stopped_early = true;
                    break 'training;
                }
            }
        }
    }

    if steps > 0 && steps % schedule.eval_every as u64 != 0 {
        let dev = task.dev_loss(encoder)?;
        history.push(dev);
        if dev < best {
            best = dev;
            best_snap = snapshot_all(&encoder.params, &heads);
        }
    }

    restore_all(&encoder.params, &heads, &best_snap)?;
    Ok(StageReport {
        task: task.name().to_string(),
        initial_dev_loss: initial,
        best_dev_loss: best,
        final_dev_loss: *history.last().expect("at least the initial measurement"),
        measurements: history,
        update_steps: steps,
        epochs_run,
        stopped_early,
    })
}

/// The compared intermediate-training arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intermediate {
    None,
    Parsing,
    Mlm,
}

impl Intermediate {
    pub fn tag(&self) -> &'static str {
        match self {
            Intermediate::None => "none",
            Intermediate::Parsing => "parsing",
            Intermediate::Mlm => "mlm",
        }
    }
}

#[derive(Debug, Clone)]
pub enum TaskData {
    Seqc {
        train: Vec<SeqcInstance>,
        dev: Vec<SeqcInstance>,
        test: Vec<SeqcInstance>,
    },
    Mcc {
        train: Vec<MccInstance>,
        dev: Vec<MccInstance>,
        test: Vec<MccInstance>,
    },
}

impl TaskData {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskData::Seqc { .. } => "seqc",
            TaskData::Mcc { .. } => "mcc",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub intermediate_schedule: TrainSchedule,
    pub downstream_schedule: TrainSchedule,
    pub mask_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArmReport {
    pub arm: String,
    pub task: String,
    pub intermediate: Option<StageReport>,
    pub downstream: StageReport,
    pub test_accuracy: f64,
    pub seed: u64,
}

// stream ids shared across arms so every arm starts from identical weights
const STREAM_ENCODER_INIT: u64 = 0;
const STREAM_ADAPTER_INIT: u64 = 1;
const STREAM_INTERMEDIATE_HEAD: u64 = 2;
const STREAM_DOWNSTREAM_HEAD: u64 = 3;
const STREAM_DEV_MASKS: u64 = 4;
const STAGE_SEED_INTERMEDIATE: u64 = 11;
const STAGE_SEED_DOWNSTREAM: u64 = 13;

/// Runs one arm end to end: optional intermediate stage on the treebank
/// sentences, then downstream fine-tuning with every parameter unfrozen.
/// The intermediate head is dropped in between.
pub fn run_arm(
    arm: Intermediate,
    spec: &ExperimentSpec,
    treebank_train: &[Sentence],
    treebank_dev: &[Sentence],
    task_data: &TaskData,
    vocab: &Vocab,
) -> Result<ArmReport, PipelineError> {
    let mut encoder = Encoder::new(
        spec.encoder.clone(),
        &mut stream_rng(spec.seed, STREAM_ENCODER_INIT),
    );
    let use_adapters =
        arm != Intermediate::None && spec.intermediate_schedule.mode == TuneMode::Adapter;
    if use_adapters {
        encoder
            .inject_adapters(spec.adapter, &mut stream_rng(spec.seed, STREAM_ADAPTER_INIT))
            .expect("fresh encoder has no adapters");
    }

    let h = spec.encoder.hidden;
    let dropout = spec.encoder.dropout;
    let intermediate = match arm {
        Intermediate::None => None,
        Intermediate::Parsing => {
            let mut task = ParseTask::new(
                treebank_train,
                treebank_dev,
                vocab,
                h,
                dropout,
                &mut stream_rng(spec.seed, STREAM_INTERMEDIATE_HEAD),
            )?;
            let report = train_stage(
                &mut encoder,
                &mut task,
                &spec.intermediate_schedule,
                spec.seed.wrapping_add(STAGE_SEED_INTERMEDIATE),
            )?;
            Some(report)
        }
        Intermediate::Mlm => {
            let mut task = MlmTask::new(
                treebank_train,
                treebank_dev,
                vocab,
                h,
                dropout,
                spec.mask_rate,
                spec.seed.wrapping_add(STREAM_DEV_MASKS),
                &mut stream_rng(spec.seed, STREAM_INTERMEDIATE_HEAD),
            )?;
            let report = train_stage(
                &mut encoder,
                &mut task,
                &spec.intermediate_schedule,
                spec.seed.wrapping_add(STAGE_SEED_INTERMEDIATE),
            )?;
            Some(report)
        }
    };
    // the intermediate head is gone here: only encoder params survive

    // downstream always trains the full parameter set, adapters included
    let downstream_schedule = TrainSchedule {
        mode: TuneMode::Standard,
        ..spec.downstream_schedule.clone()
    };
    let mut head_rng = stream_rng(spec.seed, STREAM_DOWNSTREAM_HEAD);
    let (downstream, test_accuracy) = match task_data {
        TaskData::Seqc { train, dev, test } => {
            let mut task = SeqcTask::new(
                train,
                dev,
                vocab,
                h,
                spec.encoder.max_len,
                dropout,
                &mut head_rng,
            )?;
            let report = train_stage(
                &mut encoder,
                &mut task,
                &downstream_schedule,
                spec.seed.wrapping_add(STAGE_SEED_DOWNSTREAM),
            )?;
            let acc = task.evaluate(&encoder, test, vocab, spec.encoder.max_len)?;
            (report, acc)
        }
        TaskData::Mcc { train, dev, test } => {
            let mut task = MccTask::new(
                train,
                dev,
                vocab,
                h,
                spec.encoder.max_len,
                dropout,
                &mut head_rng,
            )?;
            let report = train_stage(
                &mut encoder,
                &mut task,
                &downstream_schedule,
                spec.seed.wrapping_add(STAGE_SEED_DOWNSTREAM),
            )?;
            let acc = task.evaluate(&encoder, test, vocab, spec.encoder.max_len)?;
            (report, acc)
        }
    };

    Ok(ArmReport {
        arm: arm.tag().to_string(),
        task: task_data.kind().to_string(),
        intermediate,
        downstream,
        test_accuracy,
        seed: spec.seed,
    })
}

/// All requested arms over one dataset and seed.
pub fn run_arms(
    arms: &[Intermediate],
    spec: &ExperimentSpec,
    treebank_train: &[Sentence],
    treebank_dev: &[Sentence],
    task_data: &TaskData,
    vocab: &Vocab,
) -> Result<Vec<ArmReport>, PipelineError> {
    arms.iter()
        .map(|&arm| run_arm(arm, spec, treebank_train, treebank_dev, task_data, vocab))
        .collect()
}

/// One CSV row per arm x task.
pub fn arms_csv(reports: &[ArmReport]) -> String {
    let mut out =
        String::from("arm,task,test_accuracy,downstream_best_dev_loss,downstream_steps,intermediate_best_dev_loss,intermediate_steps,seed\n");
    for r in reports {
        let (i_loss, i_steps) = match &r.intermediate {
            Some(s) => (format!("{:.6}", s.best_dev_loss), s.update_steps.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{:.2},{:.6},{},{},{},{}\n",
            r.arm,
            r.task,
            r.test_accuracy,
            r.downstream.best_dev_loss,
            r.downstream.update_steps,
            i_loss,
            i_steps,
            r.seed
        ));
    }
    out
}
