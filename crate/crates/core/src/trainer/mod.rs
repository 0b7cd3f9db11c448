//! Training loops, run configuration, checkpoints and metric logs.
//!
//! Both model kinds share one loop: draw the next work unit, compute loss
//! and gradients, clip to a global norm, apply Adam with `lr_at(step)` for
//! steps `1..=total_steps`, log, validate every `valid_every` steps and at
//! the end, and checkpoint. All randomness after initialization comes from
//! one ChaCha8 generator whose position is stored in checkpoints, so a
//! resumed run continues exactly where the interrupted one stopped.

mod checkpoint;
mod config;

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, DataCursor, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{MemoryMode, ModelKind, ModelSpec, RunConfig};

use crate::corpusio::{
    batches_from_encoded, encode_corpus, epoch_order, load_and_split, read_sentences, EncodedCorpus, PaddedBatch,
};
use crate::error::{Error, Result};
use crate::mlm::{mask_tokens, EncoderConfig, MaskPolicy, MaskedBatch, MlmModel};
use crate::nn::Mode;
use crate::numcore::{clip_global_norm, Adam, Params, Tensor};
use crate::scorer::corpus_perplexity_ar;
use crate::subseg::{SegmentationModel, SubwordVocab};
use crate::xl::{XlConfig, XlMemory, XlModel};

pub const METRIC_HEADER: &str = "step\tlr\tloss\taccuracy_or_ppl\tsplit";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.spck";
pub const EMERGENCY_FILE: &str = "emergency.spck";

/// Seed offset of the fixed masks used for masked-LM validation.
const VALID_MASK_SEED: u64 = 0x7661_6c69_64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
        })
    }
}

/// One metric log line. `metric` is masked-LM accuracy or perplexity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub metric: f64,
    pub split: Split,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.step, self.lr, self.loss, self.metric, self.split
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// State to continue from; must come from the same configuration.
    pub resume: Option<Checkpoint>,
    /// Stop after this step instead of `total_steps`. The schedule still
    /// spans `total_steps`.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Records produced by this invocation.
    pub log: Vec<MetricRecord>,
    /// Training sentences left out for exceeding the length cap.
    pub skipped: usize,
}

/// Encoded training and validation data for a run.
pub struct RunData {
    pub train: EncodedCorpus,
    pub valid: EncodedCorpus,
}

/// Loads the segmenter and vocabulary, resolves `vocab_size`, and encodes
/// the training and validation sentences.
pub fn prepare_data(run: &mut RunConfig) -> Result<RunData> {
    for p in [&run.train_data, &run.lexicon, &run.vocab].into_iter().chain(&run.valid_data) {
        if !p.exists() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
    }
    let seg = SegmentationModel::load(&run.lexicon)?;
    let vocab = SubwordVocab::load(&run.vocab, run.scheme)?;
    run.resolve_vocab_size(vocab.len())?;
    let (train, valid) = match &run.valid_data {
        Some(v) => (read_sentences(&run.train_data)?.0, read_sentences(v)?.0),
        None => {
            let (t, v) = load_and_split(&[&run.train_data], run.valid_fraction, run.seed)?;
            (t.sentences, v.sentences)
        }
    };
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(RunData {
        train: encode_corpus(&train, &seg, &vocab)?,
        valid: encode_corpus(&valid, &seg, &vocab)?,
    })
}

/// Trains the model kind named by `run`, writing the metric log and
/// checkpoints under `run.out_dir`.
pub fn train(run: &RunConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    match run.kind() {
        ModelKind::Mlm => train_mlm(run, opts),
        ModelKind::Xl => train_xl(run, opts),
    }
}

pub fn train_mlm(run: &RunConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    let mut run = run.clone();
    let ModelSpec::Mlm { .. } = run.model else {
        return Err(Error::ModelKindMismatch {
            expected: "mlm",
            found: run.kind().as_str(),
        });
    };
    let data = prepare_data(&mut run)?;
    let ModelSpec::Mlm { encoder, masking } = run.model.clone() else {
        unreachable!()
    };
    let mut task = MlmTask::new(&run, encoder, masking, data)?;
    run_loop(&run, &mut task, opts)
}

pub fn train_xl(run: &RunConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    let mut run = run.clone();
    let ModelSpec::Xl { .. } = run.model else {
        return Err(Error::ModelKindMismatch {
            expected: "xl",
            found: run.kind().as_str(),
        });
    };
    let data = prepare_data(&mut run)?;
    let ModelSpec::Xl { xl, memory } = run.model.clone() else {
        unreachable!()
    };
    let mut task = XlTask::new(&run, xl, memory, data)?;
    run_loop(&run, &mut task, opts)
}

/// A trained model rebuilt from a checkpoint.
pub enum LoadedModel {
    Mlm(MlmModel),
    Xl(XlModel),
}

impl LoadedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            LoadedModel::Mlm(_) => ModelKind::Mlm,
            LoadedModel::Xl(_) => ModelKind::Xl,
        }
    }
}

fn params_from(template: &Params, ck: &Checkpoint) -> Result<Params> {
    let mut p = Params::new();
    for name in template.names() {
        let t = ck
            .tensor(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks parameter {name}")))?;
        p.push(name.clone(), t.clone());
    }
    Ok(p)
}

/// Rebuilds the model stored in a checkpoint together with its run
/// configuration.
pub fn load_model(ck: &Checkpoint) -> Result<(RunConfig, LoadedModel)> {
    let run = RunConfig::parse(&ck.config_echo, "checkpoint config")?;
    let model = match &run.model {
        ModelSpec::Mlm { encoder, .. } => {
            let template = MlmModel::new(zero_std(encoder), 0)?;
            LoadedModel::Mlm(MlmModel::from_params(encoder.clone(), params_from(template.params(), ck)?)?)
        }
        ModelSpec::Xl { xl, .. } => {
            let template = XlModel::new(XlConfig { init_std: 0.0, ..xl.clone() }, 0)?;
            LoadedModel::Xl(XlModel::from_params(xl.clone(), params_from(template.params(), ck)?)?)
        }
    };
    Ok((run, model))
}

fn zero_std(c: &EncoderConfig) -> EncoderConfig {
    EncoderConfig {
        init_std: 0.0,
        ..c.clone()
    }
}

/// Model-specific half of the training loop.
trait Task {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    /// Loss, metric and gradients of the next work unit; advances `cursor`.
    fn step(&mut self, rng: &mut ChaCha8Rng, cursor: &mut DataCursor) -> Result<(f64, f64, Vec<Tensor>)>;
    /// Validation loss and metric.
    fn validate(&self) -> Result<(f64, f64)>;
    fn extra_tensors(&self) -> Vec<(String, Tensor)>;
    fn restore_extra(&mut self, ck: &Checkpoint) -> Result<()>;
    fn skipped(&self) -> usize {
        0
    }
}

struct MlmTask {
    model: MlmModel,
    masking: MaskPolicy,
    train: Vec<Vec<u32>>,
    valid: Vec<MaskedBatch>,
    batch_size: usize,
    seed: u64,
    epoch: Option<(u64, Vec<PaddedBatch>)>,
    skipped: usize,
}

impl MlmTask {
    fn new(run: &RunConfig, encoder: EncoderConfig, masking: MaskPolicy, data: RunData) -> Result<Self> {
        let model = MlmModel::new(encoder.clone(), run.seed)?;
        let max = encoder.max_position;
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ VALID_MASK_SEED);
        let valid_seqs: Vec<_> = data.valid.sequences.into_iter().filter(|s| s.len() <= max).collect();
        let mut valid = Vec::new();
        for chunk in valid_seqs.chunks(run.batch_size) {
            let m = mask_tokens(&PaddedBatch::from_sequences(chunk)?, &masking, encoder.vocab_size, &mut rng)?;
            if m.num_targets() > 0 {
                valid.push(m);
            }
        }
        let skipped = data.train.sequences.iter().filter(|s| s.len() > max).count();
        let train: Vec<_> = data.train.sequences.into_iter().filter(|s| s.len() <= max).collect();
        if train.is_empty() || valid.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self {
            model,
            masking,
            train,
            valid,
            batch_size: run.batch_size,
            seed: run.seed,
            epoch: None,
            skipped,
        })
    }
}

impl Task for MlmTask {
    fn params(&self) -> &Params {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut Params {
        self.model.params_mut()
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, cursor: &mut DataCursor) -> Result<(f64, f64, Vec<Tensor>)> {
        let max = self.model.config().max_position;
        loop {
            if self.epoch.as_ref().map(|e| e.0) != Some(cursor.epoch) {
                let b = batches_from_encoded(&self.train, self.batch_size, max, self.seed, cursor.epoch)?;
                self.epoch = Some((cursor.epoch, b.batches));
            }
            let batches = &self.epoch.as_ref().expect("epoch batches").1;
            if (cursor.unit as usize) < batches.len() {
                break;
            }
            cursor.epoch += 1;
            cursor.unit = 0;
        }
        let batch = &self.epoch.as_ref().expect("epoch batches").1[cursor.unit as usize];
        cursor.unit += 1;
        let vocab = self.model.config().vocab_size;
        let mut masked = mask_tokens(batch, &self.masking, vocab, rng)?;
        for _ in 0..1000 {
            if masked.num_targets() > 0 {
                break;
            }
            masked = mask_tokens(batch, &self.masking, vocab, rng)?;
        }
        let (m, grads) = self.model.loss_and_grads(&masked, Mode::Train(rng))?;
        Ok((m.masked_lm_loss, m.masked_lm_accuracy, grads))
    }

    fn validate(&self) -> Result<(f64, f64)> {
        let (mut loss, mut correct, mut n) = (0.0, 0.0, 0usize);
        for b in &self.valid {
            let logits = self.model.encode(b, Mode::Eval)?;
            let m = crate::mlm::mlm_metrics(&logits, &b.mlm_targets)?;
            loss += m.masked_lm_loss * m.supervised as f64;
            correct += m.masked_lm_accuracy * m.supervised as f64;
            n += m.supervised;
        }
        Ok((loss / n as f64, correct / n as f64))
    }

    fn extra_tensors(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    fn restore_extra(&mut self, _: &Checkpoint) -> Result<()> {
        Ok(())
    }

    fn skipped(&self) -> usize {
        self.skipped
    }
}

/// One training step's worth of recurrent-model input.
struct Unit {
    inputs: Vec<u32>,
    targets: Vec<u32>,
    batch: usize,
    reset: bool,
}

struct XlTask {
    model: XlModel,
    mode: MemoryMode,
    train: Vec<Vec<u32>>,
    valid: EncodedCorpus,
    batch_size: usize,
    seed: u64,
    epoch: Option<(u64, Vec<Unit>)>,
    memory: Option<XlMemory>,
}

impl XlTask {
    fn new(run: &RunConfig, xl: XlConfig, mode: MemoryMode, data: RunData) -> Result<Self> {
        Ok(Self {
            model: XlModel::new(xl, run.seed)?,
            mode,
            train: data.train.sequences,
            valid: data.valid,
            batch_size: run.batch_size,
            seed: run.seed,
            epoch: None,
            memory: None,
        })
    }

    fn units(&self, epoch: u64) -> Result<Vec<Unit>> {
        let seg = self.model.config().seg_len;
        let order = epoch_order(self.train.len(), self.seed, epoch);
        let mut units = Vec::new();
        match self.mode {
            MemoryMode::Stream => {
                let stream: Vec<u32> = order.iter().flat_map(|&i| self.train[i].iter().copied()).collect();
                let mut lanes = self.batch_size.min(stream.len() / 2).max(1);
                while lanes > 1 && stream.len() / lanes < 2 {
                    lanes -= 1;
                }
                let lane_len = stream.len() / lanes;
                let lane = |b: usize| &stream[b * lane_len..(b + 1) * lane_len];
                let mut t = 0;
                while t + 1 < lane_len {
                    let s = seg.min(lane_len - 1 - t);
                    let mut inputs = Vec::with_capacity(lanes * s);
                    let mut targets = Vec::with_capacity(lanes * s);
                    for b in 0..lanes {
                        inputs.extend_from_slice(&lane(b)[t..t + s]);
                        targets.extend_from_slice(&lane(b)[t + 1..t + s + 1]);
                    }
                    units.push(Unit {
                        inputs,
                        targets,
                        batch: lanes,
                        reset: t == 0,
                    });
                    t += s;
                }
            }
            MemoryMode::Sentence => {
                let seqs: Vec<&Vec<u32>> = order.iter().map(|&i| &self.train[i]).collect();
                for chunk in seqs.chunks(self.batch_size) {
                    let b = PaddedBatch::from_sequences(chunk)?;
                    let len = b.seq_len - 1;
                    let mut t = 0;
                    while t < len {
                        let s = seg.min(len - t);
                        let mut inputs = Vec::with_capacity(b.batch * s);
                        let mut targets = Vec::with_capacity(b.batch * s);
                        for r in 0..b.batch {
                            inputs.extend_from_slice(&b.row(r)[t..t + s]);
                            targets.extend_from_slice(&b.row(r)[t + 1..t + s + 1]);
                        }
                        units.push(Unit {
                            inputs,
                            targets,
                            batch: b.batch,
                            reset: t == 0,
                        });
                        t += s;
                    }
                }
            }
        }
        if units.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(units)
    }
}

impl Task for XlTask {
    fn params(&self) -> &Params {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut Params {
        self.model.params_mut()
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, cursor: &mut DataCursor) -> Result<(f64, f64, Vec<Tensor>)> {
        loop {
            if self.epoch.as_ref().map(|e| e.0) != Some(cursor.epoch) {
                self.epoch = Some((cursor.epoch, self.units(cursor.epoch)?));
            }
            if (cursor.unit as usize) < self.epoch.as_ref().expect("epoch units").1.len() {
                break;
            }
            cursor.epoch += 1;
            cursor.unit = 0;
        }
        let unit = &self.epoch.as_ref().expect("epoch units").1[cursor.unit as usize];
        cursor.unit += 1;
        let memory = match self.memory.take() {
            Some(m) if !unit.reset && m.batch() == unit.batch => m,
            _ => self.model.init_memory(unit.batch),
        };
        let (loss, grads, next) =
            self.model
                .loss_and_grads(&unit.inputs, &unit.targets, unit.batch, &memory, Mode::Train(rng))?;
        self.memory = Some(next);
        Ok((loss, loss.exp(), grads))
    }

    fn validate(&self) -> Result<(f64, f64)> {
        let r = corpus_perplexity_ar(&self.model, &self.valid)?;
        Ok((r.perplexity.ln(), r.perplexity))
    }

    fn extra_tensors(&self) -> Vec<(String, Tensor)> {
        let Some(m) = &self.memory else {
            return Vec::new();
        };
        (0..m.num_layers())
            .filter_map(|l| m.layer(l).map(|t| (format!("memory.{l}"), t)))
            .collect()
    }

    fn restore_extra(&mut self, ck: &Checkpoint) -> Result<()> {
        let c = self.model.config();
        let layers: Vec<&Tensor> = (0..c.num_layers)
            .filter_map(|l| ck.tensor(&format!("memory.{l}")))
            .collect();
        if layers.is_empty() {
            self.memory = None;
            return Ok(());
        }
        let shape = layers[0].shape().to_vec();
        if layers.len() != c.num_layers || shape.len() != 3 || layers.iter().any(|t| t.shape() != shape) {
            return Err(Error::ConfigMismatch("checkpoint memory does not fit the model".into()));
        }
        let data = layers.iter().map(|t| t.data().to_vec()).collect();
        self.memory = Some(XlMemory::from_layers(shape[0], shape[2], shape[1], data)?);
        Ok(())
    }
}

struct LoopState {
    step: u64,
    rng: ChaCha8Rng,
    cursor: DataCursor,
    adam: Adam,
}

fn snapshot(run: &RunConfig, task: &dyn Task, st: &LoopState) -> Checkpoint {
    let p = task.params();
    let mut tensors: Vec<(String, Tensor)> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    for (prefix, moments) in [("adam.m", &st.adam.m), ("adam.v", &st.adam.v)] {
        for (i, t) in moments.iter().enumerate() {
            tensors.push((format!("{prefix}.{}", p.name(i)), t.clone()));
        }
    }
    tensors.extend(task.extra_tensors());
    Checkpoint {
        config_echo: run.echo(),
        step: st.step,
        rng: RngState::capture(&st.rng),
        cursor: st.cursor,
        adam_t: st.adam.t,
        tensors,
    }
}

fn restore(run: &RunConfig, task: &mut dyn Task, ck: &Checkpoint) -> Result<LoopState> {
    let saved = RunConfig::parse(&ck.config_echo, "checkpoint config")?;
    if saved.kind() != run.kind() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds a model={} run, this is a model={} run",
            saved.kind(),
            run.kind()
        )));
    }
    if !saved.same_run(run) {
        return Err(Error::ConfigMismatch(
            "checkpoint was written under a different configuration".into(),
        ));
    }
    let loaded = params_from(task.params(), ck)?;
    let mut adam = Adam::new(&loaded);
    adam.t = ck.adam_t;
    for i in 0..loaded.len() {
        let name = loaded.name(i);
        for (prefix, slot) in [("adam.m", &mut adam.m), ("adam.v", &mut adam.v)] {
            let t = ck
                .tensor(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks {prefix}.{name}")))?;
            if t.shape() != loaded.get(i).shape() {
                return Err(Error::ConfigMismatch(format!("{prefix}.{name} has the wrong shape")));
            }
            slot[i] = t.clone();
        }
        if loaded.get(i).shape() != task.params().get(i).shape() {
            return Err(Error::ConfigMismatch(format!("{name} has the wrong shape")));
        }
    }
    *task.params_mut() = loaded;
    task.restore_extra(ck)?;
    Ok(LoopState {
        step: ck.step,
        rng: ck.rng.restore(),
        cursor: ck.cursor,
        adam,
    })
}

struct MetricSink {
    path: PathBuf,
    records: Vec<MetricRecord>,
}

impl MetricSink {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        if !(append && path.exists()) {
            std::fs::write(&path, format!("{METRIC_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            path,
            records: Vec::new(),
        })
    }

    fn push(&mut self, r: MetricRecord) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{r}").map_err(|e| Error::io(&self.path, e))?;
        self.records.push(r);
        Ok(())
    }
}

fn is_numeric(e: &Error) -> bool {
    e.exit_code() == 3
}

fn run_loop(run: &RunConfig, task: &mut dyn Task, opts: TrainOptions) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
    let resuming = opts.resume.is_some();
    let mut st = match &opts.resume {
        Some(ck) => restore(run, task, ck)?,
        None => LoopState {
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(run.seed),
            cursor: DataCursor::default(),
            adam: Adam::new(task.params()),
        },
    };
    let total = run.schedule.total_steps;
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let mut sink = MetricSink::open(&run.out_dir, resuming)?;

    if !resuming && total > 0 && end > 0 {
        let (loss, metric) = task.validate()?;
        sink.push(MetricRecord {
            step: 0,
            lr: run.schedule.lr_at(0),
            loss,
            metric,
            split: Split::Valid,
        })?;
    }

    while st.step < end {
        let step = st.step + 1;
        let lr = run.schedule.lr_at(step);
        let emergency = |task: &dyn Task, st: &LoopState| {
            let _ = snapshot(run, task, st).save(&run.out_dir.join(EMERGENCY_FILE));
        };
        let (loss, metric, mut grads) = match task.step(&mut st.rng, &mut st.cursor) {
            Ok(v) => v,
            Err(e) if is_numeric(&e) => {
                emergency(task, &st);
                return Err(Error::NonFiniteLoss { step });
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            emergency(task, &st);
            return Err(Error::NonFiniteLoss { step });
        }
        if run.clip_norm > 0.0 {
            clip_global_norm(&mut grads, run.clip_norm);
        }
        if let Err(e) = st.adam.step(task.params_mut(), &grads, lr) {
            if is_numeric(&e) {
                emergency(task, &st);
            }
            return Err(e);
        }
        st.step = step;
        sink.push(MetricRecord {
            step,
            lr,
            loss,
            metric,
            split: Split::Train,
        })?;
        if step % run.valid_every == 0 || step == total {
            let (loss, metric) = task.validate()?;
            sink.push(MetricRecord {
                step,
                lr,
                loss,
                metric,
                split: Split::Valid,
            })?;
        }
        if run.checkpoint_every > 0 && step % run.checkpoint_every == 0 {
            snapshot(run, task, &st).save(&run.out_dir.join(format!("step-{step}.spck")))?;
        }
    }
    let checkpoint = snapshot(run, task, &st);
    checkpoint.save(&run.out_dir.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome {
        checkpoint,
        log: sink.records,
        skipped: task.skipped(),
    })
}
