//! Training: ground-truth teachers, single distillation steps and chains of
//! steps through decreasing input lengths.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::audio::{FeatureNorm, FrontEnd, MfccMatrix};
use crate::checkpoint::{hex_sha256, Checkpoint};
use crate::dataset::LabeledDataset;
use crate::distillation::{
    build_distilled_dataset, crop_rng, random_crop, DistillOptions, DistilledDataset, DistilledLabel, LabelMode,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, EvalReport};
use crate::kv::{join, KvMap};
use crate::model::{Network, NetworkSpec};
use crate::rng;
use crate::tensor::{sgd_step, LrSchedule, Mode, OptimizerState, SgdConfig, Target, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Random crops drawn per source clip per epoch when distilling.
    pub crops_per_source: usize,
    /// Draw the distilled crops once instead of every epoch.
    pub freeze_crops: bool,
}

impl Default for TrainingConfig {
    /// Batch 64, 25 epochs, learning rate 0.1 / 0.01 / 0.001 with drops at
    /// 6000 and 12000 iterations, momentum 0.9, weight decay 1e-5.
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 25,
            schedule: LrSchedule::reference_staircase(),
            sgd: SgdConfig::default(),
            seed: 0,
            crops_per_source: 3,
            freeze_crops: false,
        }
    }
}

impl TrainingConfig {
    /// Budget for the desk-scale synthetic corpus (about 1500 clips): six
    /// epochs, two crops per clip, and the same staircase with its drops
    /// moved to 60% and 90% of a student's 276 iterations. Teachers see one
    /// clip per example and finish before the first drop.
    pub fn desk() -> Self {
        Self {
            epochs: 6,
            crops_per_source: 2,
            schedule: LrSchedule::Staircase {
                rates: vec![0.1, 0.01, 0.001],
                boundaries: vec![166, 248],
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalization".into()));
        }
        if self.epochs == 0 || self.crops_per_source == 0 {
            return Err(Error::Config("epochs and crops_per_source must be positive".into()));
        }
        if !(self.sgd.momentum >= 0.0 && self.sgd.momentum < 1.0) || self.sgd.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        self.schedule.validate().map_err(Error::Config)
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        match &self.schedule {
            LrSchedule::Staircase { rates, boundaries } => {
                kv.set("lr_schedule", "staircase");
                kv.set("lr_rates", join(rates));
                kv.set("lr_boundaries", join(boundaries));
            }
            LrSchedule::ExponentialDecay {
                initial,
                decay_steps,
                decay_rate,
            } => {
                kv.set("lr_schedule", "exponential");
                kv.set("lr_initial", initial);
                kv.set("lr_decay_steps", decay_steps);
                kv.set("lr_decay_rate", decay_rate);
            }
        }
        kv.set("momentum", self.sgd.momentum);
        kv.set("weight_decay", self.sgd.weight_decay);
        kv.set("seed", self.seed);
        kv.set("crops_per_source", self.crops_per_source);
        kv.set("freeze_crops", self.freeze_crops);
    }

    /// Overrides fields present in `kv`.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.parse_value("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.parse_value("epochs")? {
            self.epochs = v;
        }
        match kv.get("lr_schedule") {
            None | Some("staircase") => {
                let (mut rates, mut boundaries) = match &self.schedule {
                    LrSchedule::Staircase { rates, boundaries } => (rates.clone(), boundaries.clone()),
                    _ => match LrSchedule::reference_staircase() {
                        LrSchedule::Staircase { rates, boundaries } => (rates, boundaries),
                        _ => unreachable!(),
                    },
                };
                if let Some(v) = kv.parse_list("lr_rates")? {
                    rates = v;
                }
                if let Some(v) = kv.parse_list("lr_boundaries")? {
                    boundaries = v;
                }
                self.schedule = LrSchedule::Staircase { rates, boundaries };
            }
            Some("exponential") => {
                self.schedule = LrSchedule::ExponentialDecay {
                    initial: kv.parse_value("lr_initial")?.unwrap_or(0.1),
                    decay_steps: kv.parse_value("lr_decay_steps")?.unwrap_or(1000),
                    decay_rate: kv.parse_value("lr_decay_rate")?.unwrap_or(0.9),
                };
            }
            Some(other) => return Err(Error::Config(format!("unknown lr_schedule {other:?}"))),
        }
        if let Some(v) = kv.parse_value("momentum")? {
            self.sgd.momentum = v;
        }
        if let Some(v) = kv.parse_value("weight_decay")? {
            self.sgd.weight_decay = v;
        }
        if let Some(v) = kv.parse_value("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.parse_value("crops_per_source")? {
            self.crops_per_source = v;
        }
        if let Some(v) = kv.parse_value("freeze_crops")? {
            self.freeze_crops = v;
        }
        self.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// One line of the JSON-lines run log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u128,
}

/// Receives one record per iteration.
pub type LogSink<'a> = Option<&'a mut dyn Write>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    /// Loss of every iteration.
    pub losses: Vec<f64>,
    pub wall_secs: f64,
}

impl TrainReport {
    /// Mean loss over the last `n` iterations.
    pub fn final_loss(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    /// Means of consecutive `window`-iteration blocks.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

#[derive(Clone, Debug)]
enum Label {
    Class(usize),
    Dist(Vec<f32>),
}

struct Example {
    features: MfccMatrix,
    label: Label,
}

/// Mini-batch SGD over examples regenerated by `epoch_data(epoch)`.
fn fit(
    net: &mut Network,
    cfg: &TrainingConfig,
    mut epoch_data: impl FnMut(usize) -> Result<Vec<Example>>,
    mut log: LogSink<'_>,
) -> Result<(TrainReport, OptimizerState<f32>)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut opt = {
        let refs: Vec<&Tensor<f32>> = net.params.iter().map(|(_, t)| t).collect();
        OptimizerState::new(cfg.sgd, &refs, cfg.schedule.rate(0))
    };
    let mut report = TrainReport::default();
    let mut iter = 0usize;
    let mut data = Vec::new();
    for epoch in 0..cfg.epochs {
        if epoch == 0 || !cfg.freeze_crops {
            data = epoch_data(epoch)?;
            if data.is_empty() {
                return Err(Error::Dataset("no training examples".into()));
            }
        }
        if epoch == 0 {
            net.norm = FeatureNorm::fit(data.iter().map(|e| &e.features)).expect("non-empty");
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::name_id("shuffle"), epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let feats: Vec<&MfccMatrix> = batch.iter().map(|&i| &data[i].features).collect();
            let x = net.batch_from_features(&feats)?;
            let target = match &data[batch[0]].label {
                Label::Class(_) => Target::Classes(
                    batch
                        .iter()
                        .map(|&i| match &data[i].label {
                            Label::Class(c) => Ok(*c),
                            Label::Dist(_) => Err(Error::Dataset("mixed label kinds".into())),
                        })
                        .collect::<Result<_>>()?,
                ),
                Label::Dist(first) => {
                    let mut flat = Vec::with_capacity(batch.len() * first.len());
                    for &i in batch {
                        match &data[i].label {
                            Label::Dist(p) => flat.extend_from_slice(p),
                            Label::Class(_) => return Err(Error::Dataset("mixed label kinds".into())),
                        }
                    }
                    Target::Distribution(Tensor::new(vec![batch.len(), first.len()], flat)?)
                }
            };
            let mut pass = net.forward(x, Mode::Train)?;
            let loss = pass.graph.cross_entropy(pass.probs, target)?;
            let loss_value = pass.graph.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged { iter, loss: loss_value });
            }
            let mut grads = pass.graph.backward(loss).map_err(|e| match e {
                crate::tensor::TensorError::NonFinite { .. } => Error::Diverged { iter, loss: loss_value },
                other => other.into(),
            })?;
            let grads: Vec<Tensor<f32>> = pass
                .params
                .iter()
                .zip(&net.params)
                .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            opt.learning_rate = cfg.schedule.rate(iter);
            {
                let mut params: Vec<&mut Tensor<f32>> = net.params.iter_mut().map(|(_, t)| t).collect();
                let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
                sgd_step(&mut params, &grad_refs, &mut opt)?;
            }
            if let Some(w) = log.as_mut() {
                let rec = LogRecord {
                    iter,
                    epoch,
                    lr: opt.learning_rate,
                    loss: loss_value,
                    wall_ms: start.elapsed().as_millis(),
                };
                serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            report.losses.push(loss_value);
            iter += 1;
        }
    }
    report.iterations = iter;
    report.wall_secs = start.elapsed().as_secs_f64();
    Ok((report, opt))
}

fn check_clips(data: &LabeledDataset, front: &FrontEnd, ms: u32) -> Result<LabeledDataset> {
    let prepared = data.prepared(front)?;
    let want = front.samples(ms)?;
    let len = prepared.clip_len()?;
    if len != want {
        return Err(Error::FrameMismatch {
            expected: front.mfcc.frames_for_samples(want)?.unwrap_or(0),
            found: front.mfcc.frames_for_samples(len)?.unwrap_or(0),
        });
    }
    Ok(prepared)
}

fn fresh_network(spec: &NetworkSpec, front: &FrontEnd, data: &LabeledDataset, seed: u64) -> Result<Network> {
    if data.n_classes() != spec.n_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, network has {}",
            data.n_classes(),
            spec.n_classes
        )));
    }
    let mut net = Network::build_with(spec.clone(), front.clone(), rng::derive_seed(seed, &[rng::name_id("init")]))?;
    net.label_names = data.label_names.clone();
    Ok(net)
}

/// Trained network with its report and final optimizer state.
#[derive(Clone, Debug)]
pub struct Trained {
    pub net: Network,
    pub report: TrainReport,
    pub optimizer: OptimizerState<f32>,
}

impl Trained {
    /// Checkpoint with the optimizer velocities appended.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.net.to_checkpoint();
        c.optimizer = self
            .net
            .params
            .iter()
            .zip(&self.optimizer.velocity)
            .map(|((name, _), v)| (format!("velocity.{name}"), v.clone()))
            .collect();
        c.header.set("optimizer.learning_rate", self.optimizer.learning_rate);
        c.header.set("train.iterations", self.report.iterations);
        c
    }
}

/// Cross-entropy training against ground-truth labels on full clips whose
/// length matches `spec.input_ms`.
pub fn train_teacher(
    data: &LabeledDataset,
    spec: &NetworkSpec,
    front: &FrontEnd,
    cfg: &TrainingConfig,
    log: LogSink<'_>,
) -> Result<Trained> {
    let data = check_clips(data, front, spec.input_ms)?;
    let mut net = fresh_network(spec, front, &data, cfg.seed)?;
    let feats = data
        .samples
        .iter()
        .map(|s| front.features(&s.wave).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let (report, optimizer) = fit(
        &mut net,
        cfg,
        |_| {
            Ok(feats
                .iter()
                .zip(&data.samples)
                .map(|(f, s)| Example {
                    features: f.clone(),
                    label: Label::Class(s.label),
                })
                .collect())
        },
        log,
    )?;
    Ok(Trained {
        net,
        report,
        optimizer,
    })
}

/// Baseline without distillation: random crops of length `tgt_ms` keep the
/// label of the clip they were cut from.
pub fn train_on_raw_crops(
    data: &LabeledDataset,
    spec: &NetworkSpec,
    front: &FrontEnd,
    cfg: &TrainingConfig,
    log: LogSink<'_>,
) -> Result<Trained> {
    let data = data.prepared(front)?;
    let tgt_len = front.samples(spec.input_ms)?;
    let mut net = fresh_network(spec, front, &data, cfg.seed)?;
    let (report, optimizer) = fit(
        &mut net,
        cfg,
        |epoch| {
            let mut out = Vec::with_capacity(data.len() * cfg.crops_per_source);
            for (si, s) in data.samples.iter().enumerate() {
                for ci in 0..cfg.crops_per_source {
                    let mut r = crop_rng(cfg.seed, epoch as u64, si, ci);
                    let (c, _) = random_crop(&s.wave, tgt_len, &mut r)?;
                    out.push(Example {
                        features: front.features(&c)?,
                        label: Label::Class(s.label),
                    });
                }
            }
            Ok(out)
        },
        log,
    )?;
    Ok(Trained {
        net,
        report,
        optimizer,
    })
}

fn distilled_examples(ds: DistilledDataset) -> Vec<Example> {
    ds.samples
        .into_iter()
        .map(|s| Example {
            features: s.features,
            label: match s.label {
                DistilledLabel::Hard(c) => Label::Class(c),
                DistilledLabel::Soft(p) => Label::Dist(p),
            },
        })
        .collect()
}

/// One distillation step: a student of length `tgt_ms` trained only on
/// teacher-labelled random crops of `data` (regenerated every epoch unless
/// `cfg.freeze_crops`).
pub fn distill_step(
    teacher: &Network,
    data: &LabeledDataset,
    tgt_ms: u32,
    cfg: &TrainingConfig,
    mode: LabelMode,
    log: LogSink<'_>,
) -> Result<Trained> {
    if tgt_ms >= teacher.spec.input_ms {
        return Err(Error::Config(format!(
            "student length {tgt_ms} ms must be below the teacher's {} ms",
            teacher.spec.input_ms
        )));
    }
    let data = data.prepared(&teacher.front)?;
    let spec = teacher.spec.with_input_ms(tgt_ms);
    let mut net = fresh_network(&spec, &teacher.front, &data, cfg.seed)?;
    net.label_names = teacher.label_names.clone();
    let (report, optimizer) = fit(
        &mut net,
        cfg,
        |epoch| {
            let opts = DistillOptions {
                tgt_ms,
                crops_per_source: cfg.crops_per_source,
                mode,
                seed: cfg.seed,
                epoch: epoch as u64,
            };
            Ok(distilled_examples(build_distilled_dataset(teacher, &data, &opts)?))
        },
        log,
    )?;
    Ok(Trained {
        net,
        report,
        optimizer,
    })
}

/// Input lengths of a chain, from the teacher down, plus the label mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec {
    pub dims_ms: Vec<u32>,
    pub label_mode: LabelMode,
    pub training: TrainingConfig,
}

impl ChainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims_ms.len() < 2 {
            return Err(Error::Config("a chain needs at least a teacher and one student".into()));
        }
        if self.dims_ms.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!("chain dims {:?} must be strictly decreasing", self.dims_ms)));
        }
        self.training.validate()
    }

    /// Training seed of position `step` (0 = teacher). It depends only on
    /// the global seed and the dims up to `step`, so chains sharing a prefix
    /// share its networks.
    pub fn step_seed(&self, step: usize) -> u64 {
        let mut ids = vec![rng::name_id("chain-step")];
        ids.extend(self.dims_ms[..=step].iter().map(|&d| d as u64));
        rng::derive_seed(self.training.seed, &ids)
    }

    pub fn step_config(&self, step: usize) -> TrainingConfig {
        self.training.with_seed(self.step_seed(step))
    }

    /// Number of distillation steps.
    pub fn steps(&self) -> usize {
        self.dims_ms.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainStep {
    pub dim_ms: u32,
    pub checkpoint: Option<PathBuf>,
    pub eval: EvalReport,
    pub wall_secs: f64,
    /// Taken from a checkpoint or memo instead of trained.
    pub resumed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainResult {
    pub dims_ms: Vec<u32>,
    pub label_mode: LabelMode,
    pub steps: Vec<ChainStep>,
}

impl ChainResult {
    pub fn final_accuracy(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.eval.accuracy)
    }

    /// Header for [`ChainResult::table3_row`].
    pub const TABLE3_HEADER: &'static str = "steps,dims_ms,label_mode,final_ms,accuracy";

    pub fn table3_row(&self) -> String {
        format!(
            "{},{},{},{},{:.2}",
            self.dims_ms.len().saturating_sub(1),
            self.dims_ms.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-"),
            self.label_mode,
            self.dims_ms.last().copied().unwrap_or(0),
            100.0 * self.final_accuracy()
        )
    }

    pub const STEPS_HEADER: &'static str = "dim_ms,accuracy,checkpoint";

    /// Per-step accuracies; wall times stay in the training logs so the file
    /// is reproducible.
    pub fn steps_csv(&self) -> String {
        let mut out = format!("{}\n", Self::STEPS_HEADER);
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.4},{}\n",
                s.dim_ms,
                100.0 * s.eval.accuracy,
                s.checkpoint
                    .as_ref()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            ));
        }
        out
    }
}

/// Where and how [`run_chain`] keeps its artifacts.
#[derive(Clone, Debug, Default)]
pub struct ChainOptions {
    /// Checkpoints `c<dim>.ckpt`, `steps.csv` and `log_c<dim>.jsonl` go here.
    pub out_dir: Option<PathBuf>,
    /// Reuse checkpoints whose fingerprint matches instead of retraining.
    pub resume: bool,
    pub eval: EvalOptions,
}

/// Identity of a chain prefix: everything that determines its networks.
fn fingerprint(spec: &ChainSpec, step: usize, net_spec: &NetworkSpec, front_kv: &str, data: &LabeledDataset) -> String {
    let mut kv = KvMap::new();
    spec.training.to_kv(&mut kv);
    net_spec.with_input_ms(0).to_kv(&mut kv);
    kv.set("dims", join(&spec.dims_ms[..=step]));
    kv.set("label_mode", if step == 0 { "truth".to_string() } else { spec.label_mode.to_string() });
    let mut text = kv.to_text();
    text.push_str(front_kv);
    for s in &data.samples {
        text.push_str(&format!("{}:{}:{}\n", s.id, s.label, s.wave.len()));
    }
    hex_sha256(text.as_bytes())
}

fn open_log(dir: Option<&Path>, dim: u32) -> Result<Option<std::io::BufWriter<std::fs::File>>> {
    dir.map(|d| Ok(std::io::BufWriter::new(std::fs::File::create(d.join(format!("log_c{dim}.jsonl")))?)))
        .transpose()
}

/// Networks of already-trained chain prefixes, keyed by prefix fingerprint.
/// Chains that share a prefix (every chain shares its teacher) reuse them.
#[derive(Clone, Debug, Default)]
pub struct ChainMemo {
    nets: HashMap<String, Network>,
}

impl ChainMemo {
    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }
}

/// Trains the teacher at `dims_ms[0]` on ground truth, then distills step
/// by step; each student becomes the next teacher. Every step crops from
/// the original clips and is evaluated on `test`.
///
/// With an output directory, each network is checkpointed and `steps.csv`
/// is rewritten after every step, so a failure keeps completed steps.
pub fn run_chain(
    spec: &ChainSpec,
    net_spec: &NetworkSpec,
    front: &FrontEnd,
    train: &LabeledDataset,
    test: &LabeledDataset,
    opts: &ChainOptions,
) -> Result<ChainResult> {
    run_chain_with(spec, net_spec, front, train, test, opts, &mut ChainMemo::default())
}

/// [`run_chain`] that first looks for each prefix in `memo` and records
/// every network it trains there.
pub fn run_chain_with(
    spec: &ChainSpec,
    net_spec: &NetworkSpec,
    front: &FrontEnd,
    train: &LabeledDataset,
    test: &LabeledDataset,
    opts: &ChainOptions,
    memo: &mut ChainMemo,
) -> Result<ChainResult> {
    spec.validate()?;
    let train = train.prepared(front)?;
    let test = test.prepared(front)?;
    if let Some(d) = &opts.out_dir {
        std::fs::create_dir_all(d)?;
    }
    let front_kv = {
        let probe = Network::build_with(net_spec.with_input_ms(spec.dims_ms[0]), front.clone(), 0)?;
        probe.to_checkpoint().header.to_text()
    };
    let mut result = ChainResult {
        dims_ms: spec.dims_ms.clone(),
        label_mode: spec.label_mode,
        steps: Vec::new(),
    };
    let mut teacher: Option<Network> = None;
    for (step, &dim) in spec.dims_ms.iter().enumerate() {
        let start = Instant::now();
        let fp = fingerprint(spec, step, net_spec, &front_kv, &train);
        let path = opts.out_dir.as_ref().map(|d| d.join(format!("c{dim}.ckpt")));
        let resumed = match (&path, opts.resume) {
            _ if memo.nets.contains_key(&fp) => memo.nets.get(&fp).cloned(),
            (Some(p), true) if p.exists() => {
                let ckpt = Checkpoint::load(p)?;
                (ckpt.header.get("chain.fingerprint") == Some(fp.as_str()))
                    .then(|| Network::from_checkpoint(&ckpt))
                    .transpose()?
            }
            _ => None,
        };
        let was_resumed = resumed.is_some();
        let net = match resumed {
            Some(net) => net,
            None => {
                let cfg = spec.step_config(step);
                let mut log = open_log(opts.out_dir.as_deref(), dim)?;
                let sink: LogSink<'_> = log.as_mut().map(|w| w as &mut dyn Write);
                let trained = match &teacher {
                    None => train_teacher(&train, &net_spec.with_input_ms(dim), front, &cfg, sink),
                    Some(t) => distill_step(t, &train, dim, &cfg, spec.label_mode, sink),
                };
                let trained = trained.map_err(|e| Error::ChainFailed {
                    completed: step,
                    source: Box::new(e),
                })?;
                if let Some(w) = log.as_mut() {
                    w.flush()?;
                }
                if let Some(p) = &path {
                    let mut ckpt = trained.to_checkpoint();
                    ckpt.header.set("chain.fingerprint", &fp);
                    ckpt.header.set("chain.dims", join(&spec.dims_ms[..=step]));
                    ckpt.save(p)?;
                }
                trained.net
            }
        };
        memo.nets.entry(fp).or_insert_with(|| net.clone());
        let eval = evaluate(&net, &test, &opts.eval)?;
        result.steps.push(ChainStep {
            dim_ms: dim,
            checkpoint: path,
            eval,
            wall_secs: start.elapsed().as_secs_f64(),
            resumed: was_resumed,
        });
        if let Some(d) = &opts.out_dir {
            std::fs::write(d.join("steps.csv"), result.steps_csv())?;
        }
        teacher = Some(net);
    }
    Ok(result)
}

/// The eleven chains of the progressive-distillation table, all ending at
/// 500 ms: one direct step, four two-step, three three-step, two four-step
/// and the five-step chain through every 100 ms.
pub fn table3_chains() -> Vec<Vec<u32>> {
    vec![
        vec![1000, 500],
        vec![1000, 600, 500],
        vec![1000, 700, 500],
        vec![1000, 800, 500],
        vec![1000, 900, 500],
        vec![1000, 700, 600, 500],
        vec![1000, 800, 600, 500],
        vec![1000, 900, 700, 500],
        vec![1000, 800, 700, 600, 500],
        vec![1000, 900, 800, 700, 500],
        vec![1000, 900, 800, 700, 600, 500],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_validation() {
        let ok = ChainSpec {
            dims_ms: vec![1000, 800, 500],
            label_mode: LabelMode::Soft,
            training: TrainingConfig::default(),
        };
        assert!(ok.validate().is_ok());
        assert!(ChainSpec { dims_ms: vec![1000], ..ok.clone() }.validate().is_err());
        assert!(ChainSpec { dims_ms: vec![1000, 1000], ..ok.clone() }.validate().is_err());
        assert!(ChainSpec { dims_ms: vec![500, 800], ..ok }.validate().is_err());
    }

    #[test]
    fn step_seeds_depend_on_prefix_only() {
        let t = TrainingConfig::default();
        let a = ChainSpec {
            dims_ms: vec![1000, 800, 500],
            label_mode: LabelMode::Soft,
            training: t.clone(),
        };
        let b = ChainSpec {
            dims_ms: vec![1000, 500],
            label_mode: LabelMode::Soft,
            training: t,
        };
        assert_eq!(a.step_seed(0), b.step_seed(0));
        assert_ne!(a.step_seed(1), b.step_seed(1));
    }

    #[test]
    fn table3_has_eleven_chains() {
        let c = table3_chains();
        assert_eq!(c.len(), 11);
        assert!(c.iter().all(|d| d[0] == 1000 && *d.last().unwrap() == 500));
        assert!(c.iter().all(|d| d.windows(2).all(|w| w[0] > w[1])));
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = TrainingConfig {
            epochs: 7,
            seed: 9,
            schedule: LrSchedule::Staircase {
                rates: vec![0.05, 0.005],
                boundaries: vec![300],
            },
            ..TrainingConfig::default()
        };
        let mut kv = KvMap::new();
        cfg.to_kv(&mut kv);
        let mut back = TrainingConfig::default();
        back.apply_kv(&kv).unwrap();
        assert_eq!(back, cfg);
        let mut kv = KvMap::new();
        kv.set("lr_schedule", "exponential");
        let mut exp = TrainingConfig::default();
        exp.apply_kv(&kv).unwrap();
        assert_eq!(exp.schedule.rate(2500), 0.1 * 0.9f64.powi(2));
    }
}
