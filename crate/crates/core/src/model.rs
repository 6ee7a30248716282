//! The res15-style dilated residual network with a configurable input length.
//!
//! Layer stack: 3×3 conv → ReLU, then `n_res_blocks` blocks of two bias-free
//! 3×3 convs (each conv → ReLU → batch-norm, identity skip added after the
//! second batch-norm), a final 3×3 conv with dilation 16 → batch-norm,
//! global average pooling, a linear head and softmax. Residual conv `i`
//! uses dilation `2^(i/3)`.

use rand::Rng as _;

use crate::audio::{FeatureNorm, FrontEnd, MfccConfig, MfccMatrix, Waveform};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::rng;
use crate::tensor::{BatchNormStats, Graph, Mode, Padding, Tensor, Var};

/// Input lengths of the student family, in milliseconds.
pub const STANDARD_DIMS_MS: [u32; 6] = [500, 600, 700, 800, 900, 1000];

/// MFCC window and shift that define the frame grid.
pub const WINDOW_MS: u32 = 30;
pub const SHIFT_MS: u32 = 10;

/// Keyword-spotting label set in class-index order.
pub const SPEECH_COMMANDS_LABELS: [&str; 12] =
    ["silence", "unknown", "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_ms: u32,
    pub n_features: usize,
    pub n_channels: usize,
    pub n_res_blocks: usize,
    pub kernel: (usize, usize),
    pub n_classes: usize,
    pub final_conv_dilation: usize,
}

impl NetworkSpec {
    /// res15: 45 channels, 6 residual blocks, 40 MFCC features, 12 classes.
    pub fn res15(input_ms: u32) -> Self {
        Self {
            input_ms,
            n_features: 40,
            n_channels: 45,
            n_res_blocks: 6,
            kernel: (3, 3),
            n_classes: 12,
            final_conv_dilation: 16,
        }
    }

    /// Desk-scale variant: 16 channels, 2 residual blocks, 10 features and
    /// 6 classes (4 words plus silence and unknown).
    pub fn desk(input_ms: u32) -> Self {
        Self {
            input_ms,
            n_features: 10,
            n_channels: 16,
            n_res_blocks: 2,
            kernel: (3, 3),
            n_classes: 6,
            final_conv_dilation: 16,
        }
    }

    pub fn with_input_ms(&self, input_ms: u32) -> Self {
        Self {
            input_ms,
            ..self.clone()
        }
    }

    /// `floor((input_ms − 30) / 10) + 1`.
    pub fn input_frames(&self) -> usize {
        ((self.input_ms.saturating_sub(WINDOW_MS)) / SHIFT_MS) as usize + 1
    }

    /// Dilation `(d_h, d_w)` of each residual-block convolution.
    pub fn dilation_schedule(&self) -> Vec<(usize, usize)> {
        (0..2 * self.n_res_blocks)
            .map(|i| {
                let d = 1usize << (i / 3);
                (d, d)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.input_ms < WINDOW_MS {
            return bad(format!("input of {} ms is shorter than one {WINDOW_MS} ms window", self.input_ms));
        }
        if self.n_features == 0 || self.n_channels == 0 {
            return bad("features and channels must be positive".into());
        }
        if self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return bad(format!("kernel {:?} must be odd for same padding", self.kernel));
        }
        if self.n_classes < 2 {
            return bad(format!("need at least two classes, got {}", self.n_classes));
        }
        if !self.final_conv_dilation.is_power_of_two() {
            return bad(format!("final dilation {} is not a power of two", self.final_conv_dilation));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("spec.input_ms", self.input_ms);
        kv.set("spec.n_features", self.n_features);
        kv.set("spec.n_channels", self.n_channels);
        kv.set("spec.n_res_blocks", self.n_res_blocks);
        kv.set("spec.kernel", format!("{},{}", self.kernel.0, self.kernel.1));
        kv.set("spec.n_classes", self.n_classes);
        kv.set("spec.final_conv_dilation", self.final_conv_dilation);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let kernel: Vec<usize> = kv.parse_list("spec.kernel")?.unwrap_or_else(|| vec![3, 3]);
        if kernel.len() != 2 {
            return Err(Error::InvalidSpec(format!("kernel needs two sizes, got {kernel:?}")));
        }
        let spec = Self {
            input_ms: kv.parse_required("spec.input_ms")?,
            n_features: kv.parse_required("spec.n_features")?,
            n_channels: kv.parse_required("spec.n_channels")?,
            n_res_blocks: kv.parse_required("spec.n_res_blocks")?,
            kernel: (kernel[0], kernel[1]),
            n_classes: kv.parse_required("spec.n_classes")?,
            final_conv_dilation: kv.parse_required("spec.final_conv_dilation")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Names of the batch-norm layers, in forward order.
fn bn_names(spec: &NetworkSpec) -> Vec<String> {
    let mut names: Vec<String> = (0..spec.n_res_blocks)
        .flat_map(|b| (0..2).map(move |j| format!("res{b}.bn{j}")))
        .collect();
    names.push("final.bn".into());
    names
}

/// Parameter names and shapes, in the order [`Network::params`] stores them.
fn param_layout(spec: &NetworkSpec) -> Vec<(String, Vec<usize>)> {
    let (kh, kw) = spec.kernel;
    let c = spec.n_channels;
    let mut out = vec![("conv0.weight".to_string(), vec![c, 1, kh, kw])];
    for b in 0..spec.n_res_blocks {
        for j in 0..2 {
            out.push((format!("res{b}.conv{j}.weight"), vec![c, c, kh, kw]));
            out.push((format!("res{b}.bn{j}.gamma"), vec![c]));
            out.push((format!("res{b}.bn{j}.beta"), vec![c]));
        }
    }
    out.push(("final.conv.weight".into(), vec![c, c, kh, kw]));
    out.push(("final.bn.gamma".into(), vec![c]));
    out.push(("final.bn.beta".into(), vec![c]));
    out.push(("head.weight".into(), vec![spec.n_classes, c]));
    out.push(("head.bias".into(), vec![spec.n_classes]));
    out
}

/// A network plus everything needed to run it on raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub front: FrontEnd,
    pub params: Vec<(String, Tensor<f32>)>,
    pub bn_stats: Vec<BatchNormStats<f32>>,
    pub norm: FeatureNorm,
    pub label_names: Vec<String>,
}

/// A recorded forward pass; `params[i]` is the graph leaf of
/// `Network::params[i]`.
pub struct ForwardPass {
    pub graph: Graph<f32>,
    pub params: Vec<Var>,
    pub probs: Var,
}

impl Network {
    /// Fresh network with fan-in scaled uniform weights drawn from `seed`,
    /// using [`default_front_end`] for its features.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let front = default_front_end(spec.n_features);
        Self::build_with(spec, front, seed)
    }

    pub fn build_with(spec: NetworkSpec, front: FrontEnd, seed: u64) -> Result<Self> {
        spec.validate()?;
        front.mfcc.validate()?;
        if front.mfcc.n_coeffs != spec.n_features {
            return Err(Error::InvalidSpec(format!(
                "front-end yields {} coefficients, network expects {}",
                front.mfcc.n_coeffs, spec.n_features
            )));
        }
        if front.mfcc.window_ms != WINDOW_MS || front.mfcc.shift_ms != SHIFT_MS {
            return Err(Error::InvalidSpec("front-end must use a 30 ms window and 10 ms shift".into()));
        }
        front.samples(spec.input_ms)?;
        let mut rng = rng::stream(seed, &[rng::name_id("init")]);
        let params = param_layout(&spec)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gamma") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with(".beta") || name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name.starts_with("head") { 3.0 } else { 6.0 };
                    let bound = (gain / fan_in as f64).sqrt() as f32;
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                };
                (name, t)
            })
            .collect();
        let bn_stats = bn_names(&spec).iter().map(|_| BatchNormStats::new(spec.n_channels)).collect();
        let label_names = default_labels(spec.n_classes);
        Ok(Self {
            norm: FeatureNorm::identity(spec.n_features),
            spec,
            front,
            params,
            bn_stats,
            label_names,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Samples in one network input.
    pub fn input_samples(&self) -> usize {
        self.front.samples(self.spec.input_ms).expect("validated at build time")
    }

    /// MFCC features of an already band-passed waveform of input length.
    pub fn featurize(&self, wave: &Waveform) -> Result<MfccMatrix> {
        if wave.sample_rate != self.front.sample_rate() {
            return Err(Error::Length(format!(
                "waveform at {} Hz, network expects {} Hz",
                wave.sample_rate,
                self.front.sample_rate()
            )));
        }
        if wave.len() != self.input_samples() {
            let found = self.front.mfcc.frames_for_samples(wave.len())?.unwrap_or(0);
            return Err(Error::FrameMismatch {
                expected: self.spec.input_frames(),
                found,
            });
        }
        Ok(self.front.features(wave)?)
    }

    /// Eval-mode probabilities for band-passed waveforms, in batches of
    /// `PREDICT_BATCH`.
    pub fn predict_waves(&self, waves: &[Waveform]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(waves.len());
        for chunk in waves.chunks(PREDICT_BATCH) {
            let feats = chunk.iter().map(|w| self.featurize(w)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MfccMatrix> = feats.iter().collect();
            let probs = self.predict_features(&refs)?;
            out.extend((0..chunk.len()).map(|i| probs.row(i).to_vec()));
        }
        Ok(out)
    }

    /// Stacks normalized features into a `[N, 1, frames, features]` batch.
    pub fn batch_from_features(&self, feats: &[&MfccMatrix]) -> Result<Tensor<f32>> {
        let frames = self.spec.input_frames();
        let mut data = Vec::with_capacity(feats.len() * frames * self.spec.n_features);
        for m in feats {
            if m.frames != frames {
                return Err(Error::FrameMismatch {
                    expected: frames,
                    found: m.frames,
                });
            }
            if m.coeffs != self.spec.n_features {
                return Err(Error::Length(format!(
                    "expected {} features per frame, found {}",
                    self.spec.n_features, m.coeffs
                )));
            }
            let mut m = (*m).clone();
            self.norm.apply(&mut m);
            data.extend_from_slice(&m.data);
        }
        Ok(Tensor::new(vec![feats.len(), 1, frames, self.spec.n_features], data)?)
    }

    fn check_input(&self, batch: &Tensor<f32>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != 1 || s[3] != self.spec.n_features {
            return Err(Error::Length(format!(
                "expected [N, 1, {}, {}] input, found {s:?}",
                self.spec.input_frames(),
                self.spec.n_features
            )));
        }
        if s[2] != self.spec.input_frames() {
            return Err(Error::FrameMismatch {
                expected: self.spec.input_frames(),
                found: s[2],
            });
        }
        Ok(())
    }

    fn record(&self, batch: Tensor<f32>, stats: &mut [BatchNormStats<f32>], mode: Mode) -> Result<ForwardPass> {
        self.check_input(&batch)?;
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter layout matches spec");
        let same = Padding::Same;
        let dilations = self.spec.dilation_schedule();
        let mut bn_idx = 0usize;

        let x = g.constant(batch);
        let w0 = take();
        let conv0 = g.conv2d(x, w0, (1, 1), same)?;
        let mut h = g.relu(conv0)?;
        for b in 0..self.spec.n_res_blocks {
            let skip = h;
            for j in 0..2 {
                let (w, gamma, beta) = (take(), take(), take());
                let c = g.conv2d(h, w, dilations[2 * b + j], same)?;
                let r = g.relu(c)?;
                h = g.batch_norm(r, gamma, beta, &mut stats[bn_idx], mode)?;
                bn_idx += 1;
            }
            h = g.add(h, skip)?;
        }
        let (w, gamma, beta) = (take(), take(), take());
        let d = self.spec.final_conv_dilation;
        let c = g.conv2d(h, w, (d, d), same)?;
        h = g.batch_norm(c, gamma, beta, &mut stats[bn_idx], mode)?;
        let pooled = g.global_avg_pool(h)?;
        let (hw, hb) = (take(), take());
        let logits = g.linear(pooled, hw, hb)?;
        let probs = g.softmax(logits)?;
        if !g.value(probs).all_finite() {
            return Err(crate::tensor::TensorError::NonFinite { op: "forward" }.into());
        }
        Ok(ForwardPass {
            graph: g,
            params,
            probs,
        })
    }

    /// Records a forward pass. In [`Mode::Train`] batch-norm running
    /// statistics are updated.
    pub fn forward(&mut self, batch: Tensor<f32>, mode: Mode) -> Result<ForwardPass> {
        let mut stats = std::mem::take(&mut self.bn_stats);
        let out = self.record(batch, &mut stats, mode);
        self.bn_stats = stats;
        out
    }

    /// Eval-mode class probabilities `[N, n_classes]`.
    pub fn predict(&self, batch: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut stats = self.bn_stats.clone();
        let pass = self.record(batch, &mut stats, Mode::Eval)?;
        Ok(pass.graph.value(pass.probs).clone())
    }

    /// Eval-mode probabilities for raw (unnormalized) feature matrices.
    pub fn predict_features(&self, feats: &[&MfccMatrix]) -> Result<Tensor<f32>> {
        self.predict(self.batch_from_features(feats)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = KvMap::new();
        self.spec.to_kv(&mut header);
        front_to_kv(&self.front, &mut header);
        header.set("labels", self.label_names.join(","));
        let mut tensors = self.params.clone();
        for (name, s) in bn_names(&self.spec).into_iter().zip(&self.bn_stats) {
            tensors.push((format!("{name}.running_mean"), vec_tensor(&s.mean)));
            tensors.push((format!("{name}.running_var"), vec_tensor(&s.var)));
        }
        tensors.push(("norm.mean".into(), vec_tensor(&self.norm.mean)));
        tensors.push(("norm.var".into(), vec_tensor(&self.norm.var)));
        Checkpoint {
            header,
            tensors,
            optimizer: Vec::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec = NetworkSpec::from_kv(&ckpt.header)?;
        let front = front_from_kv(&ckpt.header)?;
        let lookup = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, spec needs {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let params = param_layout(&spec)
            .into_iter()
            .map(|(name, shape)| lookup(&name, &shape).map(|t| (name, t)))
            .collect::<Result<Vec<_>>>()?;
        let c = spec.n_channels;
        let bn_stats = bn_names(&spec)
            .iter()
            .map(|name| {
                Ok(BatchNormStats {
                    mean: lookup(&format!("{name}.running_mean"), &[c])?.into_data(),
                    var: lookup(&format!("{name}.running_var"), &[c])?.into_data(),
                    momentum: 0.1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let f = spec.n_features;
        let norm = FeatureNorm {
            mean: lookup("norm.mean", &[f])?.into_data(),
            var: lookup("norm.var", &[f])?.into_data(),
        };
        let label_names = match ckpt.header.get("labels") {
            Some(l) if !l.is_empty() => l.split(',').map(str::to_string).collect(),
            _ => default_labels(spec.n_classes),
        };
        if label_names.len() != spec.n_classes {
            return Err(Error::Checkpoint(format!(
                "{} labels for {} classes",
                label_names.len(),
                spec.n_classes
            )));
        }
        let mut net = Self::build_with(spec, front, 0)?;
        net.params = params;
        net.bn_stats = bn_stats;
        net.norm = norm;
        net.label_names = label_names;
        Ok(net)
    }
}

const PREDICT_BATCH: usize = 128;

/// The standard 40-coefficient front-end, the desk front-end for 10
/// coefficients, and otherwise the standard one truncated to `n_features`.
pub fn default_front_end(n_features: usize) -> FrontEnd {
    let desk = FrontEnd::desk();
    if n_features == desk.mfcc.n_coeffs {
        return desk;
    }
    let mut front = FrontEnd::standard();
    front.mfcc.n_coeffs = n_features;
    front
}

fn front_to_kv(front: &FrontEnd, kv: &mut KvMap) {
    let m = &front.mfcc;
    kv.set("front.low_hz", front.low_hz);
    kv.set("front.high_hz", front.high_hz);
    kv.set("mfcc.sample_rate", m.sample_rate);
    kv.set("mfcc.window_ms", m.window_ms);
    kv.set("mfcc.shift_ms", m.shift_ms);
    kv.set("mfcc.n_fft", m.n_fft);
    kv.set("mfcc.n_mels", m.n_mels);
    kv.set("mfcc.n_coeffs", m.n_coeffs);
    kv.set("mfcc.low_hz", m.low_hz);
    kv.set("mfcc.high_hz", m.high_hz);
}

fn front_from_kv(kv: &KvMap) -> Result<FrontEnd> {
    Ok(FrontEnd {
        low_hz: kv.parse_required("front.low_hz")?,
        high_hz: kv.parse_required("front.high_hz")?,
        mfcc: MfccConfig {
            sample_rate: kv.parse_required("mfcc.sample_rate")?,
            window_ms: kv.parse_required("mfcc.window_ms")?,
            shift_ms: kv.parse_required("mfcc.shift_ms")?,
            n_fft: kv.parse_required("mfcc.n_fft")?,
            n_mels: kv.parse_required("mfcc.n_mels")?,
            n_coeffs: kv.parse_required("mfcc.n_coeffs")?,
            low_hz: kv.parse_required("mfcc.low_hz")?,
            high_hz: kv.parse_required("mfcc.high_hz")?,
        },
    })
}

fn vec_tensor(v: &[f32]) -> Tensor<f32> {
    Tensor::new(vec![v.len()], v.to_vec()).expect("rank-1 shape matches")
}

fn default_labels(n: usize) -> Vec<String> {
    if n == SPEECH_COMMANDS_LABELS.len() {
        SPEECH_COMMANDS_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("class{i}")).collect()
    }
}

/// FLOPs of one forward pass, split like the input-efficiency table.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub model: String,
    pub conv: u64,
    pub add: u64,
    pub pool: u64,
    pub total: u64,
    /// `total / total(1000 ms network)`.
    pub factor: f64,
}

impl FlopsReport {
    pub const CSV_HEADER: &'static str = "model,conv,add,pool,total,factor";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{:.2}", self.model, self.conv, self.add, self.pool, self.total, self.factor)
    }
}

/// Multiply-accumulates of one stride-1 "same" convolution.
pub fn conv_macs(h: usize, w: usize, c_in: usize, c_out: usize, kernel: (usize, usize)) -> u64 {
    (h * w * c_out * kernel.0 * kernel.1 * c_in) as u64
}

fn raw_flops(spec: &NetworkSpec) -> (u64, u64, u64) {
    let (h, w, c) = (spec.input_frames(), spec.n_features, spec.n_channels);
    let convs = conv_macs(h, w, 1, c, spec.kernel) + (2 * spec.n_res_blocks as u64 + 1) * conv_macs(h, w, c, c, spec.kernel);
    let add = (spec.n_res_blocks * c * h * w) as u64;
    let pool = (c * h * w) as u64;
    (2 * convs, add, pool)
}

/// FLOPs for `spec`, with the factor taken relative to the same
/// architecture at 1000 ms.
pub fn count_flops(spec: &NetworkSpec) -> FlopsReport {
    let (conv, add, pool) = raw_flops(spec);
    let total = conv + add + pool;
    let (rc, ra, rp) = raw_flops(&spec.with_input_ms(1000));
    FlopsReport {
        model: format!("C{}", spec.input_ms),
        conv,
        add,
        pool,
        total,
        factor: total as f64 / (rc + ra + rp) as f64,
    }
}
