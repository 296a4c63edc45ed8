//! Mini-batch joint training.
//!
//! Every step cuts a fixed-length crop from each utterance of the batch,
//! optionally corrupts it, computes Fbank features and runs the encoder in
//! training mode. The speaker loss comes from the embedding; the speech loss
//! compares the tapped feature map, pooled to the teacher's frame rate, with
//! the teacher vectors of the same crop. Parameters are updated with Adam
//! under a step learning-rate schedule.
//!
//! # Checkpoint layout
//!
//! ```text
//! b"JTSSCKPT"   magic
//! u32 LE        format version (1)
//! u64 LE        header length in bytes
//! header        UTF-8 JSON: setup echo, class count, teacher dim, epoch,
//!               optimizer state and the tensor table
//! f64 LE ...    tensor data in table order, row-major
//! ```
//!
//! Tensor table entries are `{group, name, shape}` with groups `param`,
//! `buffer`, `adam_m` and `adam_v`. Parameter names are stable: the encoder
//! uses `encoder.*`, the class-weight matrix is `classifier.weight` and the
//! optional projection is `projection.weight` / `projection.bias`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{augment, load_waveform, AugmentConfig, FbankExtractor, FeatureMatrix, Waveform, SAMPLE_RATE};
use crate::backbones::{features_to_batch, Backbone, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{aam_softmax_graph, speech_loss_graph, time_max_pool, total_loss, AamConfig, LossWeights};
use crate::nn::{Forward, ParamStore};
use crate::ops;
use crate::teacher::{load_teacher, synthetic_teacher, teacher_dir_checksum, teacher_frames, TeacherSequence, TeacherSource, TEACHER_HOP};
use crate::tensor::Tensor;

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const PROJECTION_WEIGHT: &str = "projection.weight";
pub const PROJECTION_BIAS: &str = "projection.bias";

const CHECKPOINT_MAGIC: &[u8; 8] = b"JTSSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

// ChaCha streams, one per purpose, so that e.g. adding a projection does not
// shift the crop offsets.
const STREAM_CLASSIFIER: u64 = 1;
const STREAM_PROJECTION: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_CROP: u64 = 4;
const STREAM_AUGMENT: u64 = 5;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------- manifest

/// One utterance of a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: usize,
    pub path: PathBuf,
    pub n_samples: usize,
}

/// Utterance list; relative paths resolve against `base_dir`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::format("manifest", format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(e);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, base_dir })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Loads an utterance and checks its length against the manifest.
    pub fn load_waveform(&self, entry: &ManifestEntry) -> Result<Waveform> {
        let w = load_waveform(self.resolve(entry))?;
        if w.len() != entry.n_samples {
            return Err(Error::format(
                "manifest",
                format!("{}: n_samples {} but the file has {}", entry.utt_id, entry.n_samples, w.len()),
            ));
        }
        Ok(w)
    }

    /// Number of classes; speaker ids must cover `0..C` without gaps.
    pub fn num_classes(&self) -> Result<usize> {
        let max = self
            .entries
            .iter()
            .map(|e| e.speaker_id)
            .max()
            .ok_or_else(|| Error::invalid("manifest is empty"))?;
        let mut seen = vec![false; max + 1];
        for e in &self.entries {
            seen[e.speaker_id] = true;
        }
        let gaps: Vec<usize> = (0..=max).filter(|&s| !seen[s]).collect();
        if !gaps.is_empty() {
            return Err(Error::invalid(format!("speaker labels have gaps: {gaps:?} unused")));
        }
        Ok(max + 1)
    }
}

// ----------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub scheduler: Scheduler,
    pub step_epochs: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_seconds: f64,
    pub lambda: f64,
    pub tap_layer: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub aam: AamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            scheduler: Scheduler::Step,
            step_epochs: 10,
            gamma: 0.5,
            epochs: 80,
            batch_size: 100,
            crop_seconds: 2.0,
            lambda: 0.1,
            tap_layer: 0,
            seed: 0,
            grad_clip: 5.0,
            aam: AamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.step_epochs == 0 {
            return Err(Error::invalid("step_epochs must be at least 1"));
        }
        if !(self.crop_seconds > 0.0 && self.crop_seconds.is_finite()) {
            return Err(Error::invalid(format!("crop_seconds must be positive, got {}", self.crop_seconds)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("grad_clip must be >= 0"));
        }
        self.aam.validate()?;
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda }
    }

    pub fn crop_samples(&self) -> usize {
        crop_samples(self.crop_seconds)
    }
}

/// Learning rate for `epoch` (0-based): `lr · gamma^floor(epoch / step_epochs)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.scheduler {
        Scheduler::Step => cfg.lr * cfg.gamma.powi((epoch / cfg.step_epochs) as i32),
    }
}

/// Everything `fit` needs besides data: echoed into checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSetup {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl TrainSetup {
    /// Encoder config with the tap layer taken from the training config.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            tap_layer: self.train.tap_layer,
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.train.validate()?;
        self.augment.validate()
    }
}

// ------------------------------------------------------------------- crops

pub fn crop_samples(crop_seconds: f64) -> usize {
    (crop_seconds * SAMPLE_RATE as f64).round() as usize
}

/// A training crop and where it starts in the source utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub waveform: Waveform,
    pub offset: usize,
}

/// Start offsets are multiples of the teacher hop so crops stay aligned with
/// stored teacher frames.
pub fn crop_offset(len: usize, crop_len: usize, rng: &mut impl Rng) -> usize {
    if len <= crop_len {
        return 0;
    }
    let slots = (len - crop_len) / TEACHER_HOP;
    rng.random_range(0..=slots) * TEACHER_HOP
}

/// `crop_len` samples starting at `offset`, wrapping around the end.
pub fn crop_at(w: &Waveform, crop_len: usize, offset: usize) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::invalid("cannot crop an empty waveform"));
    }
    let s = w.samples();
    Waveform::new((0..crop_len).map(|i| s[(offset + i) % s.len()]).collect())
}

/// Crop of `round(crop_seconds · 16000)` samples at a seed-derived offset.
pub fn sample_crop(w: &Waveform, crop_seconds: f64, seed: u64) -> Result<Crop> {
    if w.is_empty() {
        return Err(Error::invalid("cannot crop an empty waveform"));
    }
    if !(crop_seconds > 0.0) {
        return Err(Error::invalid("crop_seconds must be positive"));
    }
    let crop_len = crop_samples(crop_seconds);
    let offset = crop_offset(w.len(), crop_len, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Crop {
        waveform: crop_at(w, crop_len, offset)?,
        offset,
    })
}

// ------------------------------------------------------------------- model

/// Everything trainable: the encoder, the class weights and the optional
/// projection into the teacher space. Holds no teacher parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct JtssModel {
    pub encoder: Backbone,
    pub head: ParamStore,
}

impl JtssModel {
    /// `teacher_dim` adds a projection when it differs from the tap width.
    pub fn new(encoder_cfg: EncoderConfig, num_classes: usize, teacher_dim: Option<usize>, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        let encoder = Backbone::new(encoder_cfg, seed)?;
        let e = encoder.config().embed_dim;
        let mut head = ParamStore::new();
        let mut rng = stream_rng(seed, STREAM_CLASSIFIER);
        let mut w: Vec<f64> = (0..num_classes * e).map(|_| StandardNormal.sample(&mut rng)).collect();
        for row in w.chunks_mut(e) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        head.insert_param(CLASSIFIER_WEIGHT, Tensor::from_vec(&[num_classes, e], w));
        let tap = encoder.config().tap_width();
        if let Some(dt) = teacher_dim.filter(|&dt| dt != tap) {
            let mut rng = stream_rng(seed, STREAM_PROJECTION);
            head.init_conv(&mut rng, "projection", dt, tap, 1, true);
        }
        Ok(Self { encoder, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.param(CLASSIFIER_WEIGHT).map_or(0, |w| w.shape()[0])
    }

    pub fn has_projection(&self) -> bool {
        self.head.contains(PROJECTION_WEIGHT)
    }

    /// Every trainable parameter name, sorted.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .encoder
            .params()
            .param_names()
            .chain(self.head.param_names())
            .map(str::to_string)
            .collect();
        names.sort();
        names
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder.params().num_scalars() + self.head.num_scalars()
    }
}

// --------------------------------------------------------------- optimizer

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Applies one update to every parameter of `store` that has a gradient.
    /// Call [`Adam::advance`] once before updating the stores of a step.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, grad_scale: f64) {
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = lr / bc1;
        let names: Vec<String> = store.param_names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.param_mut(&name).expect("listed parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gi = gi * grad_scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let denom = vi.sqrt() / bc2_sqrt + self.eps;
                *pi -= step_size * *mi / denom;
            }
        }
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.m.iter().map(|(k, m)| (k.as_str(), m, &self.v[k]))
    }
}

// -------------------------------------------------------------------- step

/// One mini-batch: features `[B, mels, T]`, labels and, when the teacher
/// branch is active, teacher vectors `[B, D̃, T_v]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub teacher: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub l_speaker: f64,
    pub l_speech: f64,
    pub l_total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped_frames: usize,
}

/// Teacher sequences (rows = frames) as a `[B, D, T]` tensor.
pub fn teacher_batch(seqs: &[TeacherSequence]) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| Error::invalid("empty teacher batch"))?;
    let (t, d) = first.vectors.dim();
    let mut data = Vec::with_capacity(seqs.len() * t * d);
    for s in seqs {
        if s.vectors.dim() != (t, d) {
            return Err(Error::ShapeMismatch(format!(
                "teacher {} is {:?}, batch expects {:?}",
                s.utt_id,
                s.vectors.dim(),
                (t, d)
            )));
        }
        for c in 0..d {
            data.extend(s.vectors.column(c).iter().copied());
        }
    }
    Ok(Tensor::from_vec(&[seqs.len(), d, t], data))
}

/// One optimizer update.
///
/// The speech loss is evaluated whenever the batch carries teacher vectors;
/// it contributes to the gradient only when `lambda > 0`.
pub fn train_step(model: &mut JtssModel, opt: &mut Adam, batch: &Batch, lr: f64, cfg: &TrainConfig) -> Result<StepMetrics> {
    if cfg.lambda > 0.0 && batch.teacher.is_none() {
        return Err(Error::Missing {
            kind: "teacher features",
            name: format!("batch of {} utterances with lambda {}", batch.labels.len(), cfg.lambda),
        });
    }
    let mut fwd = Forward::new(true);
    let x = fwd.constant(batch.features.clone());
    let out = model.encoder.forward(&mut fwd, x)?;
    let w = fwd.param(&model.head, CLASSIFIER_WEIGHT);
    let spk = aam_softmax_graph(&mut fwd.graph, out.embedding, w, &batch.labels, &cfg.aam)?;
    let l_speaker = fwd.value(spk).item();

    let mut root = spk;
    let mut l_speech = 0.0;
    let mut skipped_frames = 0;
    if let Some(v) = &batch.teacher {
        let mut z = time_max_pool(&mut fwd.graph, out.tap, v.shape()[2])?;
        if model.has_projection() {
            let pw = fwd.param(&model.head, PROJECTION_WEIGHT);
            let pb = fwd.param(&model.head, PROJECTION_BIAS);
            z = ops::conv1d(&mut fwd.graph, z, pw, Some(pb), 1, 0);
        }
        let (sp, skipped) = speech_loss_graph(&mut fwd.graph, z, v)?;
        l_speech = fwd.value(sp).item();
        skipped_frames = skipped;
        if cfg.lambda > 0.0 {
            let weighted = ops::scale(&mut fwd.graph, sp, cfg.lambda);
            root = ops::add(&mut fwd.graph, spk, weighted);
        }
    }
    let l_total = total_loss(l_speaker, l_speech, cfg.loss_weights());
    if !l_total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {}: l_speaker={l_speaker} l_speech={l_speech}",
            opt.step + 1
        )));
    }

    let grads = fwd.param_grads(root);
    let grad_norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at step {}", opt.step + 1)));
    }
    let clipped = cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip;
    let grad_scale = if clipped {
        debug!("step {}: clipping gradient norm {grad_norm:.4} to {}", opt.step + 1, cfg.grad_clip);
        cfg.grad_clip / grad_norm
    } else {
        1.0
    };
    opt.advance();
    opt.update(model.encoder.params_mut(), &grads, lr, grad_scale);
    opt.update(&mut model.head, &grads, lr, grad_scale);
    for (prefix, stats) in fwd.take_bn_stats() {
        model.encoder.params_mut().update_running_stats(&prefix, &stats);
    }
    Ok(StepMetrics {
        l_speaker,
        l_speech,
        l_total,
        grad_norm,
        clipped,
        skipped_frames,
    })
}

// --------------------------------------------------------------------- fit

/// Per-epoch means; `l_total` is recombined from the means so that the
/// logged row satisfies the same identity as every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub l_speaker: f64,
    pub l_speech: f64,
    pub l_total: f64,
    pub steps: usize,
    pub clipped_steps: usize,
}

pub const METRIC_LOG_HEADER: &str = "epoch,lr,l_speaker,l_speech,l_total";

pub fn write_metric_log(mut w: impl Write, log: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(w, "{METRIC_LOG_HEADER}")?;
    for m in log {
        writeln!(w, "{},{},{},{},{}", m.epoch, m.lr, m.l_speaker, m.l_speech, m.l_total)?;
    }
    Ok(())
}

pub fn metric_log_string(log: &[EpochMetrics]) -> String {
    let mut buf = Vec::new();
    write_metric_log(&mut buf, log).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
    pub steps: Vec<StepMetrics>,
    /// Teacher directory checksum before and after training (file-backed only).
    pub teacher_checksum: Option<(String, String)>,
}

/// Full-utterance teacher vectors, cached for file-backed sources.
enum TeacherCache {
    Off,
    Files(Vec<TeacherSequence>),
    Synthetic { seed: u64, dim: usize },
}

impl TeacherCache {
    fn for_crop(&self, idx: usize, utt_id: &str, crop: &Crop, seen: &Waveform) -> Result<Option<TeacherSequence>> {
        match self {
            TeacherCache::Off => Ok(None),
            TeacherCache::Files(seqs) => seqs[idx].slice_for_crop(crop.offset, crop.waveform.len()).map(Some),
            TeacherCache::Synthetic { seed, dim } => {
                let mut s = synthetic_teacher(seen, *dim, *seed)?;
                s.utt_id = utt_id.to_string();
                Ok(Some(s))
            }
        }
    }
}

/// Trains a fresh model on `manifest`.
///
/// The teacher is only consulted when `lambda > 0`; with `lambda == 0` the
/// run is the speaker-only baseline and `teacher` may be `None`.
pub fn fit(manifest: &Manifest, teacher: Option<&TeacherSource>, setup: &TrainSetup) -> Result<FitOutcome> {
    setup.validate()?;
    let cfg = &setup.train;
    if manifest.is_empty() {
        return Err(Error::invalid("training manifest is empty"));
    }
    let num_classes = manifest.num_classes()?;
    let crop_len = cfg.crop_samples();
    teacher_frames(crop_len)?;
    let teacher = if cfg.lambda > 0.0 {
        let src = teacher.ok_or_else(|| Error::Missing {
            kind: "teacher source",
            name: format!("required for lambda {}", cfg.lambda),
        })?;
        src.validate()?;
        Some(src)
    } else {
        None
    };

    let waveforms: Vec<Waveform> = manifest
        .entries
        .iter()
        .map(|e| manifest.load_waveform(e))
        .collect::<Result<_>>()?;
    let checksum_before = match teacher {
        Some(TeacherSource::FileBacked { root, .. }) => Some(teacher_dir_checksum(root)?),
        _ => None,
    };
    let cache = match teacher {
        None => TeacherCache::Off,
        Some(src @ TeacherSource::FileBacked { .. }) => TeacherCache::Files(
            manifest
                .entries
                .iter()
                .map(|e| {
                    let s = load_teacher(src, &e.utt_id, None)?;
                    let want = teacher_frames(e.n_samples)?;
                    if s.num_frames() != want {
                        return Err(Error::ShapeMismatch(format!(
                            "teacher {} has {} frames, {} samples imply {want}",
                            e.utt_id,
                            s.num_frames(),
                            e.n_samples
                        )));
                    }
                    Ok(s)
                })
                .collect::<Result<_>>()?,
        ),
        Some(&TeacherSource::Synthetic { seed, dim }) => TeacherCache::Synthetic { seed, dim },
    };

    let encoder_cfg = setup.encoder_config();
    let fbank = FbankExtractor::new(encoder_cfg.num_mels)?;
    let mut model = JtssModel::new(encoder_cfg, num_classes, teacher.map(TeacherSource::dim), cfg.seed)?;
    let mut opt = Adam::default();
    let policy = if setup.augment.prob > 0.0 {
        Some(setup.augment.policy(cfg.seed)?)
    } else {
        None
    };
    info!(
        "training {} parameters on {} utterances, {num_classes} speakers, lambda {}",
        model.num_parameters(),
        manifest.len(),
        cfg.lambda
    );

    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut crop_rng = stream_rng(cfg.seed, STREAM_CROP);
    let mut aug_rng = stream_rng(cfg.seed, STREAM_AUGMENT);
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0);
        let mut n_steps = 0;
        let mut clipped_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut feats = Vec::with_capacity(chunk.len());
            let mut seqs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let entry = &manifest.entries[i];
                let offset = crop_offset(waveforms[i].len(), crop_len, &mut crop_rng);
                let crop = Crop {
                    waveform: crop_at(&waveforms[i], crop_len, offset)?,
                    offset,
                };
                let seen = match &policy {
                    Some(p) if aug_rng.random::<f64>() < setup.augment.prob => {
                        let mut p = p.clone();
                        p.seed = aug_rng.random();
                        augment(&crop.waveform, &p)?
                    }
                    _ => crop.waveform.clone(),
                };
                if let Some(s) = cache.for_crop(i, &entry.utt_id, &crop, &seen)? {
                    seqs.push(s);
                }
                feats.push(fbank.compute(&seen)?);
                labels.push(entry.speaker_id);
            }
            let refs: Vec<_> = feats.iter().collect();
            let batch = Batch {
                features: features_to_batch(&refs)?,
                labels,
                teacher: if seqs.is_empty() { None } else { Some(teacher_batch(&seqs)?) },
            };
            let m = train_step(&mut model, &mut opt, &batch, lr, cfg)?;
            sums.0 += m.l_speaker;
            sums.1 += m.l_speech;
            n_steps += 1;
            clipped_steps += m.clipped as usize;
            steps.push(m);
        }
        let l_speaker = sums.0 / n_steps as f64;
        let l_speech = sums.1 / n_steps as f64;
        let em = EpochMetrics {
            epoch,
            lr,
            l_speaker,
            l_speech,
            l_total: total_loss(l_speaker, l_speech, cfg.loss_weights()),
            steps: n_steps,
            clipped_steps,
        };
        info!(
            "epoch {epoch}: lr {lr} l_speaker {l_speaker:.4} l_speech {l_speech:.4} ({clipped_steps}/{n_steps} steps clipped)"
        );
        log.push(em);
    }

    let teacher_checksum = match (teacher, checksum_before) {
        (Some(TeacherSource::FileBacked { root, .. }), Some(before)) => {
            let after = teacher_dir_checksum(root)?;
            if after != before {
                return Err(Error::Degenerate(format!(
                    "teacher features under {} changed during training",
                    root.display()
                )));
            }
            Some((before, after))
        }
        _ => None,
    };
    Ok(FitOutcome {
        checkpoint: Checkpoint {
            setup: setup.clone(),
            num_classes,
            teacher_dim: teacher.map(TeacherSource::dim),
            epoch: cfg.epochs,
            model,
            optimizer: opt,
        },
        log,
        steps,
        teacher_checksum,
    })
}

// -------------------------------------------------------------- checkpoint

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub setup: TrainSetup,
    pub num_classes: usize,
    pub teacher_dim: Option<usize>,
    /// Completed epochs.
    pub epoch: usize,
    pub model: JtssModel,
    pub optimizer: Adam,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    setup: TrainSetup,
    tap_layer: usize,
    num_classes: usize,
    teacher_dim: Option<usize>,
    epoch: usize,
    adam: AdamHeader,
    tensors: Vec<TensorEntry>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::format("checkpoint", "truncated file"));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(&str, &str, &Tensor)> = Vec::new();
        for (n, t) in self.model.encoder.params().params().chain(self.model.head.params()) {
            entries.push(("param", n, t));
        }
        for (n, t) in self.model.encoder.params().buffers() {
            entries.push(("buffer", n, t));
        }
        for (n, m, _) in self.optimizer.moments() {
            entries.push(("adam_m", n, m));
        }
        for (n, _, v) in self.optimizer.moments() {
            entries.push(("adam_v", n, v));
        }
        let header = CheckpointHeader {
            setup: self.setup.clone(),
            tap_layer: self.model.encoder.config().tap_layer,
            num_classes: self.num_classes,
            teacher_dim: self.teacher_dim,
            epoch: self.epoch,
            adam: AdamHeader {
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                step: self.optimizer.step,
            },
            tensors: entries
                .iter()
                .map(|(g, n, t)| TensorEntry {
                    group: g.to_string(),
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20 + 8 * entries.iter().map(|e| e.2.numel()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in &entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let b = &mut bytes;
        if take(b, 8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = u32::from_le_bytes(take(b, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(take(b, 8)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(b, hlen)?)?;
        let mut params = ParamStore::new();
        let mut head = ParamStore::new();
        let mut adam = Adam {
            beta1: header.adam.beta1,
            beta2: header.adam.beta2,
            eps: header.adam.eps,
            step: header.adam.step,
            ..Adam::default()
        };
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = take(b, 8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(&e.shape, data);
            match e.group.as_str() {
                "param" if e.name.starts_with("encoder.") => params.insert_param(&e.name, t),
                "param" => head.insert_param(&e.name, t),
                "buffer" => params.insert_buffer(&e.name, t),
                "adam_m" => {
                    adam.m.insert(e.name.clone(), t);
                }
                "adam_v" => {
                    adam.v.insert(e.name.clone(), t);
                }
                g => return Err(Error::format("checkpoint", format!("unknown tensor group {g}"))),
            }
        }
        if !b.is_empty() {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", b.len())));
        }
        if adam.m.keys().ne(adam.v.keys()) {
            return Err(Error::format("checkpoint", "optimizer moments do not pair up"));
        }
        let encoder_cfg = EncoderConfig {
            tap_layer: header.tap_layer,
            ..header.setup.encoder.clone()
        };
        let encoder = Backbone::from_parts(encoder_cfg, params)?;
        if !head.contains(CLASSIFIER_WEIGHT) {
            return Err(Error::Missing {
                kind: "parameter",
                name: CLASSIFIER_WEIGHT.into(),
            });
        }
        Ok(Self {
            setup: header.setup,
            num_classes: header.num_classes,
            teacher_dim: header.teacher_dim,
            epoch: header.epoch,
            model: JtssModel { encoder, head },
            optimizer: adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Fbank features of every utterance, keyed by `utt_id`.
pub fn manifest_features(manifest: &Manifest, num_mels: usize) -> Result<Vec<(String, FeatureMatrix)>> {
    let fbank = FbankExtractor::new(num_mels)?;
    manifest
        .entries
        .iter()
        .map(|e| Ok((e.utt_id.clone(), fbank.compute(&manifest.load_waveform(e)?)?)))
        .collect()
}
