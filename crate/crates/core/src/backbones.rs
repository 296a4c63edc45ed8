//! Speaker-embedding encoders with selectable frame-level tap layers.
//!
//! Both encoders expose five frame-level layers, numbered 0–4, and the tap is
//! the output of the named layer. Neither architecture subsamples in time.
//!
//! ECAPA-TDNN (`same` padding, so every layer keeps the input frame count):
//!
//! | layer | block                       | width |
//! |-------|-----------------------------|-------|
//! | 0     | TDNN, kernel 5              | C     |
//! | 1     | SE-Res2Block, dilation 2    | C     |
//! | 2     | SE-Res2Block, dilation 3    | C     |
//! | 3     | SE-Res2Block, dilation 4    | C     |
//! | 4     | TDNN over concat(1, 2, 3)   | 3C    |
//!
//! followed by attentive statistics pooling with global context, batch norm
//! and an affine map to the embedding.
//!
//! x-vector (unpadded convolutions, so the context shrinks the frame count):
//!
//! | layer | context        | width | frames at tap |
//! |-------|----------------|-------|---------------|
//! | 0     | {-2..2}        | C     | T - 4         |
//! | 1     | {-2, 0, 2}     | C     | T - 8         |
//! | 2     | {-3, 0, 3}     | C     | T - 14        |
//! | 3     | {0}            | C     | T - 14        |
//! | 4     | {0}            | 3C    | T - 14        |
//!
//! followed by mean/std statistics pooling and the first affine layer, whose
//! output is the embedding.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Forward, ParamStore};
use crate::ops;
use crate::tensor::Tensor;

pub const NUM_TAP_LAYERS: usize = 5;
pub const RES2_SCALE: usize = 8;

/// Frames lost by the x-vector stack up to and including each layer.
pub const XVECTOR_CONTEXT_LOSS: [usize; NUM_TAP_LAYERS] = [4, 8, 14, 14, 14];

const XVECTOR_LAYERS: [(usize, usize); NUM_TAP_LAYERS] = [(5, 1), (3, 2), (3, 3), (1, 1), (1, 1)];
const ECAPA_DILATIONS: [usize; 3] = [2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Xvector,
    Ecapa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub channels: usize,
    pub embed_dim: usize,
    /// Layer whose output feeds the speech loss; set by the training config.
    #[serde(skip)]
    pub tap_layer: usize,
    pub num_mels: usize,
    /// Bottleneck width of the ECAPA attention network.
    pub attention_channels: usize,
    /// Bottleneck width of the ECAPA squeeze-excitation blocks.
    pub se_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::ecapa()
    }
}

impl EncoderConfig {
    pub fn ecapa() -> Self {
        Self {
            arch: Arch::Ecapa,
            channels: 512,
            embed_dim: 192,
            tap_layer: 0,
            num_mels: 80,
            attention_channels: 128,
            se_channels: 128,
        }
    }

    pub fn xvector() -> Self {
        Self {
            arch: Arch::Xvector,
            channels: 512,
            embed_dim: 512,
            tap_layer: 0,
            num_mels: 40,
            attention_channels: 128,
            se_channels: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_layer >= NUM_TAP_LAYERS {
            return Err(Error::invalid(format!(
                "tap_layer {} out of range 0..{}",
                self.tap_layer,
                NUM_TAP_LAYERS - 1
            )));
        }
        if self.channels < 8 {
            return Err(Error::invalid("channels must be at least 8"));
        }
        if self.embed_dim < 8 {
            return Err(Error::invalid("embed_dim must be at least 8"));
        }
        if self.num_mels == 0 {
            return Err(Error::invalid("num_mels must be positive"));
        }
        if self.arch == Arch::Ecapa {
            if !self.channels.is_multiple_of(RES2_SCALE) {
                return Err(Error::invalid(format!(
                    "ECAPA channels must be divisible by the Res2 scale {RES2_SCALE}"
                )));
            }
            if self.attention_channels == 0 || self.se_channels == 0 {
                return Err(Error::invalid("attention and SE widths must be positive"));
            }
        }
        Ok(())
    }

    /// Channel width of the feature map at `layer`.
    pub fn layer_width(&self, layer: usize) -> usize {
        if layer == 4 {
            3 * self.channels
        } else {
            self.channels
        }
    }

    pub fn tap_width(&self) -> usize {
        self.layer_width(self.tap_layer)
    }

    /// Frames at the tap layer for `t_in` input frames, `None` if too short.
    pub fn tap_frames(&self, t_in: usize) -> Option<usize> {
        self.frames_at(self.tap_layer, t_in)
    }

    pub fn frames_at(&self, layer: usize, t_in: usize) -> Option<usize> {
        match self.arch {
            Arch::Ecapa => (t_in >= 1).then_some(t_in),
            Arch::Xvector => t_in
                .checked_sub(XVECTOR_CONTEXT_LOSS[NUM_TAP_LAYERS - 1])
                .filter(|r| *r >= 1)
                .map(|_| t_in - XVECTOR_CONTEXT_LOSS[layer]),
        }
    }

    /// Minimum number of input frames the whole stack accepts.
    pub fn min_input_frames(&self) -> usize {
        match self.arch {
            Arch::Ecapa => 1,
            Arch::Xvector => XVECTOR_CONTEXT_LOSS[NUM_TAP_LAYERS - 1] + 1,
        }
    }
}

/// Frame-level feature map `X`, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMap {
    pub frames: Array2<f64>,
    pub tap_layer: usize,
}

impl FrameMap {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub utt_id: String,
    pub vector: Array1<f64>,
}

impl SpeakerEmbedding {
    pub fn new(utt_id: impl Into<String>, vector: Array1<f64>) -> Self {
        Self {
            utt_id: utt_id.into(),
            vector,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Graph handles produced by one encoder pass.
pub struct EncoderOutput {
    /// All five frame-level outputs, `[B, width, frames]`.
    pub layers: Vec<Var>,
    /// The configured tap layer's output.
    pub tap: Var,
    /// Utterance embeddings, `[B, embed_dim]`.
    pub embedding: Var,
}

/// Mean ‖ standard deviation over frames with the given per-frame weights
/// (shared across channels). Weights should sum to one.
pub fn attentive_stats_pool(frames: &FrameMap, weights: &[f64]) -> Result<Array1<f64>> {
    let (t, d) = frames.frames.dim();
    if t == 0 || weights.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "{} attention weights for {t} frames",
            weights.len()
        )));
    }
    let mut out = Array1::zeros(2 * d);
    for c in 0..d {
        let col: Vec<f64> = frames.frames.column(c).to_vec();
        let (m, s) = ops::weighted_moments(&col, weights);
        out[c] = m;
        out[d + c] = s;
    }
    Ok(out)
}

/// Uniform-weight statistics pooling (population standard deviation).
pub fn stats_pool(frames: &FrameMap) -> Result<Array1<f64>> {
    let t = frames.num_frames();
    attentive_stats_pool(frames, &vec![1.0 / t.max(1) as f64; t])
}

/// Speaker encoder: architecture config plus its parameters (`encoder.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: EncoderConfig,
    params: ParamStore,
}

fn uniform_weights(bsz: usize, c: usize, t: usize) -> Tensor {
    Tensor::full(&[bsz, c, t], 1.0 / t as f64)
}

impl Backbone {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = cfg.channels;
        match cfg.arch {
            Arch::Ecapa => {
                init_tdnn(&mut p, &mut rng, "encoder.layer0", c, cfg.num_mels, 5);
                let width = c / RES2_SCALE;
                for l in 1..=3 {
                    let pre = format!("encoder.layer{l}");
                    init_tdnn(&mut p, &mut rng, &format!("{pre}.tdnn1"), c, c, 1);
                    for i in 1..RES2_SCALE {
                        init_tdnn(&mut p, &mut rng, &format!("{pre}.res2.{i}"), width, width, 3);
                    }
                    init_tdnn(&mut p, &mut rng, &format!("{pre}.tdnn2"), c, c, 1);
                    p.init_linear(&mut rng, &format!("{pre}.se.fc1"), cfg.se_channels, c, true);
                    p.init_linear(&mut rng, &format!("{pre}.se.fc2"), c, cfg.se_channels, true);
                }
                init_tdnn(&mut p, &mut rng, "encoder.layer4", 3 * c, 3 * c, 1);
                let pooled = 3 * c;
                init_tdnn(&mut p, &mut rng, "encoder.pool.tdnn", cfg.attention_channels, 3 * pooled, 1);
                // No bias: a per-channel offset is invisible to the softmax over time.
                p.init_conv(&mut rng, "encoder.pool.conv", pooled, cfg.attention_channels, 1, false);
                p.init_batch_norm("encoder.pool_bn", 2 * pooled);
                p.init_linear(&mut rng, "encoder.embedding", cfg.embed_dim, 2 * pooled, true);
            }
            Arch::Xvector => {
                let mut cin = cfg.num_mels;
                for (l, &(k, _)) in XVECTOR_LAYERS.iter().enumerate() {
                    let cout = cfg.layer_width(l);
                    init_tdnn(&mut p, &mut rng, &format!("encoder.layer{l}"), cout, cin, k);
                    cin = cout;
                }
                p.init_linear(&mut rng, "encoder.embedding", cfg.embed_dim, 2 * cin, true);
            }
        }
        Ok(Self { cfg, params: p })
    }

    pub fn from_parts(cfg: EncoderConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let reference = Backbone::new(cfg.clone(), 0)?;
        for (name, t) in reference.params.params() {
            match params.param(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter {name}: expected {:?}, found {:?}",
                        t.shape(),
                        p.shape()
                    )))
                }
                None => {
                    return Err(Error::Missing {
                        kind: "parameter",
                        name: name.to_string(),
                    })
                }
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Returns a copy reading its tap at a different layer; weights are shared.
    pub fn with_tap(&self, tap_layer: usize) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.tap_layer = tap_layer;
        cfg.validate()?;
        Ok(Self {
            cfg,
            params: self.params.clone(),
        })
    }

    /// Records the encoder on `fwd` for a `[B, num_mels, T]` feature batch.
    pub fn forward(&self, fwd: &mut Forward, feats: Var) -> Result<EncoderOutput> {
        let (_, f, t) = fwd.value(feats).dims3();
        if f != self.cfg.num_mels {
            return Err(Error::ShapeMismatch(format!(
                "features have {f} mel bins, encoder expects {}",
                self.cfg.num_mels
            )));
        }
        if t < self.cfg.min_input_frames() {
            return Err(Error::TooShort {
                got: t,
                need: self.cfg.min_input_frames(),
            });
        }
        let layers = match self.cfg.arch {
            Arch::Ecapa => self.ecapa_layers(fwd, feats),
            Arch::Xvector => self.xvector_layers(fwd, feats),
        };
        let embedding = match self.cfg.arch {
            Arch::Ecapa => self.ecapa_head(fwd, layers[4]),
            Arch::Xvector => self.xvector_head(fwd, layers[4]),
        };
        Ok(EncoderOutput {
            tap: layers[self.cfg.tap_layer],
            layers,
            embedding,
        })
    }

    fn ecapa_layers(&self, fwd: &mut Forward, x: Var) -> Vec<Var> {
        let p = &self.params;
        let l0 = fwd.tdnn_block(p, "encoder.layer0", x, 1, 2);
        let mut layers = vec![l0];
        let mut h = l0;
        for (i, &d) in ECAPA_DILATIONS.iter().enumerate() {
            h = self.se_res2_block(fwd, &format!("encoder.layer{}", i + 1), h, d);
            layers.push(h);
        }
        let cat = ops::concat_channels(&mut fwd.graph, &layers[1..4]);
        let l4 = fwd.tdnn_block(p, "encoder.layer4", cat, 1, 0);
        layers.push(l4);
        layers
    }

    fn se_res2_block(&self, fwd: &mut Forward, prefix: &str, x: Var, dilation: usize) -> Var {
        let p = &self.params;
        let c = self.cfg.channels;
        let width = c / RES2_SCALE;
        let h = fwd.tdnn_block(p, &format!("{prefix}.tdnn1"), x, 1, 0);
        let mut outs = Vec::with_capacity(RES2_SCALE);
        let mut prev: Option<Var> = None;
        for i in 0..RES2_SCALE {
            let chunk = ops::narrow_channels(&mut fwd.graph, h, i * width, width);
            let y = if i == 0 {
                chunk
            } else {
                let inp = match prev {
                    Some(pv) if i > 1 => ops::add(&mut fwd.graph, chunk, pv),
                    _ => chunk,
                };
                fwd.tdnn_block(p, &format!("{prefix}.res2.{i}"), inp, dilation, dilation)
            };
            prev = Some(y);
            outs.push(y);
        }
        let h = ops::concat_channels(&mut fwd.graph, &outs);
        let h = fwd.tdnn_block(p, &format!("{prefix}.tdnn2"), h, 1, 0);
        // squeeze-excitation
        let s = ops::mean_time(&mut fwd.graph, h);
        let s = fwd.linear(p, &format!("{prefix}.se.fc1"), s, true);
        let s = ops::relu(&mut fwd.graph, s);
        let s = fwd.linear(p, &format!("{prefix}.se.fc2"), s, true);
        let s = ops::sigmoid(&mut fwd.graph, s);
        let h = ops::scale_channels(&mut fwd.graph, h, s);
        ops::add(&mut fwd.graph, h, x)
    }

    fn ecapa_head(&self, fwd: &mut Forward, x: Var) -> Var {
        let p = &self.params;
        let (bsz, c, t) = fwd.value(x).dims3();
        let uniform = fwd.constant(uniform_weights(bsz, c, t));
        let global = ops::weighted_stats(&mut fwd.graph, x, uniform);
        let global = ops::broadcast_time(&mut fwd.graph, global, t);
        let attn_in = ops::concat_channels(&mut fwd.graph, &[x, global]);
        let a = fwd.tdnn_block(p, "encoder.pool.tdnn", attn_in, 1, 0);
        let a = ops::tanh(&mut fwd.graph, a);
        let w = fwd.param(p, "encoder.pool.conv.weight");
        let a = ops::conv1d(&mut fwd.graph, a, w, None, 1, 0);
        let a = ops::softmax_time(&mut fwd.graph, a);
        let pooled = ops::weighted_stats(&mut fwd.graph, x, a);
        let pooled = ops::reshape(&mut fwd.graph, pooled, &[bsz, 2 * c, 1]);
        let pooled = fwd.batch_norm(p, "encoder.pool_bn", pooled);
        let pooled = ops::reshape(&mut fwd.graph, pooled, &[bsz, 2 * c]);
        fwd.linear(p, "encoder.embedding", pooled, true)
    }

    fn xvector_layers(&self, fwd: &mut Forward, x: Var) -> Vec<Var> {
        let mut h = x;
        XVECTOR_LAYERS
            .iter()
            .enumerate()
            .map(|(l, &(_, d))| {
                h = fwd.tdnn_block(&self.params, &format!("encoder.layer{l}"), h, d, 0);
                h
            })
            .collect()
    }

    fn xvector_head(&self, fwd: &mut Forward, x: Var) -> Var {
        let (bsz, c, t) = fwd.value(x).dims3();
        let uniform = fwd.constant(uniform_weights(bsz, c, t));
        let pooled = ops::weighted_stats(&mut fwd.graph, x, uniform);
        fwd.linear(&self.params, "encoder.embedding", pooled, true)
    }

    /// Inference-mode pass over one utterance: the tap-layer feature map and
    /// the embedding from the same forward pass.
    pub fn encoder_forward(&self, feats: &FeatureMatrix) -> Result<(FrameMap, SpeakerEmbedding)> {
        let mut fwd = Forward::new(false);
        let x = fwd.constant(features_to_batch(&[feats])?);
        let out = self.forward(&mut fwd, x)?;
        let tap = fwd.value(out.tap);
        let (_, d, t) = tap.dims3();
        let frames = Array2::from_shape_fn((t, d), |(ti, di)| tap.data()[di * t + ti]);
        let emb = Array1::from(fwd.value(out.embedding).data().to_vec());
        Ok((
            FrameMap {
                frames,
                tap_layer: self.cfg.tap_layer,
            },
            SpeakerEmbedding::new("", emb),
        ))
    }

    /// Inference-mode embeddings for a batch of equally long utterances.
    pub fn embed_batch(&self, feats: &[&FeatureMatrix]) -> Result<Vec<Array1<f64>>> {
        let mut fwd = Forward::new(false);
        let x = fwd.constant(features_to_batch(feats)?);
        let out = self.forward(&mut fwd, x)?;
        let e = fwd.value(out.embedding);
        let dim = self.cfg.embed_dim;
        Ok(e.data().chunks(dim).map(|r| Array1::from(r.to_vec())).collect())
    }
}

fn init_tdnn(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cout: usize, cin: usize, k: usize) {
    p.init_conv(rng, &format!("{prefix}.conv"), cout, cin, k, true);
    p.init_batch_norm(&format!("{prefix}.bn"), cout);
}

/// Stacks `frames × mels` matrices into a `[B, mels, frames]` tensor.
pub fn features_to_batch(feats: &[&FeatureMatrix]) -> Result<Tensor> {
    let first = feats.first().ok_or_else(|| Error::invalid("empty feature batch"))?;
    let (t, f) = (first.num_frames(), first.num_mels());
    let mut data = Vec::with_capacity(feats.len() * t * f);
    for m in feats {
        if m.num_frames() != t || m.num_mels() != f {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {}x{} with {t}x{f} features",
                m.num_frames(),
                m.num_mels()
            )));
        }
        let fr = m.frames();
        for c in 0..f {
            data.extend(fr.column(c).iter().copied());
        }
    }
    Ok(Tensor::from_vec(&[feats.len(), f, t], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn toy(arch: Arch) -> EncoderConfig {
        EncoderConfig {
            arch,
            channels: 16,
            embed_dim: 8,
            tap_layer: 0,
            num_mels: 12,
            attention_channels: 8,
            se_channels: 4,
        }
    }

    fn random_feats(seed: u64, t: usize, f: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(Array2::from_shape_fn((t, f), |_| rng.random_range(-2.0..2.0)))
    }

    #[test]
    fn pooling_examples() {
        let u = array![0.5, -1.0, 2.0];
        let frames = FrameMap {
            frames: Array2::from_shape_fn((4, 3), |(_, c)| u[c]),
            tap_layer: 0,
        };
        let out = attentive_stats_pool(&frames, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        for c in 0..3 {
            assert!((out[c] - u[c]).abs() < 1e-12);
            assert_eq!(out[3 + c], 0.0);
        }

        let two = FrameMap {
            frames: array![[0.5, -1.0, 2.0], [-0.5, 1.0, -2.0]],
            tap_layer: 0,
        };
        let out = attentive_stats_pool(&two, &[0.5, 0.5]).unwrap();
        assert!(out.iter().take(3).all(|v| *v == 0.0));

        let single = FrameMap {
            frames: array![[0.5, -1.0, 2.0]],
            tap_layer: 0,
        };
        let out = stats_pool(&single).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[0.5, -1.0, 2.0, 0.0, 0.0, 0.0]);

        let pair = FrameMap {
            frames: array![[0.0, 0.0, 0.0], [1.0, -2.0, 4.0]],
            tap_layer: 0,
        };
        let out = stats_pool(&pair).unwrap();
        let want = [0.5, -1.0, 2.0, 0.5, 1.0, 2.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn brute_moments(x: &Array2<f64>, w: &[f64]) -> Vec<f64> {
        let (t, d) = x.dim();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for c in 0..d {
            let mut m = 0.0;
            for i in 0..t {
                m += w[i] * x[[i, c]];
            }
            let mut v = 0.0;
            for i in 0..t {
                v += w[i] * (x[[i, c]] - m).powi(2);
            }
            mean[c] = m;
            std[c] = v.sqrt();
        }
        mean.into_iter().chain(std).collect()
    }

    #[test]
    fn pooling_matches_brute_force_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x5 = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let fm = FrameMap { frames: x5.clone(), tap_layer: 0 };
        let out = attentive_stats_pool(&fm, &[0.2; 5]).unwrap();
        for (a, b) in out.iter().zip(brute_moments(&x5, &[0.2; 5])) {
            assert!((a - b).abs() < 1e-12);
        }
        let x7 = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let fm = FrameMap { frames: x7.clone(), tap_layer: 0 };
        let out = stats_pool(&fm).unwrap();
        for (a, b) in out.iter().zip(brute_moments(&x7, &[1.0 / 7.0; 7])) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = toy(Arch::Ecapa);
        c.tap_layer = 5;
        assert!(c.validate().is_err());
        let mut c = toy(Arch::Ecapa);
        c.channels = 12;
        assert!(c.validate().is_err());
        let mut c = toy(Arch::Xvector);
        c.embed_dim = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes_and_tap_frame_counts() {
        let feats = random_feats(1, 30, 12);
        for arch in [Arch::Ecapa, Arch::Xvector] {
            let base = Backbone::new(toy(arch), 3).unwrap();
            let mut embeddings = Vec::new();
            for tap in 0..NUM_TAP_LAYERS {
                let enc = base.with_tap(tap).unwrap();
                let (fm, emb) = enc.encoder_forward(&feats).unwrap();
                assert_eq!(fm.num_frames(), enc.config().tap_frames(30).unwrap(), "{arch:?} tap {tap}");
                assert_eq!(fm.dim(), enc.config().layer_width(tap));
                assert_eq!(emb.dim(), 8);
                embeddings.push(emb.vector);
            }
            assert!(embeddings.windows(2).all(|w| w[0] == w[1]), "tap must be read-only");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let enc = Backbone::new(toy(Arch::Ecapa), 0).unwrap();
        assert!(matches!(
            enc.encoder_forward(&random_feats(0, 10, 13)),
            Err(Error::ShapeMismatch(_))
        ));
        let xv = Backbone::new(toy(Arch::Xvector), 0).unwrap();
        assert!(matches!(
            xv.encoder_forward(&random_feats(0, 14, 12)),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn inference_is_deterministic_across_batch_members() {
        let enc = Backbone::new(toy(Arch::Ecapa), 5).unwrap();
        let f = random_feats(9, 20, 12);
        let out = enc.embed_batch(&[&f, &f]).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0], enc.encoder_forward(&f).unwrap().1.vector);
    }

    #[test]
    fn every_parameter_receives_speaker_gradient() {
        use crate::losses::{aam_softmax_graph, AamConfig};
        for arch in [Arch::Ecapa, Arch::Xvector] {
            let enc = Backbone::new(toy(arch), 3).unwrap();
            let feats: Vec<FeatureMatrix> = (0..4).map(|i| random_feats(i, 24, 12)).collect();
            let refs: Vec<&FeatureMatrix> = feats.iter().collect();
            let mut fwd = Forward::new(true);
            let x = fwd.constant(features_to_batch(&refs).unwrap());
            let out = enc.forward(&mut fwd, x).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let w = fwd.constant(Tensor::from_vec(&[3, 8], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()));
            let loss = aam_softmax_graph(&mut fwd.graph, out.embedding, w, &[0, 1, 2, 1], &AamConfig::default()).unwrap();
            let grads = fwd.param_grads(loss);
            assert_eq!(grads.len(), enc.params().param_names().count());
            for (name, g) in &grads {
                assert!(g.sum_sq() > 0.0, "{arch:?}: {name} has zero gradient");
            }
        }
    }
}
