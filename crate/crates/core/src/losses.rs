//! The joint objective.
//!
//! * `align`: adaptive temporal max-pooling of the tapped frame map down to
//!   the teacher's frame count, followed by an optional trainable affine map
//!   when the tap width differs from the teacher width.
//! * `speech_loss`: `1 - mean_t cos(z_t, v_t)` per utterance, then averaged
//!   over utterances.
//! * `aam_softmax_loss`: additive angular margin softmax.
//! * `total_loss`: `l_speaker + lambda * l_speech`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::backbones::FrameMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Operation, Var};
use crate::ops;
use crate::teacher::TeacherSequence;
use crate::tensor::Tensor;

/// Student frames pooled to the teacher's length, `Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSequence {
    pub vectors: Array2<f64>,
    pub source_tap: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::invalid(format!("AAM margin {} outside [0, pi/2)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("AAM scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Bin `i` of `t_target` covers student frames `[floor(i*T/n), floor((i+1)*T/n))`.
pub fn pool_bins(t_student: usize, t_target: usize) -> Vec<(usize, usize)> {
    (0..t_target)
        .map(|i| (i * t_student / t_target, (i + 1) * t_student / t_target))
        .collect()
}

struct TimeMaxPoolOp {
    argmax: Vec<usize>,
}

impl Operation for TimeMaxPoolOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, inputs: &[&Tensor], _n: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (g, &src) in grad.data().iter().zip(&self.argmax) {
            dx.data_mut()[src] += g;
        }
        vec![Some(dx)]
    }
}

/// Adaptive max-pooling over time: `[B, D, T_x] → [B, D, t_target]`. Ties
/// resolve to the earliest frame.
pub fn time_max_pool(g: &mut Graph, x: Var, t_target: usize) -> Result<Var> {
    let xv = g.value(x);
    let (bsz, d, tx) = xv.dims3();
    if t_target == 0 || tx < t_target {
        return Err(Error::ShapeMismatch(format!(
            "cannot pool {tx} student frames to {t_target} teacher frames"
        )));
    }
    let bins = pool_bins(tx, t_target);
    let mut out = Tensor::zeros(&[bsz, d, t_target]);
    let mut argmax = Vec::with_capacity(bsz * d * t_target);
    for row in 0..bsz * d {
        let xr = &xv.data()[row * tx..(row + 1) * tx];
        for (i, &(s, e)) in bins.iter().enumerate() {
            let mut best = s;
            for j in s + 1..e {
                if xr[j] > xr[best] {
                    best = j;
                }
            }
            out.data_mut()[row * t_target + i] = xr[best];
            argmax.push(row * tx + best);
        }
    }
    Ok(g.apply(Box::new(TimeMaxPoolOp { argmax }), &[x], out))
}

/// Trainable affine bridge from the tap width to the teacher width.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `teacher_dim × tap_dim`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// `Z` for one utterance: max-pool `x` to `t_target` frames, then project.
pub fn align(x: &FrameMap, t_target: usize, projection: Option<&Projection>) -> Result<AlignedSequence> {
    let (tx, d) = x.frames.dim();
    let mut g = Graph::new();
    let data: Vec<f64> = (0..d).flat_map(|c| x.frames.column(c).to_vec()).collect();
    let xv = g.constant(Tensor::from_vec(&[1, d, tx], data));
    let mut z = time_max_pool(&mut g, xv, t_target)?;
    if let Some(p) = projection {
        if p.weight.ncols() != d || p.bias.len() != p.weight.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "projection {:?} does not map width {d}",
                p.weight.dim()
            )));
        }
        let (dt, _) = p.weight.dim();
        let w = g.constant(Tensor::from_vec(&[dt, d, 1], p.weight.iter().copied().collect()));
        let b = g.constant(Tensor::from_vec(&[dt], p.bias.to_vec()));
        z = ops::conv1d(&mut g, z, w, Some(b), 1, 0);
    }
    let zt = g.value(z);
    let (_, dz, t) = zt.dims3();
    let vectors = Array2::from_shape_fn((t, dz), |(ti, c)| zt.data()[c * t + ti]);
    Ok(AlignedSequence {
        vectors,
        source_tap: x.tap_layer,
    })
}

/// Value of the speech loss plus the number of frames skipped for zero norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeechLossValue {
    pub loss: f64,
    pub skipped_frames: usize,
}

struct SpeechLossOp {
    /// `dL/dz` precomputed in the forward pass, `[B, D, T]`.
    dz: Tensor,
}

impl Operation for SpeechLossOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, _i: &[&Tensor], _n: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.item();
        vec![Some(self.dz.map(|v| v * g))]
    }
}

/// Speech loss over a batch: `z` is a graph node `[B, D, T]`, `v` the matching
/// teacher tensor (data, never differentiated).
///
/// Frames where either vector has zero norm are skipped and the per-utterance
/// mean is taken over the remaining frames; utterances with no usable frame
/// drop out of the batch mean.
pub fn speech_loss_graph(g: &mut Graph, z: Var, v: &Tensor) -> Result<(Var, usize)> {
    let zv = g.value(z);
    if zv.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "aligned student {:?} vs teacher {:?}",
            zv.shape(),
            v.shape()
        )));
    }
    let (bsz, d, t) = zv.dims3();
    let zd = zv.data();
    let vd = v.data();
    let mut skipped = 0;
    let mut per_utt: Vec<Option<f64>> = Vec::with_capacity(bsz);
    let mut dz = Tensor::zeros(zv.shape());
    let mut frame_terms: Vec<Vec<(usize, f64, f64, f64)>> = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let base = b * d * t;
        let mut terms = Vec::new();
        for ti in 0..t {
            let (mut zz, mut vv, mut zvd) = (0.0, 0.0, 0.0);
            for c in 0..d {
                let a = zd[base + c * t + ti];
                let bb = vd[base + c * t + ti];
                zz += a * a;
                vv += bb * bb;
                zvd += a * bb;
            }
            if zz == 0.0 || vv == 0.0 {
                skipped += 1;
                continue;
            }
            let (zn, vn) = (zz.sqrt(), vv.sqrt());
            terms.push((ti, zvd / (zn * vn), zn, vn));
        }
        per_utt.push((!terms.is_empty()).then(|| {
            1.0 - terms.iter().map(|x| x.1).sum::<f64>() / terms.len() as f64
        }));
        frame_terms.push(terms);
    }
    let valid = per_utt.iter().flatten().count();
    let loss = if valid == 0 {
        0.0
    } else {
        per_utt.iter().flatten().sum::<f64>() / valid as f64
    };
    if skipped > 0 {
        log::warn!("speech loss skipped {skipped} zero-norm frames");
    }
    for (b, terms) in frame_terms.iter().enumerate() {
        if terms.is_empty() {
            continue;
        }
        let base = b * d * t;
        let k = -1.0 / (valid as f64 * terms.len() as f64);
        for &(ti, cos, zn, vn) in terms {
            for c in 0..d {
                let a = zd[base + c * t + ti];
                let bb = vd[base + c * t + ti];
                // d cos / dz = (v / |v| - cos * z / |z|) / |z|
                dz.data_mut()[base + c * t + ti] = k * (bb / vn - cos * a / zn) / zn;
            }
        }
    }
    Ok((g.apply(Box::new(SpeechLossOp { dz }), &[z], Tensor::scalar(loss)), skipped))
}

fn pairs_to_tensors(pairs: &[(&AlignedSequence, &TeacherSequence)]) -> Result<(Tensor, Tensor)> {
    let (t, d) = pairs
        .first()
        .map(|(z, _)| z.vectors.dim())
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let mut zdata = Vec::with_capacity(pairs.len() * t * d);
    let mut vdata = Vec::with_capacity(pairs.len() * t * d);
    for (z, v) in pairs {
        if z.vectors.dim() != (t, d) || v.vectors.dim() != (t, d) {
            return Err(Error::ShapeMismatch(format!(
                "aligned {:?} vs teacher {:?} (batch shape {:?})",
                z.vectors.dim(),
                v.vectors.dim(),
                (t, d)
            )));
        }
        for c in 0..d {
            zdata.extend(z.vectors.column(c).iter());
            vdata.extend(v.vectors.column(c).iter());
        }
    }
    let shape = [pairs.len(), d, t];
    Ok((Tensor::from_vec(&shape, zdata), Tensor::from_vec(&shape, vdata)))
}

/// Speech loss for one utterance.
pub fn speech_loss(z: &AlignedSequence, v: &TeacherSequence) -> Result<SpeechLossValue> {
    speech_loss_batch(&[(z, v)])
}

/// Speech loss averaged over utterances.
pub fn speech_loss_batch(pairs: &[(&AlignedSequence, &TeacherSequence)]) -> Result<SpeechLossValue> {
    let (zt, vt) = pairs_to_tensors(pairs)?;
    let mut g = Graph::new();
    let z = g.constant(zt);
    let (l, skipped) = speech_loss_graph(&mut g, z, &vt)?;
    Ok(SpeechLossValue {
        loss: g.value(l).item(),
        skipped_frames: skipped,
    })
}

struct AamOp {
    /// `dL/de`, `[B, E]`
    de: Tensor,
    /// `dL/dW`, `[N, E]`
    dw: Tensor,
}

impl Operation for AamOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, _i: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.item();
        vec![
            needs[0].then(|| self.de.map(|v| v * g)),
            needs[1].then(|| self.dw.map(|v| v * g)),
        ]
    }
}

/// Target logit with the angular margin: `cos(θ + m)`, replaced by
/// `cos θ − m·sin m` once `θ + m` would pass π. Returns the value and its
/// derivative with respect to `cos θ`.
fn margin_logit(cos: f64, cfg: &AamConfig) -> (f64, f64) {
    let (sin_m, cos_m) = cfg.margin.sin_cos();
    let threshold = (std::f64::consts::PI - cfg.margin).cos();
    if cos > threshold {
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        let phi = cos * cos_m - sin * sin_m;
        let dphi = cos_m + sin_m * cos / sin.max(1e-12);
        (phi, dphi)
    } else {
        (cos - cfg.margin * sin_m, 1.0)
    }
}

/// Additive angular margin softmax over `emb` (`[B, E]`) and class weights
/// `w` (`[N, E]`), averaged over the batch.
pub fn aam_softmax_graph(g: &mut Graph, emb: Var, w: Var, labels: &[usize], cfg: &AamConfig) -> Result<Var> {
    cfg.validate()?;
    let ev = g.value(emb);
    let wv = g.value(w);
    let (bsz, e) = ev.dims2();
    let (n, we) = wv.dims2();
    if we != e {
        return Err(Error::ShapeMismatch(format!("embedding width {e} vs class weights {we}")));
    }
    if labels.len() != bsz {
        return Err(Error::ShapeMismatch(format!("{} labels for {bsz} embeddings", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::invalid(format!("label {bad} out of range for {n} classes")));
    }
    let norms = |data: &[f64], rows: usize, what: &str| -> Result<Vec<f64>> {
        data.chunks(e)
            .take(rows)
            .enumerate()
            .map(|(i, r)| {
                let nrm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm == 0.0 {
                    Err(Error::Degenerate(format!("{what} {i} has zero norm")))
                } else {
                    Ok(nrm)
                }
            })
            .collect()
    };
    let en = norms(ev.data(), bsz, "embedding")?;
    let wn = norms(wv.data(), n, "class weight")?;
    let ehat: Vec<f64> = ev.data().iter().enumerate().map(|(i, v)| v / en[i / e]).collect();
    let what: Vec<f64> = wv.data().iter().enumerate().map(|(i, v)| v / wn[i / e]).collect();
    let mut cos = vec![0.0; bsz * n];
    crate::tensor::gemm(bsz, e, n, &ehat, false, &what, true, &mut cos, false);

    let mut loss = 0.0;
    // dL/dcos, [B, N]
    let mut dcos = vec![0.0; bsz * n];
    for b in 0..bsz {
        let row = &cos[b * n..(b + 1) * n];
        let y = labels[b];
        let (phi, dphi) = margin_logit(row[y], cfg);
        let logits: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &c)| cfg.scale * if j == y { phi } else { c })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row_loss = if mx == logits[y] {
            // ln(1 + Σ_{j≠y} e^{l_j − l_y}) keeps precision when the target dominates
            let rest: f64 = (0..n).filter(|&j| j != y).map(|j| (logits[j] - mx).exp()).sum();
            rest.ln_1p()
        } else {
            mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln() - logits[y]
        };
        let lse = logits[y] + row_loss;
        loss += row_loss;
        for j in 0..n {
            let p = (logits[j] - lse).exp();
            let dlogit = (p - if j == y { 1.0 } else { 0.0 }) / bsz as f64;
            dcos[b * n + j] = cfg.scale * dlogit * if j == y { dphi } else { 1.0 };
        }
    }
    loss /= bsz as f64;

    // cos_bj = ê_b · ŵ_j
    // dL/de_b = (Σ_j dcos_bj ŵ_j − (Σ_j dcos_bj cos_bj) ê_b) / |e_b|
    let mut de = vec![0.0; bsz * e];
    crate::tensor::gemm(bsz, n, e, &dcos, false, &what, false, &mut de, false);
    for b in 0..bsz {
        let s: f64 = (0..n).map(|j| dcos[b * n + j] * cos[b * n + j]).sum();
        for k in 0..e {
            de[b * e + k] = (de[b * e + k] - s * ehat[b * e + k]) / en[b];
        }
    }
    let mut dw = vec![0.0; n * e];
    crate::tensor::gemm(n, bsz, e, &dcos, true, &ehat, false, &mut dw, false);
    for j in 0..n {
        let s: f64 = (0..bsz).map(|b| dcos[b * n + j] * cos[b * n + j]).sum();
        for k in 0..e {
            dw[j * e + k] = (dw[j * e + k] - s * what[j * e + k]) / wn[j];
        }
    }
    let op = AamOp {
        de: Tensor::from_vec(&[bsz, e], de),
        dw: Tensor::from_vec(&[n, e], dw),
    };
    Ok(g.apply(Box::new(op), &[emb, w], Tensor::scalar(loss)))
}

/// Additive angular margin softmax loss for `embeddings` (`B × E`) against
/// class weights (`N × E`).
pub fn aam_softmax_loss(
    embeddings: &Array2<f64>,
    labels: &[usize],
    class_weights: &Array2<f64>,
    cfg: &AamConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let (b, e) = embeddings.dim();
    let (n, we) = class_weights.dim();
    let emb = g.constant(Tensor::from_vec(&[b, e], embeddings.iter().copied().collect()));
    let w = g.constant(Tensor::from_vec(&[n, we], class_weights.iter().copied().collect()));
    let l = aam_softmax_graph(&mut g, emb, w, labels, cfg)?;
    Ok(g.value(l).item())
}

/// `l_speaker + lambda · l_speech`.
pub fn total_loss(l_speaker: f64, l_speech: f64, w: LossWeights) -> f64 {
    l_speaker + w.lambda * l_speech
}
