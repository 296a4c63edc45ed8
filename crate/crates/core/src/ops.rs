//! Differentiable primitives over `[batch, channels, time]` tensors.

use crate::graph::{Graph, Operation, Var};
use crate::tensor::{gemm, Tensor};

/// Output length of a 1-D convolution, `None` when the input is too short.
pub fn conv_out_len(t: usize, kernel: usize, dilation: usize, padding: usize) -> Option<usize> {
    let span = dilation * (kernel - 1);
    (t + 2 * padding).checked_sub(span)
}

fn im2col(
    xb: &[f64],
    cin: usize,
    t: usize,
    kernel: usize,
    dilation: usize,
    padding: usize,
    tout: usize,
    cols: &mut [f64],
) {
    for ci in 0..cin {
        let xrow = &xb[ci * t..(ci + 1) * t];
        for k in 0..kernel {
            let row = &mut cols[(ci * kernel + k) * tout..(ci * kernel + k + 1) * tout];
            let shift = (k * dilation) as isize - padding as isize;
            for (to, dst) in row.iter_mut().enumerate() {
                let src = to as isize + shift;
                *dst = if src >= 0 && (src as usize) < t {
                    xrow[src as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im_add(
    cols: &[f64],
    cin: usize,
    t: usize,
    kernel: usize,
    dilation: usize,
    padding: usize,
    tout: usize,
    dxb: &mut [f64],
) {
    for ci in 0..cin {
        let xrow = &mut dxb[ci * t..(ci + 1) * t];
        for k in 0..kernel {
            let row = &cols[(ci * kernel + k) * tout..(ci * kernel + k + 1) * tout];
            let shift = (k * dilation) as isize - padding as isize;
            for (to, v) in row.iter().enumerate() {
                let src = to as isize + shift;
                if src >= 0 && (src as usize) < t {
                    xrow[src as usize] += v;
                }
            }
        }
    }
}

struct Conv1dOp {
    dilation: usize,
    padding: usize,
}

impl Operation for Conv1dOp {
    fn backward(
        &self,
        grad: &Tensor,
        _output: &Tensor,
        inputs: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let w = inputs[1];
        let (bsz, cin, t) = x.dims3();
        let (cout, _, kernel) = w.dims3();
        let tout = grad.shape()[2];
        let ck = cin * kernel;
        let direct = kernel == 1 && self.padding == 0;

        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        let mut cols = vec![0.0; if direct { 0 } else { ck * tout }];
        let mut dcols = vec![0.0; if direct || dx.is_none() { 0 } else { ck * tout }];
        for b in 0..bsz {
            let gb = &grad.data()[b * cout * tout..(b + 1) * cout * tout];
            let xb = &x.data()[b * cin * t..(b + 1) * cin * t];
            if let Some(dw) = dw.as_mut() {
                let colsb: &[f64] = if direct {
                    xb
                } else {
                    im2col(xb, cin, t, kernel, self.dilation, self.padding, tout, &mut cols);
                    &cols
                };
                gemm(cout, tout, ck, gb, false, colsb, true, dw.data_mut(), true);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.data_mut()[b * cin * t..(b + 1) * cin * t];
                if direct {
                    gemm(ck, cout, tout, w.data(), true, gb, false, dxb, true);
                } else {
                    gemm(ck, cout, tout, w.data(), true, gb, false, &mut dcols, false);
                    col2im_add(&dcols, cin, t, kernel, self.dilation, self.padding, tout, dxb);
                }
            }
        }
        let mut out = vec![dx, dw];
        if inputs.len() > 2 {
            out.push(needs[2].then(|| {
                let mut db = Tensor::zeros(&[cout]);
                for b in 0..bsz {
                    for co in 0..cout {
                        let row = &grad.data()[(b * cout + co) * tout..(b * cout + co + 1) * tout];
                        db.data_mut()[co] += row.iter().sum::<f64>();
                    }
                }
                db
            }));
        }
        out
    }
}

/// 1-D convolution. `x` is `[B, Cin, T]`, `w` is `[Cout, Cin, K]`, `b` is `[Cout]`.
pub fn conv1d(
    g: &mut Graph,
    x: Var,
    w: Var,
    b: Option<Var>,
    dilation: usize,
    padding: usize,
) -> Var {
    let xv = g.value(x);
    let wv = g.value(w);
    let (bsz, cin, t) = xv.dims3();
    let (cout, wcin, kernel) = wv.dims3();
    assert_eq!(cin, wcin, "conv1d channel mismatch");
    let tout = conv_out_len(t, kernel, dilation, padding).expect("conv1d input too short");
    let ck = cin * kernel;
    let direct = kernel == 1 && padding == 0;
    let mut out = Tensor::zeros(&[bsz, cout, tout]);
    let mut cols = vec![0.0; if direct { 0 } else { ck * tout }];
    for bi in 0..bsz {
        let xb = &xv.data()[bi * cin * t..(bi + 1) * cin * t];
        let colsb: &[f64] = if direct {
            xb
        } else {
            im2col(xb, cin, t, kernel, dilation, padding, tout, &mut cols);
            &cols
        };
        let ob = &mut out.data_mut()[bi * cout * tout..(bi + 1) * cout * tout];
        gemm(cout, ck, tout, wv.data(), false, colsb, false, ob, false);
        if let Some(bias) = b {
            let bias = g.value(bias).data();
            for co in 0..cout {
                for v in &mut ob[co * tout..(co + 1) * tout] {
                    *v += bias[co];
                }
            }
        }
    }
    let mut inputs = vec![x, w];
    inputs.extend(b);
    g.apply(Box::new(Conv1dOp { dilation, padding }), &inputs, out)
}

struct LinearOp;

impl Operation for LinearOp {
    fn backward(
        &self,
        grad: &Tensor,
        _output: &Tensor,
        inputs: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let w = inputs[1];
        let (bsz, din) = x.dims2();
        let dout = w.shape()[0];
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            gemm(bsz, dout, din, grad.data(), false, w.data(), false, dx.data_mut(), false);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros(w.shape());
            gemm(dout, bsz, din, grad.data(), true, x.data(), false, dw.data_mut(), false);
            dw
        });
        let mut out = vec![dx, dw];
        if inputs.len() > 2 {
            out.push(needs[2].then(|| {
                let mut db = Tensor::zeros(&[dout]);
                for row in grad.data().chunks(dout) {
                    for (d, v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                db
            }));
        }
        out
    }
}

/// Affine map `x · wᵀ + b` for `x` of shape `[B, In]` and `w` of shape `[Out, In]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Var {
    let xv = g.value(x);
    let wv = g.value(w);
    let (bsz, din) = xv.dims2();
    let (dout, win) = wv.dims2();
    assert_eq!(din, win, "linear input width mismatch");
    let mut out = Tensor::zeros(&[bsz, dout]);
    gemm(bsz, din, dout, xv.data(), false, wv.data(), true, out.data_mut(), false);
    if let Some(bias) = b {
        let bias = g.value(bias).data();
        for row in out.data_mut().chunks_mut(dout) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
    }
    let mut inputs = vec![x, w];
    inputs.extend(b);
    g.apply(Box::new(LinearOp), &inputs, out)
}

#[derive(Clone, Copy)]
enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

struct ActivationOp(Activation);

impl Operation for ActivationOp {
    fn backward(
        &self,
        grad: &Tensor,
        output: &Tensor,
        _inputs: &[&Tensor],
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut dx = grad.clone();
        for (d, &y) in dx.data_mut().iter_mut().zip(output.data()) {
            *d *= match self.0 {
                Activation::Relu => {
                    if y > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Activation::Tanh => 1.0 - y * y,
                Activation::Sigmoid => y * (1.0 - y),
            };
        }
        vec![Some(dx)]
    }
}

fn activation(g: &mut Graph, x: Var, kind: Activation) -> Var {
    let out = g.value(x).map(|v| match kind {
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
    });
    g.apply(Box::new(ActivationOp(kind)), &[x], out)
}

pub fn relu(g: &mut Graph, x: Var) -> Var {
    activation(g, x, Activation::Relu)
}

pub fn tanh(g: &mut Graph, x: Var) -> Var {
    activation(g, x, Activation::Tanh)
}

pub fn sigmoid(g: &mut Graph, x: Var) -> Var {
    activation(g, x, Activation::Sigmoid)
}

struct AddOp;

impl Operation for AddOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, _i: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        needs.iter().map(|&n| n.then(|| grad.clone())).collect()
    }
}

/// Elementwise sum of two equally shaped tensors.
pub fn add(g: &mut Graph, a: Var, b: Var) -> Var {
    let mut out = g.value(a).clone();
    out.add_assign(g.value(b));
    g.apply(Box::new(AddOp), &[a, b], out)
}

struct ScaleOp(f64);

impl Operation for ScaleOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, _i: &[&Tensor], _n: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|v| v * self.0))]
    }
}

/// Multiplication by a constant factor.
pub fn scale(g: &mut Graph, x: Var, factor: f64) -> Var {
    let out = g.value(x).map(|v| v * factor);
    g.apply(Box::new(ScaleOp(factor)), &[x], out)
}

struct ScaleChannelsOp;

impl Operation for ScaleChannelsOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let s = inputs[1];
        let (_, _, t) = x.dims3();
        let dx = needs[0].then(|| {
            let mut dx = grad.clone();
            for (row, sv) in dx.data_mut().chunks_mut(t).zip(s.data()) {
                row.iter_mut().for_each(|v| *v *= sv);
            }
            dx
        });
        let ds = needs[1].then(|| {
            let data = grad
                .data()
                .chunks(t)
                .zip(x.data().chunks(t))
                .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                .collect();
            Tensor::from_vec(s.shape(), data)
        });
        vec![dx, ds]
    }
}

/// `x[b, c, t] · s[b, c]`.
pub fn scale_channels(g: &mut Graph, x: Var, s: Var) -> Var {
    let xv = g.value(x);
    let (bsz, c, t) = xv.dims3();
    assert_eq!(g.value(s).shape(), &[bsz, c]);
    let mut out = xv.clone();
    for (row, sv) in out.data_mut().chunks_mut(t).zip(g.value(s).data()) {
        row.iter_mut().for_each(|v| *v *= sv);
    }
    g.apply(Box::new(ScaleChannelsOp), &[x, s], out)
}

struct MeanTimeOp;

impl Operation for MeanTimeOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, inputs: &[&Tensor], _n: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (_, _, t) = x.dims3();
        let inv = 1.0 / t as f64;
        let mut dx = Tensor::zeros(x.shape());
        for (row, gv) in dx.data_mut().chunks_mut(t).zip(grad.data()) {
            row.fill(gv * inv);
        }
        vec![Some(dx)]
    }
}

/// Mean over the time axis: `[B, C, T] → [B, C]`.
pub fn mean_time(g: &mut Graph, x: Var) -> Var {
    let xv = g.value(x);
    let (bsz, c, t) = xv.dims3();
    let data = xv
        .data()
        .chunks(t)
        .map(|row| row.iter().sum::<f64>() / t as f64)
        .collect();
    let out = Tensor::from_vec(&[bsz, c], data);
    g.apply(Box::new(MeanTimeOp), &[x], out)
}

struct BroadcastTimeOp;

impl Operation for BroadcastTimeOp {
    fn backward(&self, grad: &Tensor, output: &Tensor, inputs: &[&Tensor], _n: &[bool]) -> Vec<Option<Tensor>> {
        let (_, _, t) = output.dims3();
        let data = grad.data().chunks(t).map(|r| r.iter().sum()).collect();
        vec![Some(Tensor::from_vec(inputs[0].shape(), data))]
    }
}

/// Repeats `[B, C]` along a new time axis of length `t`.
pub fn broadcast_time(g: &mut Graph, x: Var, t: usize) -> Var {
    let xv = g.value(x);
    let (bsz, c) = xv.dims2();
    let mut data = Vec::with_capacity(bsz * c * t);
    for &v in xv.data() {
        data.extend(std::iter::repeat_n(v, t));
    }
    let out = Tensor::from_vec(&[bsz, c, t], data);
    g.apply(Box::new(BroadcastTimeOp), &[x], out)
}

struct ConcatChannelsOp;

impl Operation for ConcatChannelsOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let (bsz, ctot, t) = grad.dims3();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            let c = x.shape()[1];
            out.push(need.then(|| {
                let mut dx = Tensor::zeros(x.shape());
                for b in 0..bsz {
                    let src = &grad.data()[(b * ctot + offset) * t..(b * ctot + offset + c) * t];
                    dx.data_mut()[b * c * t..(b + 1) * c * t].copy_from_slice(src);
                }
                dx
            }));
            offset += c;
        }
        out
    }
}

/// Concatenation along the channel axis.
pub fn concat_channels(g: &mut Graph, xs: &[Var]) -> Var {
    let (bsz, _, t) = g.value(xs[0]).dims3();
    let ctot: usize = xs.iter().map(|&x| g.value(x).shape()[1]).sum();
    let mut out = Tensor::zeros(&[bsz, ctot, t]);
    let mut offset = 0;
    for &x in xs {
        let xv = g.value(x);
        let (xb, c, xt) = xv.dims3();
        assert!(xb == bsz && xt == t, "concat shape mismatch");
        for b in 0..bsz {
            out.data_mut()[(b * ctot + offset) * t..(b * ctot + offset + c) * t]
                .copy_from_slice(&xv.data()[b * c * t..(b + 1) * c * t]);
        }
        offset += c;
    }
    g.apply(Box::new(ConcatChannelsOp), xs, out)
}

struct NarrowChannelsOp {
    start: usize,
}

impl Operation for NarrowChannelsOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, inputs: &[&Tensor], _n: &[bool]) -> Vec<Option<Tensor>> {
        let (bsz, c, t) = inputs[0].dims3();
        let len = grad.shape()[1];
        let mut dx = Tensor::zeros(inputs[0].shape());
        for b in 0..bsz {
            dx.data_mut()[(b * c + self.start) * t..(b * c + self.start + len) * t]
                .copy_from_slice(&grad.data()[b * len * t..(b + 1) * len * t]);
        }
        vec![Some(dx)]
    }
}

/// Channels `start..start + len` of `x`.
pub fn narrow_channels(g: &mut Graph, x: Var, start: usize, len: usize) -> Var {
    let xv = g.value(x);
    let (bsz, c, t) = xv.dims3();
    assert!(start + len <= c);
    let mut data = Vec::with_capacity(bsz * len * t);
    for b in 0..bsz {
        data.extend_from_slice(&xv.data()[(b * c + start) * t..(b * c + start + len) * t]);
    }
    let out = Tensor::from_vec(&[bsz, len, t], data);
    g.apply(Box::new(NarrowChannelsOp { start }), &[x], out)
}

struct ReshapeOp;

impl Operation for ReshapeOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, inputs: &[&Tensor], _n: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone().reshaped(inputs[0].shape()))]
    }
}

pub fn reshape(g: &mut Graph, x: Var, shape: &[usize]) -> Var {
    let out = g.value(x).clone().reshaped(shape);
    g.apply(Box::new(ReshapeOp), &[x], out)
}

struct SoftmaxTimeOp;

impl Operation for SoftmaxTimeOp {
    fn backward(&self, grad: &Tensor, output: &Tensor, _i: &[&Tensor], _n: &[bool]) -> Vec<Option<Tensor>> {
        let t = output.shape()[2];
        let mut dx = grad.clone();
        for (drow, yrow) in dx.data_mut().chunks_mut(t).zip(output.data().chunks(t)) {
            let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
            for (d, y) in drow.iter_mut().zip(yrow) {
                *d = y * (*d - dot);
            }
        }
        vec![Some(dx)]
    }
}

/// Softmax over the time axis of `[B, C, T]`.
pub fn softmax_time(g: &mut Graph, x: Var) -> Var {
    let xv = g.value(x);
    let t = xv.dims3().2;
    let mut out = xv.clone();
    for row in out.data_mut().chunks_mut(t) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    g.apply(Box::new(SoftmaxTimeOp), &[x], out)
}

/// Variance below which the standard deviation is reported as exactly zero.
pub const STD_FLOOR: f64 = 1e-12;

/// Weighted first and second moments of one channel row: returns
/// `(Σ w·x, sqrt(Σ w·(x − mean)²))`.
pub fn weighted_moments(x: &[f64], w: &[f64]) -> (f64, f64) {
    let mean: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let var: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mean) * (a - mean)).sum();
    let std = if var > STD_FLOOR { var.sqrt() } else { 0.0 };
    (mean, std)
}

struct WeightedStatsOp;

impl Operation for WeightedStatsOp {
    fn backward(&self, grad: &Tensor, output: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let w = inputs[1];
        let (bsz, c, t) = x.dims3();
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(w.shape());
        for b in 0..bsz {
            for ch in 0..c {
                let off = (b * c + ch) * t;
                let xr = &x.data()[off..off + t];
                let wr = &w.data()[off..off + t];
                let mean = output.data()[b * 2 * c + ch];
                let std = output.data()[b * 2 * c + c + ch];
                let gm = grad.data()[b * 2 * c + ch];
                let gs = grad.data()[b * 2 * c + c + ch];
                let dvar = if std > 0.0 { gs / (2.0 * std) } else { 0.0 };
                let dvar_dmean: f64 = -2.0 * xr.iter().zip(wr).map(|(a, b)| b * (a - mean)).sum::<f64>();
                let dmean = gm + dvar * dvar_dmean;
                let dxr = &mut dx.data_mut()[off..off + t];
                for i in 0..t {
                    dxr[i] = dmean * wr[i] + dvar * 2.0 * wr[i] * (xr[i] - mean);
                }
                let dwr = &mut dw.data_mut()[off..off + t];
                for i in 0..t {
                    let d = xr[i] - mean;
                    dwr[i] = dmean * xr[i] + dvar * d * d;
                }
            }
        }
        vec![needs[0].then_some(dx), needs[1].then_some(dw)]
    }
}

/// Weighted mean and standard deviation over time: `[B, C, T] × [B, C, T] → [B, 2C]`
/// laid out as `mean ‖ std` per utterance. Weights are expected to sum to one
/// over time.
pub fn weighted_stats(g: &mut Graph, x: Var, w: Var) -> Var {
    let xv = g.value(x);
    let wv = g.value(w);
    assert_eq!(xv.shape(), wv.shape());
    let (bsz, c, t) = xv.dims3();
    let mut out = Tensor::zeros(&[bsz, 2 * c]);
    for b in 0..bsz {
        for ch in 0..c {
            let off = (b * c + ch) * t;
            let (m, s) = weighted_moments(&xv.data()[off..off + t], &wv.data()[off..off + t]);
            out.data_mut()[b * 2 * c + ch] = m;
            out.data_mut()[b * 2 * c + c + ch] = s;
        }
    }
    g.apply(Box::new(WeightedStatsOp), &[x, w], out)
}

pub const BN_EPS: f64 = 1e-5;

/// Normalization statistics source for [`batch_norm`].
pub enum NormMode<'a> {
    /// Batch statistics over `(B, T)`.
    Train,
    /// Fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed in training mode: mean and unbiased variance per channel.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

struct BatchNormOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl Operation for BatchNormOp {
    fn backward(&self, grad: &Tensor, _o: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let (bsz, c, t) = inputs[0].dims3();
        let gamma = inputs[1].data();
        let n = (bsz * t) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..bsz {
            for ch in 0..c {
                let off = (b * c + ch) * t;
                for i in off..off + t {
                    dgamma[ch] += grad.data()[i] * self.xhat[i];
                    dbeta[ch] += grad.data()[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(inputs[0].shape());
            for b in 0..bsz {
                for ch in 0..c {
                    let off = (b * c + ch) * t;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in off..off + t {
                        dx.data_mut()[i] = if self.train {
                            k / n * (n * grad.data()[i] - dbeta[ch] - self.xhat[i] * dgamma[ch])
                        } else {
                            k * grad.data()[i]
                        };
                    }
                }
            }
            dx
        });
        vec![
            dx,
            needs[1].then(|| Tensor::from_vec(&[c], dgamma)),
            needs[2].then(|| Tensor::from_vec(&[c], dbeta)),
        ]
    }
}

/// Per-channel batch normalization of `[B, C, T]`.
pub fn batch_norm(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: NormMode<'_>,
) -> (Var, Option<BatchStats>) {
    let xv = g.value(x);
    let (bsz, c, t) = xv.dims3();
    let n = bsz * t;
    let (mean, var, stats) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..bsz {
                for ch in 0..c {
                    let off = (b * c + ch) * t;
                    mean[ch] += xv.data()[off..off + t].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for b in 0..bsz {
                for ch in 0..c {
                    let off = (b * c + ch) * t;
                    var[ch] += xv.data()[off..off + t]
                        .iter()
                        .map(|v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<f64>();
                }
            }
            let unbiased = var
                .iter()
                .map(|v| if n > 1 { v / (n - 1) as f64 } else { 0.0 })
                .collect();
            var.iter_mut().for_each(|v| *v /= n as f64);
            let stats = BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(stats))
        }
        NormMode::Eval { mean, var } => (mean.to_vec(), var.to_vec(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let gv = g.value(gamma).data();
    let bv = g.value(beta).data();
    let mut xhat = vec![0.0; xv.numel()];
    let mut out = Tensor::zeros(xv.shape());
    for b in 0..bsz {
        for ch in 0..c {
            let off = (b * c + ch) * t;
            for i in off..off + t {
                xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                out.data_mut()[i] = xhat[i] * gv[ch] + bv[ch];
            }
        }
    }
    let train = stats.is_some();
    let op = BatchNormOp { xhat, inv_std, train };
    (g.apply(Box::new(op), &[x, gamma, beta], out), stats)
}
