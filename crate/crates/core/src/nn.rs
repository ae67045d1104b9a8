//! Convolution backbone, temporal attention and Gaussian output head with
//! hand-written reverse-mode gradients.
//!
//! All parameters of a network live in one flat vector. The two frame
//! branches read the same convolution weights, so sharing is structural.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::ingest::FORMAT_VERSION;
use crate::kv::{read_f32le, write_f32le, KvDoc};
use crate::signal::zscore;

/// Lower bound added to the softplus scale output.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    /// Row-major.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor contains non-finite values"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::invalid(format!("{what} must be 2-D, got shape {:?}", self.shape))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrEstimate {
    pub mu_hr: f64,
    pub sigma_hr: f64,
    /// End time of the frame the estimate belongs to.
    pub frame_time: f64,
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Maps the two raw outputs `[raw_mu, raw_sigma]` to an estimate.
pub fn gaussian_head(features: &[f64], frame_time: f64) -> Result<HrEstimate> {
    let [raw_mu, raw_sigma] = features else {
        return Err(Error::invalid(format!("gaussian head needs 2 features, got {}", features.len())));
    };
    Ok(HrEstimate { mu_hr: *raw_mu, sigma_hr: softplus(*raw_sigma) + SIGMA_FLOOR, frame_time })
}

pub fn gaussian_nll(est: &HrEstimate, y: f64) -> f64 {
    let s2 = est.sigma_hr * est.sigma_hr;
    0.5 * (2.0 * std::f64::consts::PI * s2).ln() + (y - est.mu_hr).powi(2) / (2.0 * s2)
}

// ---------------------------------------------------------------------------
// Convolution

pub fn conv_out_len(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (n + 2 * pad - kernel) / stride + 1
}

/// Valid tap range for output position `t`.
#[inline]
fn tap_range(t: usize, stride: usize, pad: usize, k: usize, n: usize) -> (usize, usize, isize) {
    let base = (t * stride) as isize - pad as isize;
    let lo = (-base).max(0) as usize;
    let hi = ((n as isize - base).max(0) as usize).min(k);
    (lo, hi, base)
}

#[allow(clippy::too_many_arguments)]
fn conv_pre(x: &[f64], cin: usize, n: usize, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let nout = conv_out_len(n, k, stride);
    let mut out = vec![0.0; cout * nout];
    for o in 0..cout {
        let row = &mut out[o * nout..(o + 1) * nout];
        row.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let xi = &x[i * n..(i + 1) * n];
            let wi = &w[(o * cin + i) * k..(o * cin + i + 1) * k];
            for (t, acc) in row.iter_mut().enumerate() {
                let (lo, hi, base) = tap_range(t, stride, pad, k, n);
                let mut s = 0.0;
                for j in lo..hi {
                    s += wi[j] * xi[(base + j as isize) as usize];
                }
                *acc += s;
            }
        }
    }
    out
}

/// Accumulates weight, bias and input gradients of a convolution given the
/// gradient `g` with respect to its pre-activation output.
#[allow(clippy::too_many_arguments)]
fn conv_back(
    x: &[f64],
    cin: usize,
    n: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    g: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gx: Option<&mut [f64]>,
) {
    let pad = (k - 1) / 2;
    let nout = conv_out_len(n, k, stride);
    for o in 0..cout {
        let go = &g[o * nout..(o + 1) * nout];
        gb[o] += go.iter().sum::<f64>();
        for i in 0..cin {
            let xi = &x[i * n..(i + 1) * n];
            let gwi = &mut gw[(o * cin + i) * k..(o * cin + i + 1) * k];
            for (t, &gt) in go.iter().enumerate() {
                if gt == 0.0 {
                    continue;
                }
                let (lo, hi, base) = tap_range(t, stride, pad, k, n);
                for j in lo..hi {
                    gwi[j] += gt * xi[(base + j as isize) as usize];
                }
            }
        }
    }
    if let Some(gx) = gx {
        for o in 0..cout {
            let go = &g[o * nout..(o + 1) * nout];
            for i in 0..cin {
                let wi = &w[(o * cin + i) * k..(o * cin + i + 1) * k];
                let gxi = &mut gx[i * n..(i + 1) * n];
                for (t, &gt) in go.iter().enumerate() {
                    if gt == 0.0 {
                        continue;
                    }
                    let (lo, hi, base) = tap_range(t, stride, pad, k, n);
                    for j in lo..hi {
                        gxi[(base + j as isize) as usize] += gt * wi[j];
                    }
                }
            }
        }
    }
}

/// Strided cross-correlation with "same"-style padding `(k - 1) / 2`,
/// bias and activation. `x` is `[C_in, N]`, `weight` is `[C_out, C_in, K]`.
pub fn conv1d_forward(x: &Tensor, weight: &Tensor, bias: &[f64], stride: usize, act: Activation) -> Result<Tensor> {
    let (cin, n) = x.dims2("conv input")?;
    let [cout, wcin, k] = weight.shape[..] else {
        return Err(Error::invalid(format!("conv weight must be 3-D, got {:?}", weight.shape)));
    };
    if wcin != cin || bias.len() != cout || stride == 0 || k == 0 || n == 0 {
        return Err(Error::invalid(format!(
            "conv shapes do not fit: input {:?}, weight {:?}, bias {}, stride {stride}",
            x.shape,
            weight.shape,
            bias.len()
        )));
    }
    let mut out = conv_pre(&x.data, cin, n, &weight.data, bias, cout, k, stride);
    if act == Activation::Relu {
        out.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(Tensor { shape: vec![cout, conv_out_len(n, k, stride)], data: out })
}

// ---------------------------------------------------------------------------
// Attention

/// Query, key and value projections, each `[d, d]` and applied as `E · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    /// Without projections the current embedding is used directly as
    /// queries and the previous one as keys and values, as one head scaled
    /// by the full width.
    pub projections: Option<Projections>,
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for (j, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[j * n..(j + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a` is `[m, k]`, `b` is `[n, k]`; returns `a · bᵀ`.
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let ar = &a[r * k..(r + 1) * k];
        for c in 0..n {
            out[r * n + c] = ar.iter().zip(&b[c * k..(c + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a` is `[m, k]`, `b` is `[m, n]`; accumulates `aᵀ · b` into `out`.
fn matmul_at_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        let br = &b[r * n..(r + 1) * n];
        for (i, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

struct AttnTrace {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax weights, `[heads, T, T]`.
    p: Vec<f64>,
    heads: usize,
    scale: f64,
}

fn attention_fwd(e_i: &[f64], e_p: &[f64], t: usize, d: usize, heads: usize, proj: Option<[&[f64]; 3]>) -> (Vec<f64>, AttnTrace) {
    let (q, k, v, heads, scale) = match proj {
        Some([wq, wk, wv]) => (
            matmul(e_i, wq, t, d, d),
            matmul(e_p, wk, t, d, d),
            matmul(e_p, wv, t, d, d),
            heads,
            ((d / heads) as f64).sqrt(),
        ),
        None => (e_i.to_vec(), e_p.to_vec(), e_p.to_vec(), 1, (d as f64).sqrt()),
    };
    let dh = d / heads;
    let mut p = vec![0.0; heads * t * t];
    let mut out = e_i.to_vec();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for r in 0..t {
            let pr = &mut p[(h * t + r) * t..(h * t + r + 1) * t];
            let qr = &q[r * d + cols.start..r * d + cols.end];
            for (c, l) in pr.iter_mut().enumerate() {
                *l = qr.iter().zip(&k[c * d + cols.start..c * d + cols.end]).map(|(a, b)| a * b).sum::<f64>() / scale;
            }
            let mx = pr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in pr.iter_mut() {
                *l = (*l - mx).exp();
                z += *l;
            }
            pr.iter_mut().for_each(|l| *l /= z);
            for (c, &w) in pr.iter().enumerate() {
                for j in cols.clone() {
                    out[r * d + j] += w * v[c * d + j];
                }
            }
        }
    }
    (out, AttnTrace { q, k, v, p, heads, scale })
}

/// Returns gradients with respect to `e_i` and `e_p`, accumulating
/// projection gradients into `gw` when projections are in use.
#[allow(clippy::type_complexity)]
fn attention_back(
    e_i: &[f64],
    e_p: &[f64],
    t: usize,
    d: usize,
    tr: &AttnTrace,
    proj: Option<([&[f64]; 3], [&mut [f64]; 3])>,
    g_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / tr.heads;
    let mut g_q = vec![0.0; t * d];
    let mut g_k = vec![0.0; t * d];
    let mut g_v = vec![0.0; t * d];
    let mut g_p = vec![0.0; t];
    for h in 0..tr.heads {
        let cols = h * dh..(h + 1) * dh;
        for r in 0..t {
            let pr = &tr.p[(h * t + r) * t..(h * t + r + 1) * t];
            let ga = &g_out[r * d + cols.start..r * d + cols.end];
            for c in 0..t {
                g_p[c] = ga.iter().zip(&tr.v[c * d + cols.start..c * d + cols.end]).map(|(a, b)| a * b).sum();
                for (jj, j) in cols.clone().enumerate() {
                    g_v[c * d + j] += pr[c] * ga[jj];
                }
            }
            let dot: f64 = pr.iter().zip(&g_p).map(|(a, b)| a * b).sum();
            for c in 0..t {
                let gs = pr[c] * (g_p[c] - dot) / tr.scale;
                if gs == 0.0 {
                    continue;
                }
                for j in cols.clone() {
                    g_q[r * d + j] += gs * tr.k[c * d + j];
                    g_k[c * d + j] += gs * tr.q[r * d + j];
                }
            }
        }
    }
    let mut g_ei = g_out.to_vec();
    match proj {
        Some(([wq, wk, wv], [gwq, gwk, gwv])) => {
            matmul_at_acc(e_i, &g_q, t, d, d, gwq);
            matmul_at_acc(e_p, &g_k, t, d, d, gwk);
            matmul_at_acc(e_p, &g_v, t, d, d, gwv);
            for (a, b) in g_ei.iter_mut().zip(matmul_bt(&g_q, wq, t, d, d)) {
                *a += b;
            }
            let mut g_ep = matmul_bt(&g_k, wk, t, d, d);
            for (a, b) in g_ep.iter_mut().zip(matmul_bt(&g_v, wv, t, d, d)) {
                *a += b;
            }
            (g_ei, g_ep)
        }
        None => {
            for (a, b) in g_ei.iter_mut().zip(&g_q) {
                *a += b;
            }
            let g_ep = g_k.iter().zip(&g_v).map(|(a, b)| a + b).collect();
            (g_ei, g_ep)
        }
    }
}

/// Current-to-previous attention with a residual connection; both inputs are
/// `[T, d]`.
pub fn temporal_attention(e_i: &Tensor, e_prev: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (t, d) = e_i.dims2("attention input")?;
    if e_prev.shape != e_i.shape {
        return Err(Error::invalid(format!("attention inputs differ: {:?} vs {:?}", e_i.shape, e_prev.shape)));
    }
    let proj = match &params.projections {
        Some(p) => {
            if params.heads == 0 || d % params.heads != 0 {
                return Err(Error::invalid(format!("width {d} is not divisible by {} heads", params.heads)));
            }
            for w in [&p.wq, &p.wk, &p.wv] {
                if w.shape != [d, d] {
                    return Err(Error::invalid(format!("projection must be [{d}, {d}], got {:?}", w.shape)));
                }
            }
            Some([&p.wq.data[..], &p.wk.data[..], &p.wv.data[..]])
        }
        None => None,
    };
    let (out, _) = attention_fwd(&e_i.data, &e_prev.data, t, d, params.heads, proj);
    Ok(Tensor { shape: vec![t, d], data: out })
}

// ---------------------------------------------------------------------------
// Network

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadKind {
    /// Mean and scale, trained with the Gaussian NLL.
    #[default]
    Gaussian,
    /// Mean only, trained with the absolute error.
    Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Samples per frame.
    pub n: usize,
    /// 1 for PPG only, 4 for PPG plus the acceleration axes.
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Time steps of the embedding after average pooling.
    pub pool_to: usize,
    pub attention: bool,
    pub projections: bool,
    pub heads: usize,
    /// Width of the hidden dense layer; 0 connects the flattened embedding
    /// straight to the output.
    pub hidden: usize,
    pub head: HeadKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n: 256,
            in_channels: 1,
            channels: vec![8, 16, 32],
            kernel: 7,
            stride: 2,
            pool_to: 16,
            attention: true,
            projections: true,
            heads: 4,
            hidden: 32,
            head: HeadKind::Gaussian,
        }
    }
}

impl NetConfig {
    pub fn width(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    fn conv_lens(&self) -> Vec<usize> {
        let mut lens = vec![self.n];
        for _ in &self.channels {
            let l = *lens.last().unwrap();
            lens.push(conv_out_len(l, self.kernel, self.stride));
        }
        lens
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("network config: {m}")));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("need at least one convolution with nonzero channels".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 || self.stride == 0 {
            return bad(format!("kernel {} must be odd and stride {} positive", self.kernel, self.stride));
        }
        if !matches!(self.in_channels, 1 | 4) {
            return bad(format!("in_channels must be 1 or 4, got {}", self.in_channels));
        }
        let last = *self.conv_lens().last().unwrap();
        if self.pool_to == 0 || last < self.pool_to || last % self.pool_to != 0 {
            return bad(format!("feature length {last} cannot be pooled to {}", self.pool_to));
        }
        if self.attention && self.projections && (self.heads == 0 || self.width() % self.heads != 0) {
            return bad(format!("width {} is not divisible by {} heads", self.width(), self.heads));
        }
        Ok(())
    }

    pub(crate) fn write_kv(&self, doc: &mut KvDoc) {
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        doc.set("n", self.n);
        doc.set("in_channels", self.in_channels);
        doc.set("channels", ch.join(","));
        doc.set("kernel", self.kernel);
        doc.set("stride", self.stride);
        doc.set("pool_to", self.pool_to);
        doc.set("attention", self.attention);
        doc.set("projections", self.projections);
        doc.set("heads", self.heads);
        doc.set("hidden", self.hidden);
        doc.set("head", if self.head == HeadKind::Gaussian { "gaussian" } else { "point" });
    }

    /// Reads the keys written by [`NetConfig::write_kv`]; missing keys keep
    /// their defaults.
    pub fn from_kv(doc: &KvDoc, origin: &Path) -> Result<Self> {
        let d = NetConfig::default();
        let channels = match doc.get("channels") {
            None => d.channels,
            Some(v) => v
                .split(',')
                .map(|c| c.trim().parse().map_err(|_| Error::format(origin, format!("bad channel count `{c}`"))))
                .collect::<Result<_>>()?,
        };
        let head = match doc.get("head") {
            None | Some("gaussian") => HeadKind::Gaussian,
            Some("point") => HeadKind::Point,
            Some(o) => return Err(Error::format(origin, format!("unknown head `{o}`"))),
        };
        let cfg = NetConfig {
            n: doc.parse_or("n", d.n, origin)?,
            in_channels: doc.parse_or("in_channels", d.in_channels, origin)?,
            channels,
            kernel: doc.parse_or("kernel", d.kernel, origin)?,
            stride: doc.parse_or("stride", d.stride, origin)?,
            pool_to: doc.parse_or("pool_to", d.pool_to, origin)?,
            attention: doc.parse_or("attention", d.attention, origin)?,
            projections: doc.parse_or("projections", d.projections, origin)?,
            heads: doc.parse_or("heads", d.heads, origin)?,
            hidden: doc.parse_or("hidden", d.hidden, origin)?,
            head,
        };
        cfg.check().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(cfg)
    }
}

/// Offsets of each parameter group inside the flat weight vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    /// `(weight, bias, c_in, c_out)` per convolution.
    conv: Vec<(usize, usize, usize, usize)>,
    proj: Option<[usize; 3]>,
    dense: Option<(usize, usize)>,
    out: (usize, usize),
    total: usize,
}

impl Layout {
    fn new(c: &NetConfig) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let mut conv = Vec::new();
        let mut cin = c.in_channels;
        for &cout in &c.channels {
            let w = take(cout * cin * c.kernel);
            let b = take(cout);
            conv.push((w, b, cin, cout));
            cin = cout;
        }
        let d = c.width();
        let proj = (c.attention && c.projections).then(|| [take(d * d), take(d * d), take(d * d)]);
        let flat = c.pool_to * d;
        let (dense, out_in) = if c.hidden > 0 {
            (Some((take(c.hidden * flat), take(c.hidden))), c.hidden)
        } else {
            (None, flat)
        };
        let out = (take(2 * out_in), take(2));
        Layout { conv, proj, dense, out, total: off }
    }
}

/// Fixed affine map from the two network outputs to `[raw_mu, raw_sigma]`,
/// set from the training labels so the initial estimate is already on the
/// label scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputScale {
    pub mu_offset: f64,
    pub mu_scale: f64,
    pub sigma_offset: f64,
    pub sigma_scale: f64,
}

impl Default for OutputScale {
    fn default() -> Self {
        OutputScale { mu_offset: 0.0, mu_scale: 1.0, sigma_offset: 0.0, sigma_scale: 1.0 }
    }
}

impl OutputScale {
    pub fn from_labels(labels: &[f64]) -> Self {
        if labels.is_empty() {
            return Self::default();
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let sd = (labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt().max(1.0);
        OutputScale { mu_offset: mean, mu_scale: sd, sigma_offset: softplus_inv(sd), sigma_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrNetworkParams {
    pub config: NetConfig,
    pub weights: Vec<f64>,
    pub output: OutputScale,
    pub seed: u64,
    layout: Layout,
}

/// Normalized network input for one (previous, current) frame pair,
/// each `[in_channels, n]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub prev: Vec<f64>,
    pub cur: Vec<f64>,
}

fn frame_channels(f: &SampleFrame, in_channels: usize) -> Vec<f64> {
    let mut out = zscore(&f.ppg);
    if in_channels == 4 {
        for a in &f.acc {
            out.extend(zscore(a));
        }
    }
    out
}

impl NetInput {
    /// Z-scores every channel of both frames. Pass the current frame as
    /// `prev` for the first frame of a session.
    pub fn from_frames(prev: &SampleFrame, cur: &SampleFrame, in_channels: usize) -> Result<Self> {
        if prev.len() != cur.len() {
            return Err(Error::invalid(format!("frame lengths differ: {} vs {}", prev.len(), cur.len())));
        }
        Ok(NetInput { prev: frame_channels(prev, in_channels), cur: frame_channels(cur, in_channels) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: NetInput,
    pub y: f64,
}

struct BranchTrace {
    /// Input of each convolution; entry 0 is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each convolution.
    pre: Vec<Vec<f64>>,
    emb: Vec<f64>,
}

struct HeadTrace {
    attn: Option<AttnTrace>,
    flat: Vec<f64>,
    h_pre: Vec<f64>,
    h: Vec<f64>,
    raw: [f64; 2],
}

impl HrNetworkParams {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; layout.total];
        let mut fill = |range: std::ops::Range<usize>, std: f64, rng: &mut ChaCha8Rng| {
            let nd = Normal::new(0.0, std).unwrap();
            w[range].iter_mut().for_each(|v| *v = nd.sample(rng));
        };
        for &(wo, _, cin, cout) in &layout.conv {
            fill(wo..wo + cout * cin * config.kernel, (2.0 / (cin * config.kernel) as f64).sqrt(), &mut rng);
        }
        let d = config.width();
        if let Some(p) = layout.proj {
            for o in p {
                fill(o..o + d * d, 1.0 / (d as f64).sqrt(), &mut rng);
            }
        }
        let flat = config.pool_to * d;
        let out_in = if let Some((dw, _)) = layout.dense {
            fill(dw..dw + config.hidden * flat, (2.0 / flat as f64).sqrt(), &mut rng);
            config.hidden
        } else {
            flat
        };
        fill(layout.out.0..layout.out.0 + 2 * out_in, 0.01 / (out_in as f64).sqrt(), &mut rng);
        Ok(HrNetworkParams { config, weights: w, output: OutputScale::default(), seed, layout })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Parameter groups as `(name, range)` pairs, in storage order.
    pub fn groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let l = &self.layout;
        let k = self.config.kernel;
        let mut g = Vec::new();
        for (i, &(w, b, cin, cout)) in l.conv.iter().enumerate() {
            g.push((format!("conv{i}.weight"), w..w + cout * cin * k));
            g.push((format!("conv{i}.bias"), b..b + cout));
        }
        let dd = self.config.width().pow(2);
        if let Some([q, kk, v]) = l.proj {
            g.push(("attn.wq".into(), q..q + dd));
            g.push(("attn.wk".into(), kk..kk + dd));
            g.push(("attn.wv".into(), v..v + dd));
        }
        if let Some((w, b)) = l.dense {
            g.push(("dense.weight".into(), w..b));
            g.push(("dense.bias".into(), b..b + self.config.hidden));
        }
        g.push(("out.weight".into(), l.out.0..l.out.1));
        g.push(("out.bias".into(), l.out.1..l.out.1 + 2));
        g
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let want = self.config.in_channels * self.config.n;
        if x.len() != want {
            return Err(Error::invalid(format!("network input has {} values, expected {want}", x.len())));
        }
        Ok(())
    }

    fn branch_forward(&self, x: &[f64]) -> BranchTrace {
        let c = &self.config;
        let lens = c.conv_lens();
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(c.channels.len());
        for (li, &(wo, bo, cin, cout)) in self.layout.conv.iter().enumerate() {
            let w = &self.weights[wo..wo + cout * cin * c.kernel];
            let b = &self.weights[bo..bo + cout];
            let p = conv_pre(inputs.last().unwrap(), cin, lens[li], w, b, cout, c.kernel, c.stride);
            let a: Vec<f64> = p.iter().map(|v| v.max(0.0)).collect();
            pre.push(p);
            inputs.push(a);
        }
        let act = inputs.pop().unwrap();
        let (d, t, l) = (c.width(), c.pool_to, *lens.last().unwrap());
        let f = l / t;
        let mut emb = vec![0.0; t * d];
        for ch in 0..d {
            for ti in 0..t {
                emb[ti * d + ch] = act[ch * l + ti * f..ch * l + (ti + 1) * f].iter().sum::<f64>() / f as f64;
            }
        }
        BranchTrace { inputs, pre, emb }
    }

    fn branch_backward(&self, tr: &BranchTrace, g_emb: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let lens = c.conv_lens();
        let (d, t, l) = (c.width(), c.pool_to, *lens.last().unwrap());
        let f = l / t;
        let mut g = vec![0.0; d * l];
        for ch in 0..d {
            for ti in 0..t {
                let v = g_emb[ti * d + ch] / f as f64;
                g[ch * l + ti * f..ch * l + (ti + 1) * f].iter_mut().for_each(|x| *x = v);
            }
        }
        for li in (0..c.channels.len()).rev() {
            let (wo, bo, cin, cout) = self.layout.conv[li];
            for (gv, p) in g.iter_mut().zip(&tr.pre[li]) {
                if *p <= 0.0 {
                    *gv = 0.0;
                }
            }
            let nw = cout * cin * c.kernel;
            let mut gx = if li > 0 { vec![0.0; cin * lens[li]] } else { Vec::new() };
            let (gw_all, gb_all) = grad.split_at_mut(bo);
            let gw = &mut gw_all[wo..wo + nw];
            let gb = &mut gb_all[..cout];
            conv_back(
                &tr.inputs[li],
                cin,
                lens[li],
                &self.weights[wo..wo + nw],
                cout,
                c.kernel,
                c.stride,
                &g,
                gw,
                gb,
                (li > 0).then_some(&mut gx[..]),
            );
            g = gx;
        }
    }

    fn proj_slices(&self) -> Option<[&[f64]; 3]> {
        let dd = self.config.width().pow(2);
        self.layout.proj.map(|p| p.map(|o| &self.weights[o..o + dd]))
    }

    fn head_forward(&self, e_cur: &[f64], e_prev: &[f64]) -> HeadTrace {
        let c = &self.config;
        let (t, d) = (c.pool_to, c.width());
        let (flat, attn) = if c.attention {
            let (o, tr) = attention_fwd(e_cur, e_prev, t, d, c.heads, self.proj_slices());
            (o, Some(tr))
        } else {
            (e_cur.to_vec(), None)
        };
        let (h_pre, h) = match self.layout.dense {
            Some((wo, bo)) => {
                let nf = flat.len();
                let h_pre: Vec<f64> = (0..c.hidden)
                    .map(|u| {
                        self.weights[bo + u]
                            + self.weights[wo + u * nf..wo + (u + 1) * nf].iter().zip(&flat).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                let h = h_pre.iter().map(|v| v.max(0.0)).collect();
                (h_pre, h)
            }
            None => (Vec::new(), flat.clone()),
        };
        let (wo, bo) = self.layout.out;
        let m = h.len();
        let z: [f64; 2] = std::array::from_fn(|u| {
            self.weights[bo + u] + self.weights[wo + u * m..wo + (u + 1) * m].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
        });
        let o = &self.output;
        let raw = [o.mu_offset + o.mu_scale * z[0], o.sigma_offset + o.sigma_scale * z[1]];
        HeadTrace { attn, flat, h_pre, h, raw }
    }

    /// Returns gradients with respect to the current and previous embeddings.
    fn head_backward(
        &self,
        tr: &HeadTrace,
        e_cur: &[f64],
        e_prev: &[f64],
        g_raw: [f64; 2],
        grad: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let (t, d) = (c.pool_to, c.width());
        let g_z = [g_raw[0] * self.output.mu_scale, g_raw[1] * self.output.sigma_scale];
        let (wo, bo) = self.layout.out;
        let m = tr.h.len();
        let mut g_h = vec![0.0; m];
        for u in 0..2 {
            grad[bo + u] += g_z[u];
            for i in 0..m {
                grad[wo + u * m + i] += g_z[u] * tr.h[i];
                g_h[i] += g_z[u] * self.weights[wo + u * m + i];
            }
        }
        let g_flat = match self.layout.dense {
            Some((dw, db)) => {
                let nf = tr.flat.len();
                let mut g_flat = vec![0.0; nf];
                for u in 0..c.hidden {
                    let gu = if tr.h_pre[u] > 0.0 { g_h[u] } else { 0.0 };
                    if gu == 0.0 {
                        continue;
                    }
                    grad[db + u] += gu;
                    let row = dw + u * nf;
                    for i in 0..nf {
                        grad[row + i] += gu * tr.flat[i];
                        g_flat[i] += gu * self.weights[row + i];
                    }
                }
                g_flat
            }
            None => g_h,
        };
        match &tr.attn {
            None => (g_flat, vec![0.0; t * d]),
            Some(at) => match self.layout.proj {
                Some([q, k, v]) => {
                    let dd = d * d;
                    let w = &self.weights;
                    let [pq, pk, pv] = [&w[q..q + dd], &w[k..k + dd], &w[v..v + dd]];
                    let mut gq = vec![0.0; dd];
                    let mut gk = vec![0.0; dd];
                    let mut gv = vec![0.0; dd];
                    let r = attention_back(
                        e_cur,
                        e_prev,
                        t,
                        d,
                        at,
                        Some(([pq, pk, pv], [&mut gq, &mut gk, &mut gv])),
                        &g_flat,
                    );
                    for (o, g) in [(q, gq), (k, gk), (v, gv)] {
                        grad[o..o + dd].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                    r
                }
                None => attention_back(e_cur, e_prev, t, d, at, None, &g_flat),
            },
        }
    }

    /// Embedding `[T, d]` of one normalized frame.
    pub fn embed(&self, x: &[f64]) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(Tensor { shape: vec![self.config.pool_to, self.config.width()], data: self.branch_forward(x).emb })
    }

    /// `[raw_mu, raw_sigma]` from the two embeddings.
    pub fn head_raw(&self, e_cur: &Tensor, e_prev: &Tensor) -> Result<[f64; 2]> {
        let shape = [self.config.pool_to, self.config.width()];
        if e_cur.shape != shape || e_prev.shape != shape {
            return Err(Error::invalid(format!("embeddings must be {shape:?}")));
        }
        Ok(self.head_forward(&e_cur.data, &e_prev.data).raw)
    }

    pub fn forward_raw(&self, input: &NetInput) -> Result<[f64; 2]> {
        self.check_input(&input.cur)?;
        self.check_input(&input.prev)?;
        let cur = self.branch_forward(&input.cur);
        let prev_emb = if self.config.attention { self.branch_forward(&input.prev).emb } else { cur.emb.clone() };
        Ok(self.head_forward(&cur.emb, &prev_emb).raw)
    }

    pub fn estimate(&self, input: &NetInput, frame_time: f64) -> Result<HrEstimate> {
        let raw = self.forward_raw(input)?;
        match self.config.head {
            HeadKind::Gaussian => gaussian_head(&raw, frame_time),
            HeadKind::Point => Ok(HrEstimate { mu_hr: raw[0], sigma_hr: SIGMA_FLOOR, frame_time }),
        }
    }

    /// Per-sample training loss and its gradient with respect to the raw
    /// outputs.
    fn sample_loss(&self, raw: [f64; 2], y: f64) -> (f64, [f64; 2]) {
        match self.config.head {
            HeadKind::Gaussian => {
                let s = softplus(raw[1]) + SIGMA_FLOOR;
                let e = y - raw[0];
                let loss = 0.5 * (2.0 * std::f64::consts::PI * s * s).ln() + e * e / (2.0 * s * s);
                let g_mu = -e / (s * s);
                let g_s = 1.0 / s - e * e / (s * s * s);
                (loss, [g_mu, g_s * sigmoid(raw[1])])
            }
            HeadKind::Point => {
                let e = raw[0] - y;
                (e.abs(), [if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 }, 0.0])
            }
        }
    }

    /// Summed loss over `batch` and the summed gradient.
    fn loss_grad_sum(&self, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.layout.total];
        let mut total = 0.0;
        for ex in batch {
            self.check_input(&ex.input.cur)?;
            self.check_input(&ex.input.prev)?;
            let cur = self.branch_forward(&ex.input.cur);
            let prev = self.config.attention.then(|| self.branch_forward(&ex.input.prev));
            let e_prev = prev.as_ref().map_or(&cur.emb, |p| &p.emb);
            let ht = self.head_forward(&cur.emb, e_prev);
            let (loss, g_raw) = self.sample_loss(ht.raw, ex.y);
            total += loss;
            let (g_cur, g_prev) = self.head_backward(&ht, &cur.emb, e_prev, g_raw, &mut grad);
            self.branch_backward(&cur, &g_cur, &mut grad);
            if let Some(p) = &prev {
                self.branch_backward(p, &g_prev, &mut grad);
            }
        }
        Ok((total, grad))
    }

    /// Mean training loss over `batch`, without gradients.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut total = 0.0;
        for ex in batch {
            total += self.sample_loss(self.forward_raw(&ex.input)?, ex.y).0;
        }
        Ok(total / batch.len() as f64)
    }

    /// Rounds weights to the precision they are stored with.
    pub fn round_to_storage(&mut self) {
        self.weights.iter_mut().for_each(|w| *w = *w as f32 as f64);
    }
}

/// Samples per gradient work unit. Units are reduced in order, so results do
/// not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Mean loss over `batch` and its exact gradient.
pub fn backward(params: &HrNetworkParams, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts: Vec<(f64, Vec<f64>)> =
        batch.par_chunks(GRAD_CHUNK).map(|c| params.loss_grad_sum(c)).collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.n_params()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    loss /= n;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { epoch: 0, lr: 0.0, msg: "non-finite loss or gradient".into() });
    }
    Ok((loss, grad))
}

/// Estimate for `frame_cur` given the frame one stride earlier.
pub fn forward_kidppg(params: &HrNetworkParams, frame_prev: &SampleFrame, frame_cur: &SampleFrame) -> Result<HrEstimate> {
    let input = NetInput::from_frames(frame_prev, frame_cur, params.config.in_channels)?;
    params.estimate(&input, frame_cur.t_end())
}

// ---------------------------------------------------------------------------
// Optimization

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: &AdamParams) {
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        params[i] -= hp.lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + hp.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamParams,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of examples held out for early stopping.
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { adam: AdamParams::default(), batch_size: 64, epochs: 50, val_fraction: 0.1, patience: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Adam training with a seeded shuffle per epoch. The weights with the best
/// validation loss are kept and rounded to storage precision.
pub fn train_network(params: &mut HrNetworkParams, data: &[Example], cfg: &TrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::invalid(format!("invalid training config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut idx, &mut rng);
    let n_val = if data.len() >= 10 { (data.len() as f64 * cfg.val_fraction).round() as usize } else { 0 };
    let (val_idx, train_idx) = idx.split_at(n_val);
    let val: Vec<Example> = val_idx.iter().map(|&i| data[i].clone()).collect();
    let mut order = train_idx.to_vec();

    let mut state = AdamState::new(params.n_params());
    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, params.weights.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grad) = backward(params, &batch).map_err(|e| match e {
                Error::Divergence { msg, .. } => Error::Divergence { epoch, lr: cfg.adam.lr, msg },
                other => other,
            })?;
            total += loss * batch.len() as f64;
            adam_step(&mut params.weights, &grad, &mut state, &cfg.adam);
        }
        let train = total / order.len() as f64;
        log.train_loss.push(train);
        let score = if val.is_empty() { train } else { params.loss(&val)? };
        log.val_loss.push(score);
        log::debug!("epoch {epoch}: train {train:.4} val {score:.4}");
        if score < best.0 {
            best = (score, params.weights.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    params.weights = best.1;
    params.round_to_storage();
    Ok(log)
}

pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Persistence

const MODEL_HEADER: &str = "model.txt";
const MODEL_WEIGHTS: &str = "weights.f32";

pub fn save_network(p: &HrNetworkParams, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut doc = KvDoc::new();
    doc.set("format_version", FORMAT_VERSION);
    p.config.write_kv(&mut doc);
    doc.set("seed", p.seed);
    doc.set("mu_offset", p.output.mu_offset);
    doc.set("mu_scale", p.output.mu_scale);
    doc.set("sigma_offset", p.output.sigma_offset);
    doc.set("sigma_scale", p.output.sigma_scale);
    doc.set("n_weights", p.n_params());
    doc.write(&dir.join(MODEL_HEADER))?;
    write_f32le(&dir.join(MODEL_WEIGHTS), &p.weights)
}

pub fn load_network(dir: &Path) -> Result<HrNetworkParams> {
    let hpath = dir.join(MODEL_HEADER);
    let doc = KvDoc::read(&hpath)?;
    let config = NetConfig::from_kv(&doc, &hpath)?;
    let layout = Layout::new(&config);
    let weights = read_f32le(&dir.join(MODEL_WEIGHTS), Some(layout.total))?;
    let d = OutputScale::default();
    Ok(HrNetworkParams {
        output: OutputScale {
            mu_offset: doc.parse_or("mu_offset", d.mu_offset, &hpath)?,
            mu_scale: doc.parse_or("mu_scale", d.mu_scale, &hpath)?,
            sigma_offset: doc.parse_or("sigma_offset", d.sigma_offset, &hpath)?,
            sigma_scale: doc.parse_or("sigma_scale", d.sigma_scale, &hpath)?,
        },
        seed: doc.parse_or("seed", 0, &hpath)?,
        config,
        weights,
        layout,
    })
}
