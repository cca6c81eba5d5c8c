use super::{DenoiserParams, Gradients, MaskKind, B_IN, EMBED, LAYER_BASE, PER_LAYER, W_ALPHA, W_IN, W_POS};
use crate::corpus::ControlId;
use crate::error::{FloodError, Result};
use crate::tensor::{dot, Mat};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct LayerCache {
    h_in: Mat,
    a: Mat,
    inv_rms1: Vec<f64>,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention probabilities per head, each `n × n`; masked entries are 0.
    probs: Vec<Mat>,
    attn: Mat,
    h_mid: Mat,
    b: Mat,
    inv_rms2: Vec<f64>,
    pre: Mat,
    act: Mat,
}

/// Activations retained by [`DenoiserParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    params_id: u64,
    generation: u64,
    x: Mat,
    controls: Vec<ControlId>,
    alpha_feat: Mat,
    pos_feat: Mat,
    layers: Vec<LayerCache>,
    h_last: Mat,
    inv_rms_out: Vec<f64>,
    f: Mat,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }
}

fn alpha_features(alpha: &[f64], freqs: usize) -> Mat {
    let width = 1 + 2 * freqs;
    let mut m = Mat::zeros(alpha.len(), width);
    for (k, &a) in alpha.iter().enumerate() {
        let row = m.row_mut(k);
        row[0] = a;
        for i in 0..freqs {
            let w = std::f64::consts::PI * (i + 1) as f64;
            row[1 + 2 * i] = (w * a).sin();
            row[2 + 2 * i] = (w * a).cos();
        }
    }
    m
}

fn pos_features(positions: &[f64], freqs: usize) -> Mat {
    let mut m = Mat::zeros(positions.len(), 2 * freqs);
    for (k, &p) in positions.iter().enumerate() {
        let row = m.row_mut(k);
        for i in 0..freqs {
            let w = (-(100f64).ln() * i as f64 / freqs as f64).exp();
            row[2 * i] = (w * p).sin();
            row[2 * i + 1] = (w * p).cos();
        }
    }
    m
}

/// Offsets counted back from the newest frame with `α > 0`.
fn relative_positions(alpha: &[f64]) -> Vec<f64> {
    let newest = alpha
        .iter()
        .rposition(|&a| a > 0.0)
        .unwrap_or(alpha.len().saturating_sub(1));
    (0..alpha.len()).map(|k| newest as f64 - k as f64).collect()
}

fn add_row_bias(m: &mut Mat, bias: &Mat) {
    let b = bias.row(0);
    for r in 0..m.rows() {
        for (v, bv) in m.row_mut(r).iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn rms_norm(x: &Mat, gain: &Mat) -> (Mat, Vec<f64>) {
    let g = gain.row(0);
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = dot(row, row) / row.len() as f64;
        let ir = 1.0 / (ms + NORM_EPS).sqrt();
        inv.push(ir);
        for ((o, xv), gv) in out.row_mut(r).iter_mut().zip(row).zip(g) {
            *o = gv * xv * ir;
        }
    }
    (out, inv)
}

/// Accumulates the gain gradient and returns the input gradient.
fn rms_norm_backward(x: &Mat, gain: &Mat, inv: &[f64], dy: &Mat, dgain: &mut Mat) -> Mat {
    let g = gain.row(0);
    let h = x.cols() as f64;
    let mut dx = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let ir = inv[r];
        let dg = dgain.row_mut(0);
        let mut proj = 0.0;
        for j in 0..xr.len() {
            dg[j] += dyr[j] * xr[j] * ir;
            proj += g[j] * dyr[j] * xr[j];
        }
        let c = proj * ir * ir * ir / h;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = g[j] * dyr[j] * ir - xr[j] * c;
        }
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn allowed(mask: MaskKind, key_live: &[bool], i: usize, j: usize) -> bool {
    key_live[j] && (mask == MaskKind::Bidirectional || j <= i)
}

pub(super) fn forward(
    p: &DenoiserParams,
    x: &Mat,
    controls: &[ControlId],
    alpha: &[f64],
    positions: Option<&[f64]>,
) -> Result<(Mat, ForwardCache)> {
    let cfg = &p.cfg;
    let n = x.rows();
    if x.cols() != cfg.dim || controls.len() != n || alpha.len() != n {
        return Err(FloodError::invalid(format!(
            "forward got x {:?}, {} controls, {} alphas for D = {}",
            x.shape(),
            controls.len(),
            alpha.len(),
            cfg.dim
        )));
    }
    if let Some(c) = controls.iter().find(|&&c| c >= cfg.num_controls) {
        return Err(FloodError::invalid(format!(
            "control id {c} outside vocabulary of {}",
            cfg.num_controls
        )));
    }
    let t = &p.tensors;
    let pos: Vec<f64> = match positions {
        Some(ps) if ps.len() == n => ps.to_vec(),
        Some(_) => return Err(FloodError::invalid("positions length mismatch")),
        None => relative_positions(alpha),
    };
    let alpha_feat = alpha_features(alpha, cfg.alpha_freqs);
    let pos_feat = pos_features(&pos, cfg.pos_freqs);

    let mut h = x.matmul(&t[W_IN]);
    add_row_bias(&mut h, &t[B_IN]);
    h.add_assign(&alpha_feat.matmul(&t[W_ALPHA]));
    h.add_assign(&pos_feat.matmul(&t[W_POS]));
    for (k, &c) in controls.iter().enumerate() {
        let e = t[EMBED].row(c as usize);
        for (v, ev) in h.row_mut(k).iter_mut().zip(e) {
            *v += ev;
        }
    }

    let key_live: Vec<bool> = alpha.iter().map(|&a| a > 0.0).collect();
    let heads = cfg.num_heads;
    let dh = cfg.hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let base = LAYER_BASE + l * PER_LAYER;
        let h_in = h;
        let (a, inv_rms1) = rms_norm(&h_in, &t[base]);
        let q = a.matmul(&t[base + 1]);
        let k = a.matmul(&t[base + 2]);
        let v = a.matmul(&t[base + 3]);
        let mut attn = Mat::zeros(n, cfg.hidden);
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let off = hd * dh;
            let mut pm = Mat::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                let mut max = f64::NEG_INFINITY;
                let prow = pm.row_mut(i);
                for j in 0..n {
                    if allowed(cfg.mask, &key_live, i, j) {
                        let s = dot(qi, &k.row(j)[off..off + dh]) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..n {
                    if allowed(cfg.mask, &key_live, i, j) {
                        let e = (prow[j] - max).exp();
                        prow[j] = e;
                        total += e;
                    }
                }
                for j in 0..n {
                    if allowed(cfg.mask, &key_live, i, j) {
                        prow[j] /= total;
                    }
                }
                let out = &mut attn.row_mut(i)[off..off + dh];
                for j in 0..n {
                    let pij = prow[j];
                    if pij != 0.0 {
                        for (o, vv) in out.iter_mut().zip(&v.row(j)[off..off + dh]) {
                            *o += pij * vv;
                        }
                    }
                }
            }
            probs.push(pm);
        }
        let mut h_mid = h_in.clone();
        h_mid.add_assign(&attn.matmul(&t[base + 4]));
        let (b, inv_rms2) = rms_norm(&h_mid, &t[base + 5]);
        let mut pre = b.matmul(&t[base + 6]);
        add_row_bias(&mut pre, &t[base + 7]);
        let act = pre.map(|u| u * sigmoid(u));
        let mut h_out = h_mid.clone();
        h_out.add_assign(&act.matmul(&t[base + 8]));
        add_row_bias(&mut h_out, &t[base + 9]);
        layers.push(LayerCache {
            h_in,
            a,
            inv_rms1,
            q,
            k,
            v,
            probs,
            attn,
            h_mid,
            b,
            inv_rms2,
            pre,
            act,
        });
        h = h_out;
    }
    let out_base = LAYER_BASE + cfg.num_layers * PER_LAYER;
    let (f, inv_rms_out) = rms_norm(&h, &t[out_base]);
    let mut y = f.matmul(&t[out_base + 1]);
    add_row_bias(&mut y, &t[out_base + 2]);
    Ok((
        y,
        ForwardCache {
            params_id: p.id,
            generation: p.generation,
            x: x.clone(),
            controls: controls.to_vec(),
            alpha_feat,
            pos_feat,
            layers,
            h_last: h,
            inv_rms_out,
            f,
        },
    ))
}

fn bias_grad(dy: &Mat, acc: &mut Mat) {
    let o = acc.row_mut(0);
    for r in 0..dy.rows() {
        for (a, v) in o.iter_mut().zip(dy.row(r)) {
            *a += v;
        }
    }
}

pub(super) fn backward(p: &DenoiserParams, cache: &ForwardCache, dy: &Mat) -> Result<Gradients> {
    if cache.params_id != p.id || cache.generation != p.generation {
        return Err(FloodError::InvalidState(
            "forward cache was produced by different parameters".into(),
        ));
    }
    let cfg = &p.cfg;
    let n = cache.rows();
    if dy.shape() != (n, cfg.dim) {
        return Err(FloodError::invalid(format!(
            "grad_output shape {:?}, expected {:?}",
            dy.shape(),
            (n, cfg.dim)
        )));
    }
    let t = &p.tensors;
    let mut g = p.zeros_like();
    let out_base = LAYER_BASE + cfg.num_layers * PER_LAYER;

    cache.f.tmatmul_acc(dy, &mut g.tensors[out_base + 1]);
    bias_grad(dy, &mut g.tensors[out_base + 2]);
    let df = dy.matmul(&t[out_base + 1].transpose());
    let mut dh = rms_norm_backward(
        &cache.h_last,
        &t[out_base],
        &cache.inv_rms_out,
        &df,
        &mut g.tensors[out_base],
    );

    let heads = cfg.num_heads;
    let dh_width = cfg.hidden / heads;
    let scale = 1.0 / (dh_width as f64).sqrt();
    for l in (0..cfg.num_layers).rev() {
        let base = LAYER_BASE + l * PER_LAYER;
        let lc = &cache.layers[l];

        // feed-forward half
        lc.act.tmatmul_acc(&dh, &mut g.tensors[base + 8]);
        bias_grad(&dh, &mut g.tensors[base + 9]);
        let dact = dh.matmul(&t[base + 8].transpose());
        let mut dpre = Mat::zeros(n, cfg.ffn);
        for ((o, da), u) in dpre
            .as_mut_slice()
            .iter_mut()
            .zip(dact.as_slice())
            .zip(lc.pre.as_slice())
        {
            let s = sigmoid(*u);
            *o = da * s * (1.0 + u * (1.0 - s));
        }
        lc.b.tmatmul_acc(&dpre, &mut g.tensors[base + 6]);
        bias_grad(&dpre, &mut g.tensors[base + 7]);
        let db = dpre.matmul(&t[base + 6].transpose());
        let mut dh_mid = rms_norm_backward(&lc.h_mid, &t[base + 5], &lc.inv_rms2, &db, &mut g.tensors[base + 5]);
        dh_mid.add_assign(&dh);

        // attention half
        lc.attn.tmatmul_acc(&dh_mid, &mut g.tensors[base + 4]);
        let dattn = dh_mid.matmul(&t[base + 4].transpose());
        let mut dq = Mat::zeros(n, cfg.hidden);
        let mut dk = Mat::zeros(n, cfg.hidden);
        let mut dv = Mat::zeros(n, cfg.hidden);
        for hd in 0..heads {
            let off = hd * dh_width;
            let pm = &lc.probs[hd];
            for i in 0..n {
                let prow = pm.row(i);
                let dout = &dattn.row(i)[off..off + dh_width];
                let mut dp = vec![0.0; n];
                let mut weighted = 0.0;
                for j in 0..n {
                    let pij = prow[j];
                    if pij != 0.0 {
                        dp[j] = dot(dout, &lc.v.row(j)[off..off + dh_width]);
                        weighted += pij * dp[j];
                        for (o, d) in dv.row_mut(j)[off..off + dh_width].iter_mut().zip(dout) {
                            *o += pij * d;
                        }
                    }
                }
                for j in 0..n {
                    let pij = prow[j];
                    if pij == 0.0 {
                        continue;
                    }
                    let ds = pij * (dp[j] - weighted) * scale;
                    let kj = &lc.k.row(j)[off..off + dh_width];
                    for (o, kv) in dq.row_mut(i)[off..off + dh_width].iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    let qi = &lc.q.row(i)[off..off + dh_width];
                    for (o, qv) in dk.row_mut(j)[off..off + dh_width].iter_mut().zip(qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
        lc.a.tmatmul_acc(&dq, &mut g.tensors[base + 1]);
        lc.a.tmatmul_acc(&dk, &mut g.tensors[base + 2]);
        lc.a.tmatmul_acc(&dv, &mut g.tensors[base + 3]);
        let mut da = dq.matmul(&t[base + 1].transpose());
        da.add_assign(&dk.matmul(&t[base + 2].transpose()));
        da.add_assign(&dv.matmul(&t[base + 3].transpose()));
        let mut dh_in = rms_norm_backward(&lc.h_in, &t[base], &lc.inv_rms1, &da, &mut g.tensors[base]);
        dh_in.add_assign(&dh_mid);
        dh = dh_in;
    }

    cache.x.tmatmul_acc(&dh, &mut g.tensors[W_IN]);
    bias_grad(&dh, &mut g.tensors[B_IN]);
    cache.alpha_feat.tmatmul_acc(&dh, &mut g.tensors[W_ALPHA]);
    cache.pos_feat.tmatmul_acc(&dh, &mut g.tensors[W_POS]);
    for (k, &c) in cache.controls.iter().enumerate() {
        let row = g.tensors[EMBED].row_mut(c as usize);
        for (o, v) in row.iter_mut().zip(dh.row(k)) {
            *o += v;
        }
    }
    Ok(g)
}
