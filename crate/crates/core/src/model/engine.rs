//! Forward pass with cached activations and the matching reverse pass.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};

use super::{Sequence, Weights};
use crate::adapter::{ComponentKind as C, ModelSpec, SiteKey};
use crate::error::{Error, Result};

pub(crate) const RMS_EPS: f64 = 1e-5;

/// Gradients of the loss with respect to every effective weight.
///
/// Site gradients are with respect to `W₀ + ΔW`, so they are also the
/// gradients with respect to any additive delta at that site.
#[derive(Debug, Clone)]
pub struct Grads {
    pub sites: BTreeMap<SiteKey, Array2<f64>>,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub unembed: Array2<f64>,
}

impl Grads {
    fn zeros_like(w: &Weights) -> Self {
        Self {
            sites: w.sites.iter().map(|(&k, m)| (k, Array2::zeros(m.dim()))).collect(),
            tok_emb: Array2::zeros(w.tok_emb.dim()),
            pos_emb: Array2::zeros(w.pos_emb.dim()),
            unembed: Array2::zeros(w.unembed.dim()),
        }
    }

    pub fn site(&self, layer: usize, comp: C) -> &Array2<f64> {
        &self.sites[&(layer, comp)]
    }
}

struct LayerCache {
    n1: Array2<f64>,
    r1: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Array2<f64>,
    ctx: Array2<f64>,
    n2: Array2<f64>,
    r2: Array1<f64>,
    g: Array2<f64>,
    u: Array2<f64>,
    h: Array2<f64>,
}

pub(crate) struct Forward {
    pub logits: Array2<f64>,
    layers: Vec<LayerCache>,
    nf: Array2<f64>,
    rf: Array1<f64>,
}

pub(crate) fn check_ids(spec: &ModelSpec, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if ids.len() > spec.context_len {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds the context of {}",
            ids.len(),
            spec.context_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= spec.vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", spec.vocab_size)));
    }
    Ok(())
}

fn rms_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let r = x.map_axis(Axis(1), |row| (row.dot(&row) / d + RMS_EPS).sqrt());
    let y = x / &r.view().insert_axis(Axis(1));
    (y, r)
}

fn rms_norm_backward(dy: &Array2<f64>, y: &Array2<f64>, r: &Array1<f64>) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dx = dy.clone();
    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
        let yi = y.row(i);
        let m = dy.row(i).dot(&yi) / d;
        row.zip_mut_with(&yi, |g, &yv| *g = (*g - yv * m) / r[i]);
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `x·Wᵀ` for a `d_out × d_in` weight.
fn proj(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    x.dot(&w.t())
}

pub(crate) fn forward(spec: &ModelSpec, w: &Weights, ids: &[usize]) -> Forward {
    let t = ids.len();
    let mut x = Array2::zeros((t, spec.embed_dim));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row += &w.tok_emb.row(id);
        row += &w.pos_emb.row(i);
    }
    let mut layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let (n1, r1) = rms_norm(&x);
        let q = proj(&n1, w.site(l, C::QProj));
        let k = proj(&n1, w.site(l, C::KProj));
        let v = proj(&n1, w.site(l, C::VProj));
        let scale = 1.0 / (q.ncols() as f64).sqrt();
        let mut att = q.dot(&k.t()) * scale;
        for i in 0..t {
            let mut row = att.row_mut(i);
            let row = row.as_slice_mut().expect("contiguous rows");
            softmax_inplace(&mut row[..=i]);
            row[i + 1..].fill(0.0);
        }
        let ctx = att.dot(&v);
        let x_mid = &x + &proj(&ctx, w.site(l, C::OProj));
        let (n2, r2) = rms_norm(&x_mid);
        let g = proj(&n2, w.site(l, C::GateProj));
        let u = proj(&n2, w.site(l, C::UpProj));
        let h = ndarray::Zip::from(&g).and(&u).map_collect(|&g, &u| g * sigmoid(g) * u);
        let x_out = &x_mid + &proj(&h, w.site(l, C::DownProj));
        layers.push(LayerCache {
            n1,
            r1,
            q,
            k,
            v,
            att,
            ctx,
            n2,
            r2,
            g,
            u,
            h,
        });
        x = x_out;
    }
    let (nf, rf) = rms_norm(&x);
    let logits = proj(&nf, &w.unembed);
    Forward { logits, layers, nf, rf }
}

/// `dW += dYᵀ·X` for `Y = X·Wᵀ`; returns `dX = dY·W`.
fn proj_backward(dy: &Array2<f64>, x: &Array2<f64>, w: &Array2<f64>, dw: &mut Array2<f64>) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &dy.t(), x, 1.0, dw);
    dy.dot(w)
}

pub(crate) fn backward(spec: &ModelSpec, w: &Weights, ids: &[usize], fw: &Forward, dlogits: &Array2<f64>, g: &mut Grads) {
    let dnf = proj_backward(dlogits, &fw.nf, &w.unembed, &mut g.unembed);
    let mut dx = rms_norm_backward(&dnf, &fw.nf, &fw.rf);
    for l in (0..spec.n_layers).rev() {
        let c = &fw.layers[l];
        let site = |comp| (l, comp);

        // MLP branch: x_out = x_mid + down(silu(gate)·up)
        let dh = proj_backward(&dx, &c.h, w.site(l, C::DownProj), g.sites.get_mut(&site(C::DownProj)).unwrap());
        let mut dg = Array2::zeros(c.g.dim());
        let mut du = Array2::zeros(c.u.dim());
        ndarray::Zip::from(&mut dg)
            .and(&mut du)
            .and(&dh)
            .and(&c.g)
            .and(&c.u)
            .for_each(|dg, du, &dh, &gv, &uv| {
                let sg = sigmoid(gv);
                *du = dh * gv * sg;
                *dg = dh * uv * sg * (1.0 + gv * (1.0 - sg));
            });
        let mut dn2 = proj_backward(&dg, &c.n2, w.site(l, C::GateProj), g.sites.get_mut(&site(C::GateProj)).unwrap());
        dn2 += &proj_backward(&du, &c.n2, w.site(l, C::UpProj), g.sites.get_mut(&site(C::UpProj)).unwrap());
        dx += &rms_norm_backward(&dn2, &c.n2, &c.r2);

        // attention branch: x_mid = x + o(att·v)
        let dctx = proj_backward(&dx, &c.ctx, w.site(l, C::OProj), g.sites.get_mut(&site(C::OProj)).unwrap());
        let datt = dctx.dot(&c.v.t());
        let dv = c.att.t().dot(&dctx);
        let mut ds = Array2::zeros(c.att.dim());
        for i in 0..ids.len() {
            let a = c.att.row(i);
            let da = datt.row(i);
            let inner = a.slice(s![..=i]).dot(&da.slice(s![..=i]));
            let mut out = ds.row_mut(i);
            for j in 0..=i {
                out[j] = a[j] * (da[j] - inner);
            }
        }
        let scale = 1.0 / (c.q.ncols() as f64).sqrt();
        ds *= scale;
        let dq = ds.dot(&c.k);
        let dk = ds.t().dot(&c.q);
        let mut dn1 = proj_backward(&dq, &c.n1, w.site(l, C::QProj), g.sites.get_mut(&site(C::QProj)).unwrap());
        dn1 += &proj_backward(&dk, &c.n1, w.site(l, C::KProj), g.sites.get_mut(&site(C::KProj)).unwrap());
        dn1 += &proj_backward(&dv, &c.n1, w.site(l, C::VProj), g.sites.get_mut(&site(C::VProj)).unwrap());
        dx += &rms_norm_backward(&dn1, &c.n1, &c.r1);
    }
    for (i, &id) in ids.iter().enumerate() {
        let row = dx.row(i);
        let mut te = g.tok_emb.row_mut(id);
        te += &row;
        let mut pe = g.pos_emb.row_mut(i);
        pe += &row;
    }
}

/// Cross-entropy of the scored positions of one sequence, plus `∂/∂logits`
/// scaled by `1/denom`.
fn seq_loss(logits: &Array2<f64>, seq: &Sequence, denom: f64, want_grad: bool) -> (f64, Option<Array2<f64>>) {
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| Array2::zeros(logits.dim()));
    for pos in seq.prompt_len - 1..seq.ids.len() - 1 {
        let target = seq.ids[pos + 1];
        let mut p = logits.row(pos).to_vec();
        softmax_inplace(&mut p);
        loss -= p[target].max(f64::MIN_POSITIVE).ln();
        if let Some(g) = grad.as_mut() {
            let mut row = g.row_mut(pos);
            for (j, pj) in p.iter().enumerate() {
                row[j] = pj / denom;
            }
            row[target] -= 1.0 / denom;
        }
    }
    (loss, grad)
}

fn check_batch(spec: &ModelSpec, batch: &[Sequence]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut n = 0;
    for seq in batch {
        check_ids(spec, &seq.ids)?;
        if seq.prompt_len == 0 || seq.prompt_len >= seq.ids.len() {
            return Err(Error::invalid("sequence has no scored positions"));
        }
        n += seq.n_targets();
    }
    Ok(n as f64)
}

/// Mean token cross-entropy over the output positions of `batch`.
pub fn mean_loss(spec: &ModelSpec, w: &Weights, batch: &[Sequence]) -> Result<f64> {
    let n = check_batch(spec, batch)?;
    let total: f64 = batch.iter().map(|s| seq_loss(&forward(spec, w, &s.ids).logits, s, n, false).0).sum();
    Ok(total / n)
}

/// Mean token cross-entropy and its gradient with respect to every weight in `w`.
pub fn loss_and_grads(spec: &ModelSpec, w: &Weights, batch: &[Sequence]) -> Result<(f64, Grads)> {
    let n = check_batch(spec, batch)?;
    let mut grads = Grads::zeros_like(w);
    let mut total = 0.0;
    for seq in batch {
        let fw = forward(spec, w, &seq.ids);
        let (loss, dlogits) = seq_loss(&fw.logits, seq, n, true);
        total += loss;
        backward(spec, w, &seq.ids, &fw, &dlogits.expect("requested"), &mut grads);
    }
    Ok((total / n, grads))
}

/// Logits for the last position only.
pub(crate) fn last_logits(spec: &ModelSpec, w: &Weights, ids: &[usize]) -> Vec<f64> {
    let fw = forward(spec, w, ids);
    fw.logits.row(ids.len() - 1).to_vec()
}
