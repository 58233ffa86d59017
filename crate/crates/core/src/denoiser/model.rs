//! Transformer forward pass with cached activations and the matching
//! reverse-mode backward pass.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use super::{LayerIdx, Parameters, Scalar, TimeIdx};
use crate::corpus::TokenId;
use crate::diffusion::{masked_term_logit_grad, DiffusionBatch};
use crate::error::{Error, Result};
use crate::schedule::ScheduleTable;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

/// `tanh` through one `exp`; libm's `tanhf` dominated training time.
fn tanh<F: Scalar>(x: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * x).exp() + F::one())
}

/// Inner `tanh` of the tanh-form GELU.
fn gelu_tanh<F: Scalar>(u: F) -> F {
    let k = F::of((2.0 / std::f64::consts::PI).sqrt());
    tanh(k * (u + F::of(GELU_C) * u * u * u))
}

fn gelu<F: Scalar>(u: F, th: F) -> F {
    F::of(0.5) * u * (F::one() + th)
}

fn gelu_grad<F: Scalar>(u: F, th: F) -> F {
    let k = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    half * (F::one() + th) + half * u * (F::one() - th * th) * k * (F::one() + F::of(3.0 * GELU_C) * u * u)
}

struct LnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

fn ln_forward<F: Scalar>(x: &Array2<F>, g: ArrayView1<F>, b: ArrayView1<F>) -> (Array2<F>, LnCache<F>) {
    let d = F::of(x.ncols() as f64);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / d;
        *inv = F::one() / (var + F::of(LN_EPS)).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates gain/bias gradients.
fn ln_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: ArrayView1<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = F::of(dy.ncols() as f64);
    let mut dx = dy * &g;
    for ((mut row, xh), &inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
        let mean = row.sum() / d;
        let dot = row.iter().zip(xh).fold(F::zero(), |a, (&u, &v)| a + u * v) / d;
        for (u, &v) in row.iter_mut().zip(xh) {
            *u = (*u - mean - v * dot) * inv;
        }
    }
    dx
}

fn softmax_rows<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

pub(crate) fn sinusoid(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let k = (i / 2) as f64;
            let freq = (-(10_000f64.ln()) * 2.0 * k / d as f64).exp();
            let a = t as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

struct LayerCache<F> {
    x_in: Array2<F>,
    ln1: LnCache<F>,
    h: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention weights per sequence, then per head.
    attn: Vec<Vec<Array2<F>>>,
    o: Array2<F>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    u: Array2<F>,
    th: Array2<F>,
    gu: Array2<F>,
}

/// Activations of one forward pass over `B` sequences of equal length `L`,
/// flattened to `B·L` rows.
pub struct Forward<F> {
    pub batch: usize,
    pub len: usize,
    tokens: Vec<TokenId>,
    steps: Vec<usize>,
    time_feats: Option<Array2<F>>,
    layers: Vec<LayerCache<F>>,
    lnf: Option<LnCache<F>>,
    hf: Array2<F>,
    /// `B·L × V` unnormalized scores.
    pub logits: Array2<F>,
}

fn linear<F: Scalar>(x: &Array2<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Array2<F> {
    x.dot(&w) + &b
}

impl<F: Scalar> Forward<F> {
    /// Runs the network; `keep` retains the activations needed for backward.
    pub fn run(p: &Parameters<F>, seqs: &[&[TokenId]], steps: &[usize], keep: bool) -> Result<Self> {
        let cfg = &p.config;
        let batch = seqs.len();
        let len = seqs.first().map_or(0, |s| s.len());
        if seqs.iter().any(|s| s.len() != len) {
            return Err(Error::ShapeMismatch("sequences in one forward pass must share a length".into()));
        }
        if len > cfg.max_len {
            return Err(Error::LengthExceeded { len, max: cfg.max_len });
        }
        if steps.len() != batch {
            return Err(Error::ShapeMismatch(format!("{batch} sequences, {} timesteps", steps.len())));
        }
        if let Some(&t) = steps.iter().find(|&&t| t > cfg.steps) {
            return Err(Error::BadTimestep { t, min: 0, max: cfg.steps });
        }
        let d = cfg.model_dim;
        let n = batch * len;
        let tokens: Vec<TokenId> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        if let Some(&id) = tokens.iter().find(|&&id| id as usize > cfg.vocab_size) {
            return Err(Error::UnknownId { id, vocab: cfg.vocab_size + 1 });
        }

        let tok = p.v2(p.layout.tok);
        let pos = p.v2(p.layout.pos);
        let (time_rows, time_feats) = match p.layout.time {
            TimeIdx::Sinusoidal { w, b } => {
                let mut feats = Array2::zeros((batch, d));
                for (mut row, &t) in feats.rows_mut().into_iter().zip(steps) {
                    for (x, s) in row.iter_mut().zip(sinusoid(t, d)) {
                        *x = F::of(s);
                    }
                }
                (linear(&feats, p.v2(w), p.v1(b)), Some(feats))
            }
            TimeIdx::Learned { table } => {
                let tab = p.v2(table);
                let mut rows = Array2::zeros((batch, d));
                for (mut row, &t) in rows.rows_mut().into_iter().zip(steps) {
                    row.assign(&tab.row(t));
                }
                (rows, None)
            }
        };
        let mut x = Array2::zeros((n, d));
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            let (b, i) = (r / len, r % len);
            row.assign(&tok.row(tokens[r] as usize));
            row += &pos.row(i);
            row += &time_rows.row(b);
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for li in &p.layout.layers {
            let (x_next, cache) = layer_forward(p, li, x, batch, len);
            x = x_next;
            if keep {
                layers.push(cache);
            }
        }
        let (hf, lnf) = ln_forward(&x, p.v1(p.layout.lnf_g), p.v1(p.layout.lnf_b));
        let logits = linear(&hf, p.v2(p.layout.out_w), p.v1(p.layout.out_b));
        Ok(Self {
            batch,
            len,
            tokens,
            steps: steps.to_vec(),
            time_feats: if keep { time_feats } else { None },
            layers,
            lnf: keep.then_some(lnf),
            hf,
            logits,
        })
    }

    /// Accumulates parameter gradients for `dlogits` into `grad`.
    pub fn backward(&self, p: &Parameters<F>, dlogits: &Array2<F>, grad: &mut [F]) -> Result<()> {
        let lnf = self
            .lnf
            .as_ref()
            .ok_or_else(|| Error::ShapeMismatch("forward pass did not keep activations".into()))?;
        let mut g = Grads { p, grad };
        g.add2(p.layout.out_w, &self.hf.t().dot(dlogits));
        g.add1(p.layout.out_b, &dlogits.sum_axis(Axis(0)));
        let dhf = dlogits.dot(&p.v2(p.layout.out_w).t());
        let mut dx = g.ln(p.layout.lnf_g, p.layout.lnf_b, &dhf, lnf);
        for (li, cache) in p.layout.layers.iter().zip(&self.layers).rev() {
            dx = layer_backward(&mut g, li, cache, dx, self.batch, self.len);
        }

        let d = p.config.model_dim;
        let mut dtok = Array2::<F>::zeros((p.config.vocab_size + 1, d));
        let mut dpos = Array2::<F>::zeros((p.config.max_len, d));
        let mut dtime = Array2::<F>::zeros((self.batch, d));
        for (r, row) in dx.rows().into_iter().enumerate() {
            let (b, i) = (r / self.len, r % self.len);
            let mut t = dtok.row_mut(self.tokens[r] as usize);
            t += &row;
            let mut q = dpos.row_mut(i);
            q += &row;
            let mut s = dtime.row_mut(b);
            s += &row;
        }
        g.add2(p.layout.tok, &dtok);
        g.add2(p.layout.pos, &dpos);
        match p.layout.time {
            TimeIdx::Sinusoidal { w, b } => {
                let feats = self.time_feats.as_ref().expect("kept with activations");
                g.add2(w, &feats.t().dot(&dtime));
                g.add1(b, &dtime.sum_axis(Axis(0)));
            }
            TimeIdx::Learned { table } => {
                let mut dtab = Array2::<F>::zeros((p.config.steps + 1, d));
                for (row, &t) in dtime.rows().into_iter().zip(&self.steps) {
                    let mut r = dtab.row_mut(t);
                    r += &row;
                }
                g.add2(table, &dtab);
            }
        }
        Ok(())
    }
}

fn layer_forward<F: Scalar>(
    p: &Parameters<F>,
    li: &LayerIdx,
    x: Array2<F>,
    batch: usize,
    len: usize,
) -> (Array2<F>, LayerCache<F>) {
    let cfg = &p.config;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let (h, ln1) = ln_forward(&x, p.v1(li.ln1_g), p.v1(li.ln1_b));
    let q = linear(&h, p.v2(li.wq), p.v1(li.bq));
    let k = linear(&h, p.v2(li.wk), p.v1(li.bk));
    let v = linear(&h, p.v2(li.wv), p.v1(li.bv));
    let per_seq: Vec<(Array2<F>, Vec<Array2<F>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let rows = b * len..(b + 1) * len;
            let mut o = Array2::zeros((len, cfg.model_dim));
            let mut weights = Vec::with_capacity(heads);
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut a = qh.dot(&kh.t()) * scale;
                softmax_rows(&mut a);
                o.slice_mut(s![.., cols]).assign(&a.dot(&vh));
                weights.push(a);
            }
            (o, weights)
        })
        .collect();
    let mut o = Array2::zeros((batch * len, cfg.model_dim));
    let mut attn = Vec::with_capacity(batch);
    for (b, (ob, w)) in per_seq.into_iter().enumerate() {
        o.slice_mut(s![b * len..(b + 1) * len, ..]).assign(&ob);
        attn.push(w);
    }
    let x_mid = &x + &linear(&o, p.v2(li.wo), p.v1(li.bo));
    let (h2, ln2) = ln_forward(&x_mid, p.v1(li.ln2_g), p.v1(li.ln2_b));
    let u = linear(&h2, p.v2(li.w1), p.v1(li.b1));
    let th = u.mapv(gelu_tanh);
    let mut gu = u.clone();
    gu.zip_mut_with(&th, |x, &t| *x = gelu(*x, t));
    let x_out = &x_mid + &linear(&gu, p.v2(li.w2), p.v1(li.b2));
    (x_out, LayerCache { x_in: x, ln1, h, q, k, v, attn, o, ln2, h2, u, th, gu })
}

struct Grads<'a, F> {
    p: &'a Parameters<F>,
    grad: &'a mut [F],
}

impl<F: Scalar> Grads<'_, F> {
    fn slot(&mut self, id: usize) -> &mut [F] {
        let s = &self.p.layout.specs[id];
        &mut self.grad[s.offset..s.offset + s.len()]
    }

    fn add1(&mut self, id: usize, g: &Array1<F>) {
        for (a, &b) in self.slot(id).iter_mut().zip(g.iter()) {
            *a += b;
        }
    }

    fn add2(&mut self, id: usize, g: &Array2<F>) {
        for (a, &b) in self.slot(id).iter_mut().zip(g.iter()) {
            *a += b;
        }
    }

    fn ln(&mut self, gid: usize, bid: usize, dy: &Array2<F>, cache: &LnCache<F>) -> Array2<F> {
        let d = dy.ncols();
        let (mut dg, mut db) = (Array1::zeros(d), Array1::zeros(d));
        let dx = ln_backward(dy, cache, self.p.v1(gid), &mut dg, &mut db);
        self.add1(gid, &dg);
        self.add1(bid, &db);
        dx
    }

    /// Gradients of `y = x·w + b`; returns `dx`.
    fn linear(&mut self, wid: usize, bid: usize, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        self.add2(wid, &x.t().dot(dy));
        self.add1(bid, &dy.sum_axis(Axis(0)));
        dy.dot(&self.p.v2(wid).t())
    }
}

fn layer_backward<F: Scalar>(
    g: &mut Grads<'_, F>,
    li: &LayerIdx,
    c: &LayerCache<F>,
    dx_out: Array2<F>,
    batch: usize,
    len: usize,
) -> Array2<F> {
    let cfg = &g.p.config;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = F::of(1.0 / (dh as f64).sqrt());

    // feed-forward residual
    let dgu = g.linear(li.w2, li.b2, &c.gu, &dx_out);
    let mut du = dgu;
    ndarray::Zip::from(&mut du).and(&c.u).and(&c.th).for_each(|d, &u, &t| *d *= gelu_grad(u, t));
    let dh2 = g.linear(li.w1, li.b1, &c.h2, &du);
    let mut dx_mid = g.ln(li.ln2_g, li.ln2_b, &dh2, &c.ln2);
    dx_mid += &dx_out;

    // attention residual
    let do_ = g.linear(li.wo, li.bo, &c.o, &dx_mid);
    let per_seq: Vec<(Array2<F>, Array2<F>, Array2<F>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let rows = b * len..(b + 1) * len;
            let mut dq = Array2::zeros((len, cfg.model_dim));
            let mut dk = Array2::zeros((len, cfg.model_dim));
            let mut dv = Array2::zeros((len, cfg.model_dim));
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let a = &c.attn[b][hd];
                let qh = c.q.slice(s![rows.clone(), cols.clone()]);
                let kh = c.k.slice(s![rows.clone(), cols.clone()]);
                let vh = c.v.slice(s![rows.clone(), cols.clone()]);
                let doh = do_.slice(s![rows.clone(), cols.clone()]);
                let da = doh.dot(&vh.t());
                dv.slice_mut(s![.., cols.clone()]).assign(&a.t().dot(&doh));
                // softmax backward, row by row
                let mut ds = a * &da;
                for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                    let sum = row.sum();
                    for (x, &w) in row.iter_mut().zip(arow) {
                        *x -= w * sum;
                    }
                }
                ds *= scale;
                dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
            }
            (dq, dk, dv)
        })
        .collect();
    let n = batch * len;
    let (mut dq, mut dk, mut dv) = (
        Array2::zeros((n, cfg.model_dim)),
        Array2::zeros((n, cfg.model_dim)),
        Array2::zeros((n, cfg.model_dim)),
    );
    for (b, (q, k, v)) in per_seq.into_iter().enumerate() {
        let r = s![b * len..(b + 1) * len, ..];
        dq.slice_mut(r).assign(&q);
        dk.slice_mut(r).assign(&k);
        dv.slice_mut(r).assign(&v);
    }
    let mut dh = g.linear(li.wq, li.bq, &c.h, &dq);
    dh += &g.linear(li.wk, li.bk, &c.h, &dk);
    dh += &g.linear(li.wv, li.bv, &c.h, &dv);
    let mut dx = g.ln(li.ln1_g, li.ln1_b, &dh, &c.ln1);
    dx += &dx_mid;
    debug_assert_eq!(dx.dim(), c.x_in.dim());
    dx
}

/// Stochastic NELBO in nats per token for a corrupted batch, and its
/// gradient with respect to every parameter.
///
/// Each sequence contributes `T · term_t`; the sum is divided by the total
/// token count, so duplicating a batch leaves both loss and gradient unchanged.
pub fn loss_grad<F: Scalar>(p: &Parameters<F>, batch: &DiffusionBatch, table: &ScheduleTable) -> Result<(f64, Vec<F>)> {
    let cfg = &p.config;
    if table.vocab_size() != cfg.vocab_size || table.steps() != cfg.steps {
        return Err(Error::IncompatibleSchedule(format!(
            "model V={} T={}, schedule V={} T={}",
            cfg.vocab_size,
            cfg.steps,
            table.vocab_size(),
            table.steps()
        )));
    }
    let mut grad = vec![F::zero(); p.data.len()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let seqs: Vec<&[TokenId]> = batch.zt.iter().map(|z| z.as_slice()).collect();
    let fwd = Forward::run(p, &seqs, &batch.t, true)?;
    let (v, len) = (cfg.vocab_size, fwd.len);
    let tokens = batch.token_count() as f64;
    let weight = table.steps() as f64 / tokens;
    let mut loss = 0.0;
    let mut dlogits = Array2::<F>::zeros(fwd.logits.dim());
    for b in 0..batch.len() {
        let t = batch.t[b];
        let support = table.row(t);
        for i in 0..len {
            if !batch.masked[b][i] {
                continue;
            }
            let r = b * len + i;
            let row = fwd.logits.row(r);
            let max = row
                .iter()
                .zip(support)
                .filter(|(_, &m)| m > 0.0)
                .fold(f64::NEG_INFINITY, |a, (x, _)| a.max(x.to_f64().unwrap()));
            let e: Vec<f64> = row
                .iter()
                .zip(support)
                .map(|(x, &m)| if m > 0.0 { (x.to_f64().unwrap() - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = e.iter().sum();
            let pp: Vec<f64> = e.iter().map(|x| x / z).collect();
            let (value, gl) = masked_term_logit_grad(batch.z0[b][i], t, &pp, table)?;
            loss += weight * value;
            for (c, gv) in gl.iter().enumerate().take(v) {
                dlogits[[r, c]] = F::of(weight * gv);
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("batch loss {loss}")));
    }
    fwd.backward(p, &dlogits, &mut grad)?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::super::{DenoiserConfig, TimeEmbedding};
    use super::*;
    use crate::corpus::TokenSequence;
    use crate::ordering::OrderingSpec;
    use crate::schedule::{build_schedule, Warp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(time: TimeEmbedding) -> (Parameters<f64>, ScheduleTable) {
        let cfg = DenoiserConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            ff_dim: 12,
            vocab_size: 4,
            max_len: 6,
            steps: 5,
            time_embedding: time,
            dropout: 0.0,
            seed: 9,
        };
        let probs = [0.4, 0.3, 0.2, 0.1];
        let order = OrderingSpec::from_sequence(&[3, 2, 1, 0], 4).unwrap();
        let table = build_schedule(&order, &probs, 5, &Warp::Identity).unwrap();
        (Parameters::init(&cfg).unwrap(), table)
    }

    fn batch(table: &ScheduleTable, seed: u64) -> DiffusionBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0: Vec<TokenSequence> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(0..4)).collect::<Vec<_>>().into()).collect();
        DiffusionBatch::at(z0, vec![5, 3, 2], table, &mut rng).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for time in [TimeEmbedding::Sinusoidal, TimeEmbedding::Learned] {
            let (mut p, table) = tiny(time);
            let b = batch(&table, 1);
            let (_, grad) = loss_grad(&p, &b, &table).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..40 {
                let i = rng.gen_range(0..p.data.len());
                let orig = p.data[i];
                p.data[i] = orig + 1e-5;
                let up = loss_grad(&p, &b, &table).unwrap().0;
                p.data[i] = orig - 1e-5;
                let down = loss_grad(&p, &b, &table).unwrap().0;
                p.data[i] = orig;
                let fd = (up - down) / 2e-5;
                let denom = fd.abs().max(grad[i].abs()).max(1e-7);
                assert!((fd - grad[i]).abs() / denom < 1e-4, "{} {fd} {}", p.layout.specs().iter().rfind(|s| s.offset <= i).unwrap().name, grad[i]);
            }
        }
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let (p, table) = tiny(TimeEmbedding::Sinusoidal);
        let b = batch(&table, 3);
        let mut d = b.clone();
        d.z0.extend(b.z0.clone());
        d.t.extend(b.t.clone());
        d.zt.extend(b.zt.clone());
        d.masked.extend(b.masked.clone());
        let (l1, g1) = loss_grad(&p, &b, &table).unwrap();
        let (l2, g2) = loss_grad(&p, &d, &table).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nothing_masked_means_no_loss() {
        let (p, table) = tiny(TimeEmbedding::Sinusoidal);
        // category 0 is destroyed last, so nothing is masked at t=1
        let z0: Vec<TokenSequence> = vec![vec![0; 4].into(), vec![0; 4].into()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = DiffusionBatch::at(z0, vec![1, 1], &table, &mut rng).unwrap();
        assert!(b.masked.iter().flatten().all(|m| !m));
        let (loss, grad) = loss_grad(&p, &b, &table).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gelu_derivative() {
        let f = |u: f64| gelu(u, gelu_tanh(u));
        for u in [-3.0f64, -0.7, 0.0, 0.4, 2.5, 30.0, -30.0] {
            let fd = (f(u + 1e-6) - f(u - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(u, gelu_tanh(u))).abs() < 1e-8, "{u}");
            assert!((tanh(u) - u.tanh()).abs() < 1e-15);
        }
    }
}
