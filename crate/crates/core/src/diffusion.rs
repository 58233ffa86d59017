//! Forward corruption, posterior and reverse steps, NELBO assembly,
//! ancestral sampling and a trajectory-enumeration oracle.
//!
//! Everything here works in nats. A position masked at `t` whose original
//! category is `c` has the two-point posterior
//! `P(z_{t-1}=M) = m_{t-1}(c)/m_t(c)`, `P(z_{t-1}=c) = 1 - m_{t-1}(c)/m_t(c)`:
//! the mask time is the first step at which a latent uniform draw falls below
//! `m_t(c)`, so conditioning on "masked by t" leaves `m_{t-1}/m_t` of the mass
//! on "already masked at t-1". An unmasked position was unmasked at every
//! earlier step, so both the posterior and the reverse step are point masses
//! on the observed token and contribute no KL.
//!
//! Forward, posterior and reverse distributions factorize over positions
//! given `z_0` and `z_t`, so the per-step KL is a sum of per-position KLs. The
//! expectation over `z_t` does not factorize once the denoiser looks at the
//! whole sequence; [`NelboMode::Exact`] enumerates mask patterns instead.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::schedule::ScheduleTable;

/// Anything producing `p̂(z_0 | z_t)`.
pub trait Denoiser: Sync {
    /// Number of real categories `V`; the mask id is `V`.
    fn vocab_size(&self) -> usize;

    /// Row-major `len × V` probabilities, one distribution per position.
    fn predict(&self, zt: &[TokenId], t: usize) -> Result<Vec<f64>>;

    fn predict_batch(&self, inputs: &[(&[TokenId], usize)]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|(zt, t)| self.predict(zt, *t)).collect()
    }
}

fn check_t(t: usize, min: usize, table: &ScheduleTable) -> Result<()> {
    if t < min || t > table.steps() {
        return Err(Error::BadTimestep { t, min, max: table.steps() });
    }
    Ok(())
}

fn check_ids(ids: &[TokenId], v: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= v) {
        Some(&id) => Err(Error::UnknownId { id, vocab: v }),
        None => Ok(()),
    }
}

/// Draws an index from a discrete distribution with one uniform variate.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return i;
            }
            u -= p;
            last = i;
        }
    }
    last
}

/// A corrupted batch with per-sequence timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionBatch {
    pub z0: Vec<TokenSequence>,
    pub t: Vec<usize>,
    pub zt: Vec<Vec<TokenId>>,
    pub masked: Vec<Vec<bool>>,
}

impl DiffusionBatch {
    /// Draws `t ~ U{1..T}` per sequence and corrupts accordingly.
    pub fn sample<R: Rng + ?Sized>(z0: Vec<TokenSequence>, table: &ScheduleTable, rng: &mut R) -> Result<Self> {
        let t = (0..z0.len()).map(|_| rng.gen_range(1..=table.steps())).collect();
        Self::at(z0, t, table, rng)
    }

    pub fn at<R: Rng + ?Sized>(
        z0: Vec<TokenSequence>,
        t: Vec<usize>,
        table: &ScheduleTable,
        rng: &mut R,
    ) -> Result<Self> {
        if z0.len() != t.len() {
            return Err(Error::LengthMismatch(format!("{} sequences, {} timesteps", z0.len(), t.len())));
        }
        let mask = table.vocab_size() as TokenId;
        let mut zt = Vec::with_capacity(z0.len());
        let mut masked = Vec::with_capacity(z0.len());
        for (seq, &ti) in z0.iter().zip(&t) {
            let z = forward_sample(seq, ti, table, rng)?;
            masked.push(z.iter().map(|&id| id == mask).collect());
            zt.push(z);
        }
        Ok(Self { z0, t, zt, masked })
    }

    pub fn len(&self) -> usize {
        self.z0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z0.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.z0.iter().map(|s| s.len()).sum()
    }
}

/// Masks each position independently with probability `m_t(z_0)`.
pub fn forward_sample<R: Rng + ?Sized>(
    z0: &[TokenId],
    t: usize,
    table: &ScheduleTable,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    check_t(t, 0, table)?;
    let v = table.vocab_size();
    check_ids(z0, v)?;
    let row = table.row(t);
    Ok(z0
        .iter()
        .map(|&c| if rng.gen::<f64>() < row[c as usize] { v as TokenId } else { c })
        .collect())
}

/// A forward path where each position has one latent uniform, so masks only
/// ever accumulate. Returns `z_t` for every requested step.
pub fn forward_trajectory<R: Rng + ?Sized>(
    z0: &[TokenId],
    table: &ScheduleTable,
    steps: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<TokenId>>> {
    let v = table.vocab_size();
    check_ids(z0, v)?;
    let u: Vec<f64> = z0.iter().map(|_| rng.gen()).collect();
    steps
        .iter()
        .map(|&t| {
            check_t(t, 0, table)?;
            let row = table.row(t);
            Ok(z0
                .iter()
                .zip(&u)
                .map(|(&c, &ui)| if ui < row[c as usize] { v as TokenId } else { c })
                .collect())
        })
        .collect()
}

/// Two-point distribution of `z_{t-1}` for a position masked at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mask: f64,
    pub reveal: f64,
}

pub fn posterior_step(category: TokenId, t: usize, table: &ScheduleTable) -> Result<Posterior> {
    check_t(t, 1, table)?;
    check_ids(&[category], table.vocab_size())?;
    let mt = table.m(t, category);
    if mt <= 0.0 {
        return Err(Error::DivisionByZeroMask { t, category });
    }
    let mask = (table.m(t - 1, category) / mt).min(1.0);
    Ok(Posterior { mask, reveal: 1.0 - mask })
}

/// `phat` restricted to categories still maskable at `t` and renormalized.
pub fn restrict_support(phat: &[f64], t: usize, table: &ScheduleTable) -> Result<Vec<f64>> {
    let row = table.row(t);
    if phat.len() != row.len() {
        return Err(Error::LengthMismatch(format!("{} probabilities for V={}", phat.len(), row.len())));
    }
    if row.iter().all(|&m| m <= 0.0) {
        return Err(Error::EmptySupport(t));
    }
    let z: f64 = phat.iter().zip(row).filter(|(_, &m)| m > 0.0).map(|(p, _)| p).sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::InvalidProbs(format!("denoiser puts no mass on categories maskable at t={t}")));
    }
    Ok(phat.iter().zip(row).map(|(&p, &m)| if m > 0.0 { p / z } else { 0.0 }).collect())
}

/// Distribution of `z_{t-1}` over `V` categories followed by the mask.
pub fn reverse_step_dist(phat: &[f64], zt_pos: TokenId, t: usize, table: &ScheduleTable) -> Result<Vec<f64>> {
    check_t(t, 1, table)?;
    let v = table.vocab_size();
    let mut out = vec![0.0; v + 1];
    if zt_pos as usize != v {
        check_ids(&[zt_pos], v)?;
        out[zt_pos as usize] = 1.0;
        return Ok(out);
    }
    let pp = restrict_support(phat, t, table)?;
    let (now, prev) = (table.row(t), table.row(t - 1));
    let mut stay = 0.0;
    for c in 0..v {
        if now[c] > 0.0 {
            let keep = (prev[c] / now[c]).min(1.0);
            out[c] = pp[c] * (1.0 - keep);
            stay += pp[c] * keep;
        }
    }
    out[v] = stay;
    Ok(out)
}

/// KL at one masked position for `t ≥ 2`, given the support-restricted `phat`.
fn masked_kl(c: TokenId, t: usize, pp: &[f64], table: &ScheduleTable) -> Result<f64> {
    let post = posterior_step(c, t, table)?;
    let (now, prev) = (table.row(t), table.row(t - 1));
    let mut kl = 0.0;
    if post.reveal > 0.0 {
        let pc = pp[c as usize];
        if pc <= 0.0 {
            return Err(Error::ZeroProbability { category: c });
        }
        // p(z_{t-1}=c) = pp[c]·reveal, so the ratio collapses to 1/pp[c]
        kl -= post.reveal * pc.ln();
    }
    if post.mask > 0.0 {
        let pm: f64 = (0..pp.len())
            .filter(|&k| now[k] > 0.0)
            .map(|k| pp[k] * (prev[k] / now[k]).min(1.0))
            .sum();
        if pm <= 0.0 {
            return Err(Error::ZeroProbability { category: table.vocab_size() as TokenId });
        }
        kl += post.mask * (post.mask / pm).ln();
    }
    Ok(kl)
}

/// Per-position `KL(q(z_{t-1}|z_t,z_0) ‖ p(z_{t-1}|z_t))` for `t ∈ [2, T]`;
/// `phat` is the `len × V` denoiser output.
pub fn kl_step(z0: &[TokenId], zt: &[TokenId], t: usize, phat: &[f64], table: &ScheduleTable) -> Result<Vec<f64>> {
    check_t(t, 2, table)?;
    let v = table.vocab_size();
    check_shapes(z0, zt, phat, v)?;
    z0.iter()
        .zip(zt)
        .enumerate()
        .map(|(i, (&c, &z))| {
            if z as usize != v {
                return Ok(0.0);
            }
            let pp = restrict_support(&phat[i * v..(i + 1) * v], t, table)?;
            masked_kl(c, t, &pp, table)
        })
        .collect()
}

fn check_shapes(z0: &[TokenId], zt: &[TokenId], phat: &[f64], v: usize) -> Result<()> {
    if z0.len() != zt.len() || phat.len() != z0.len() * v {
        return Err(Error::LengthMismatch(format!(
            "z0 {} / zt {} / phat {} for V={v}",
            z0.len(),
            zt.len(),
            phat.len()
        )));
    }
    check_ids(z0, v)?;
    for (i, (&c, &z)) in z0.iter().zip(zt).enumerate() {
        if z != c && z as usize != v {
            return Err(Error::LengthMismatch(format!("z_t[{i}]={z} is neither z_0[{i}]={c} nor the mask")));
        }
    }
    Ok(())
}

/// `−log p(z_0 | z_1)`: sums `−ln p̂'(z_0)` over positions masked at `t = 1`.
pub fn recon_term(z0: &[TokenId], z1: &[TokenId], phat: &[f64], table: &ScheduleTable) -> Result<f64> {
    check_t(1, 1, table)?;
    let v = table.vocab_size();
    check_shapes(z0, z1, phat, v)?;
    let mut total = 0.0;
    for (i, (&c, &z)) in z0.iter().zip(z1).enumerate() {
        if z as usize != v {
            continue;
        }
        let pp = restrict_support(&phat[i * v..(i + 1) * v], 1, table)?;
        if pp[c as usize] <= 0.0 {
            return Err(Error::ZeroProbability { category: c });
        }
        total -= pp[c as usize].ln();
    }
    Ok(total)
}

/// Always zero: row `T` masks everything and `p(z_T)` is the all-mask point
/// mass. Fails if `z_T` still holds a real token.
pub fn prior_kl(zt: &[TokenId], table: &ScheduleTable) -> Result<f64> {
    let mask = table.vocab_size() as TokenId;
    if let Some(i) = zt.iter().position(|&z| z != mask) {
        return Err(Error::NotFullyMasked(i));
    }
    if let Some(c) = table.row(table.steps()).iter().position(|&m| m < 1.0) {
        return Err(Error::InvalidSchedule(format!("m_T({c}) < 1")));
    }
    Ok(0.0)
}

/// The ELBO term for one timestep: reconstruction at `t = 1`, summed KL otherwise.
pub fn step_term(z0: &[TokenId], zt: &[TokenId], t: usize, phat: &[f64], table: &ScheduleTable) -> Result<f64> {
    if t == 1 {
        recon_term(z0, zt, phat, table)
    } else {
        Ok(kl_step(z0, zt, t, phat, table)?.iter().sum())
    }
}

/// Term value at one masked position and its gradient with respect to the
/// logits that produced `pp` (a softmax over categories maskable at `t`).
///
/// With `g = ∂L/∂pp`, the softmax backward is `pp ⊙ (g − ⟨pp, g⟩)` and
/// `⟨pp, g⟩ = −1` for both term types.
pub fn masked_term_logit_grad(c: TokenId, t: usize, pp: &[f64], table: &ScheduleTable) -> Result<(f64, Vec<f64>)> {
    let ci = c as usize;
    if t == 1 {
        if pp[ci] <= 0.0 {
            return Err(Error::ZeroProbability { category: c });
        }
        let mut grad = pp.to_vec();
        grad[ci] -= 1.0;
        return Ok((-pp[ci].ln(), grad));
    }
    let value = masked_kl(c, t, pp, table)?;
    let post = posterior_step(c, t, table)?;
    let (now, prev) = (table.row(t), table.row(t - 1));
    let ratio: Vec<f64> = (0..pp.len())
        .map(|k| if now[k] > 0.0 { (prev[k] / now[k]).min(1.0) } else { 0.0 })
        .collect();
    let pm: f64 = pp.iter().zip(&ratio).map(|(p, r)| p * r).sum();
    let scale = if post.mask > 0.0 { post.mask / pm } else { 0.0 };
    let mut grad: Vec<f64> = pp.iter().zip(&ratio).map(|(&p, &r)| p * (1.0 - scale * r)).collect();
    grad[ci] -= post.reveal;
    Ok((value, grad))
}

/// Stochastic NELBO estimate in nats over a set of sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub nats: f64,
    pub tokens: usize,
}

impl Estimate {
    pub fn bits_per_token(&self) -> f64 {
        self.nats / (std::f64::consts::LN_2 * self.tokens as f64)
    }
}

/// One draw per sequence of `T · term_t` with `t ~ U{1..T}`. Unbiased for the
/// full NELBO because `E_t[T · term_t] = Σ_t term_t` and the prior term is zero.
pub fn stochastic_terms<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    batch: &[TokenSequence],
    model: &D,
    table: &ScheduleTable,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_model(model, table)?;
    let b = DiffusionBatch::sample(batch.to_vec(), table, rng)?;
    let inputs: Vec<(&[TokenId], usize)> = b.zt.iter().map(|z| z.as_slice()).zip(b.t.iter().copied()).collect();
    let phats = model.predict_batch(&inputs)?;
    let steps = table.steps() as f64;
    (0..b.len())
        .map(|i| Ok(steps * step_term(&b.z0[i], &b.zt[i], b.t[i], &phats[i], table)?))
        .collect()
}

pub fn nelbo_stochastic<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    batch: &[TokenSequence],
    model: &D,
    table: &ScheduleTable,
    rng: &mut R,
) -> Result<Estimate> {
    let terms = stochastic_terms(batch, model, table, rng)?;
    Ok(Estimate { nats: terms.iter().sum(), tokens: batch.iter().map(|s| s.len()).sum() })
}

fn check_model<D: Denoiser + ?Sized>(model: &D, table: &ScheduleTable) -> Result<()> {
    if model.vocab_size() != table.vocab_size() {
        return Err(Error::IncompatibleSchedule(format!(
            "model has V={}, schedule has V={}",
            model.vocab_size(),
            table.vocab_size()
        )));
    }
    Ok(())
}

/// How `nelbo_full` takes the expectation over `z_t` at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NelboMode {
    /// Enumerates every mask pattern over positions with `0 < m_t < 1`.
    Exact { max_uncertain: usize },
    /// Averages `samples` corruptions per step from a seed derived from
    /// `seed`, the sequence content and `t`, so results do not depend on how
    /// a dataset is batched or ordered.
    MonteCarlo { samples: usize, seed: u64 },
}

impl NelboMode {
    pub fn exact() -> Self {
        NelboMode::Exact { max_uncertain: 16 }
    }
}

/// NELBO decomposition in nats. `recon` is the positive `−log p(z_0|z_1)`
/// contribution, so `total = prior_kl + Σ step_kl + recon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub prior_kl: f64,
    /// Indexed by `t`; entries 0 and 1 are zero.
    pub step_kl: Vec<f64>,
    pub recon: f64,
    pub total: f64,
    pub tokens: usize,
}

impl ElboBreakdown {
    fn empty(steps: usize) -> Self {
        Self { prior_kl: 0.0, step_kl: vec![0.0; steps + 1], recon: 0.0, total: 0.0, tokens: 0 }
    }

    pub fn bits_per_token(&self) -> f64 {
        self.total / (std::f64::consts::LN_2 * self.tokens as f64)
    }

    pub fn perplexity(&self) -> f64 {
        self.bits_per_token().exp2()
    }

    pub fn step_kl_sum(&self) -> f64 {
        self.step_kl.iter().sum()
    }

    /// Adds another breakdown over disjoint sequences.
    pub fn merge(&mut self, other: &ElboBreakdown) {
        self.prior_kl += other.prior_kl;
        for (a, b) in self.step_kl.iter_mut().zip(&other.step_kl) {
            *a += b;
        }
        self.recon += other.recon;
        self.total += other.total;
        self.tokens += other.tokens;
    }
}

fn derived_seed(seed: u64, ids: &[TokenId], t: usize) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    ids.hash(&mut h);
    t.hash(&mut h);
    h.finish()
}

/// `(z_t, weight)` pairs covering the expectation over `q(z_t | z_0)`.
fn corruptions(z0: &[TokenId], t: usize, table: &ScheduleTable, mode: NelboMode) -> Result<Vec<(Vec<TokenId>, f64)>> {
    let v = table.vocab_size() as TokenId;
    let row = table.row(t);
    match mode {
        NelboMode::Exact { max_uncertain } => {
            let mut base = z0.to_vec();
            let mut uncertain = Vec::new();
            for (i, &c) in z0.iter().enumerate() {
                let m = row[c as usize];
                if m >= 1.0 {
                    base[i] = v;
                } else if m > 0.0 {
                    uncertain.push(i);
                }
            }
            if uncertain.len() > max_uncertain {
                return Err(Error::TooLarge(format!(
                    "{} positions with 0 < m_{t} < 1 (limit {max_uncertain})",
                    uncertain.len()
                )));
            }
            let mut out = Vec::with_capacity(1 << uncertain.len());
            for pattern in 0u64..(1u64 << uncertain.len()) {
                let mut z = base.clone();
                let mut w = 1.0;
                for (bit, &i) in uncertain.iter().enumerate() {
                    let m = row[z0[i] as usize];
                    if pattern >> bit & 1 == 1 {
                        z[i] = v;
                        w *= m;
                    } else {
                        w *= 1.0 - m;
                    }
                }
                out.push((z, w));
            }
            Ok(out)
        }
        NelboMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::InvalidConfig("Monte Carlo evaluation needs at least one sample".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, z0, t));
            let w = 1.0 / samples as f64;
            (0..samples).map(|_| Ok((forward_sample(z0, t, table, &mut rng)?, w))).collect()
        }
    }
}

/// Full NELBO of one sequence, summing every step.
pub fn nelbo_full<D: Denoiser + ?Sized>(
    z0: &[TokenId],
    model: &D,
    table: &ScheduleTable,
    mode: NelboMode,
) -> Result<ElboBreakdown> {
    check_model(model, table)?;
    check_ids(z0, table.vocab_size())?;
    let steps = table.steps();
    let mut out = ElboBreakdown::empty(steps);
    out.tokens = z0.len();
    let mut zt_all = Vec::new();
    for t in 1..=steps {
        for (z, w) in corruptions(z0, t, table, mode)? {
            if w > 0.0 {
                zt_all.push((t, z, w));
            }
        }
    }
    let inputs: Vec<(&[TokenId], usize)> = zt_all.iter().map(|(t, z, _)| (z.as_slice(), *t)).collect();
    let phats = model.predict_batch(&inputs)?;
    for ((t, z, w), phat) in zt_all.iter().zip(&phats) {
        let term = w * step_term(z0, z, *t, phat, table)?;
        if *t == 1 {
            out.recon += term;
        } else {
            out.step_kl[*t] += term;
        }
    }
    out.prior_kl = prior_kl(&vec![table.vocab_size() as TokenId; z0.len()], table)?;
    out.total = out.prior_kl + out.step_kl_sum() + out.recon;
    Ok(out)
}

/// Sums `nelbo_full` over a dataset, parallel over sequences.
pub fn nelbo_dataset<D: Denoiser + ?Sized>(
    sequences: &[TokenSequence],
    model: &D,
    table: &ScheduleTable,
    mode: NelboMode,
) -> Result<ElboBreakdown> {
    let parts: Vec<ElboBreakdown> = sequences
        .par_iter()
        .map(|s| nelbo_full(s, model, table, mode))
        .collect::<Result<_>>()?;
    let mut total = ElboBreakdown::empty(table.steps());
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Output of ancestral sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub sequence: TokenSequence,
    /// `(t, z_t)` for each requested step, in decreasing `t`.
    pub snapshots: Vec<(usize, Vec<TokenId>)>,
}

/// Steps `T, T-every, …` down to and including 0.
pub fn every_steps(steps: usize, every: usize) -> Vec<usize> {
    let every = every.max(1);
    let mut out: Vec<usize> = (0..=steps).rev().step_by(every).collect();
    if out.last() != Some(&0) {
        out.push(0);
    }
    out
}

/// `n ≥ 2` distinct steps evenly spaced from `T` down to 0 (fewer if `T+1 < n`).
pub fn evenly_spaced_steps(steps: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(2, steps + 1);
    let mut out: Vec<usize> = (0..n)
        .map(|k| ((steps as f64) * (1.0 - k as f64 / (n - 1) as f64)).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Ancestral sampling from the all-mask state at `T` down to `t = 0`.
pub fn generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    table: &ScheduleTable,
    len: usize,
    record: &[usize],
    rng: &mut R,
) -> Result<Generation> {
    check_model(model, table)?;
    let v = table.vocab_size();
    let mask = v as TokenId;
    let mut z = vec![mask; len];
    let mut snapshots = Vec::new();
    if record.contains(&table.steps()) {
        snapshots.push((table.steps(), z.clone()));
    }
    for t in (1..=table.steps()).rev() {
        if z.contains(&mask) {
            let phat = model.predict(&z, t)?;
            for i in 0..len {
                if z[i] == mask {
                    let dist = reverse_step_dist(&phat[i * v..(i + 1) * v], mask, t, table)?;
                    z[i] = sample_index(&dist, rng) as TokenId;
                }
            }
        }
        if record.contains(&(t - 1)) {
            snapshots.push((t - 1, z.clone()));
        }
    }
    if let Some(i) = z.iter().position(|&id| id == mask) {
        return Err(Error::MaskResidue(i));
    }
    Ok(Generation { sequence: TokenSequence(z), snapshots })
}

const ORACLE_MAX_LEN: usize = 3;
const ORACLE_MAX_V: usize = 5;
const ORACLE_MAX_T: usize = 4;

fn check_enumerable(len: usize, table: &ScheduleTable) -> Result<()> {
    if len > ORACLE_MAX_LEN || table.vocab_size() > ORACLE_MAX_V || table.steps() > ORACLE_MAX_T {
        return Err(Error::TooLarge(format!(
            "len {len}, V {}, T {} (limits {ORACLE_MAX_LEN}, {ORACLE_MAX_V}, {ORACLE_MAX_T})",
            table.vocab_size(),
            table.steps()
        )));
    }
    Ok(())
}

/// Product of per-position reverse distributions, `p(z_{t-1} | z_t)`.
fn reverse_prob<D: Denoiser + ?Sized>(
    model: &D,
    table: &ScheduleTable,
    zt: &[TokenId],
    prev: &[TokenId],
    t: usize,
) -> Result<f64> {
    let v = table.vocab_size();
    let phat = model.predict(zt, t)?;
    let mut p = 1.0;
    for i in 0..zt.len() {
        let dist = reverse_step_dist(&phat[i * v..(i + 1) * v], zt[i], t, table)?;
        p *= dist[prev[i] as usize];
    }
    Ok(p)
}

/// Exact NELBO in nats by summing `q · (log q − log p)` over every forward
/// trajectory. Each position's trajectory is its first masked step.
pub fn enumerate_elbo_oracle<D: Denoiser + ?Sized>(z0: &[TokenId], model: &D, table: &ScheduleTable) -> Result<f64> {
    check_enumerable(z0.len(), table)?;
    check_model(model, table)?;
    check_ids(z0, table.vocab_size())?;
    let steps = table.steps();
    let mask = table.vocab_size() as TokenId;
    let n = z0.len();
    let mut nelbo = 0.0;
    let mut tau = vec![1usize; n];
    loop {
        let q: f64 = (0..n)
            .map(|i| table.m(tau[i], z0[i]) - table.m(tau[i] - 1, z0[i]))
            .product();
        if q > 0.0 {
            let state = |t: usize| -> Vec<TokenId> {
                (0..n).map(|i| if t >= tau[i] { mask } else { z0[i] }).collect()
            };
            // p(z_T) is the all-mask point mass; every trajectory starts there
            let mut log_p = 0.0;
            for t in (1..=steps).rev() {
                log_p += reverse_prob(model, table, &state(t), &state(t - 1), t)?.ln();
            }
            nelbo += q * (q.ln() - log_p);
        }
        // odometer over mask times
        let mut i = 0;
        while i < n && tau[i] == steps {
            tau[i] = 1;
            i += 1;
        }
        if i == n {
            break;
        }
        tau[i] += 1;
    }
    Ok(nelbo)
}

/// Exact `ln p(z_0)` under the model's reverse chain, by propagating the
/// distribution over all `(V+1)^len` states from `T` down to 0.
pub fn enumerate_log_likelihood<D: Denoiser + ?Sized>(z0: &[TokenId], model: &D, table: &ScheduleTable) -> Result<f64> {
    check_enumerable(z0.len(), table)?;
    check_model(model, table)?;
    check_ids(z0, table.vocab_size())?;
    let v = table.vocab_size();
    let base = v + 1;
    let n = z0.len();
    let states = base.pow(n as u32);
    let decode = |mut s: usize| -> Vec<TokenId> {
        (0..n)
            .map(|_| {
                let d = s % base;
                s /= base;
                d as TokenId
            })
            .collect()
    };
    let mut dist = vec![0.0; states];
    dist[states - 1] = 1.0; // all digits equal to the mask id
    for t in (1..=table.steps()).rev() {
        let mut next = vec![0.0; states];
        for (s, &ps) in dist.iter().enumerate() {
            if ps == 0.0 {
                continue;
            }
            let zt = decode(s);
            let phat = model.predict(&zt, t)?;
            let per_pos: Vec<Vec<f64>> = (0..n)
                .map(|i| reverse_step_dist(&phat[i * v..(i + 1) * v], zt[i], t, table))
                .collect::<Result<_>>()?;
            for (s2, slot) in next.iter_mut().enumerate() {
                let prev = decode(s2);
                let p: f64 = (0..n).map(|i| per_pos[i][prev[i] as usize]).product();
                *slot += ps * p;
            }
        }
        dist = next;
    }
    let idx = z0.iter().rev().fold(0usize, |acc, &c| acc * base + c as usize);
    Ok(dist[idx].ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ordering::OrderingSpec;
    use crate::schedule::{build_schedule, Warp};
    use approx::assert_abs_diff_eq;

    struct Uniform(usize);

    impl Denoiser for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn predict(&self, zt: &[TokenId], _t: usize) -> Result<Vec<f64>> {
            Ok(vec![1.0 / self.0 as f64; zt.len() * self.0])
        }
    }

    /// Deterministic pseudo-random positive predictions keyed on the input.
    struct Hashed(usize, u64);

    impl Denoiser for Hashed {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn predict(&self, zt: &[TokenId], t: usize) -> Result<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(self.1, zt, t));
            let mut out = Vec::with_capacity(zt.len() * self.0);
            for _ in zt {
                let w: Vec<f64> = (0..self.0).map(|_| 0.05 + rng.gen::<f64>()).collect();
                let s: f64 = w.iter().sum();
                out.extend(w.iter().map(|x| x / s));
            }
            Ok(out)
        }
    }

    fn standard(v: usize, steps: usize) -> ScheduleTable {
        let probs = vec![1.0 / v as f64; v];
        build_schedule(&OrderingSpec::single_group(v).unwrap(), &probs, steps, &Warp::Identity).unwrap()
    }

    fn ordered(probs: &[f64], steps: usize) -> ScheduleTable {
        let v = probs.len();
        let seq: Vec<TokenId> = (0..v as TokenId).collect();
        build_schedule(&OrderingSpec::from_sequence(&seq, v).unwrap(), probs, steps, &Warp::Identity).unwrap()
    }

    #[test]
    fn forward_endpoints() {
        let table = standard(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = [0, 1, 2, 1];
        assert_eq!(forward_sample(&z0, 0, &table, &mut rng).unwrap(), z0);
        assert_eq!(forward_sample(&z0, 4, &table, &mut rng).unwrap(), vec![3; 4]);
        assert!(matches!(forward_sample(&z0, 5, &table, &mut rng), Err(Error::BadTimestep { .. })));
    }

    #[test]
    fn posterior_examples() {
        let table = standard(2, 5);
        let p = posterior_step(0, 1, &table).unwrap();
        assert_eq!((p.mask, p.reveal), (0.0, 1.0));
        for t in 1..=5 {
            assert_abs_diff_eq!(posterior_step(1, t, &table).unwrap().reveal, 1.0 / t as f64, epsilon = 1e-12);
        }
        let mut flat = table.clone();
        let v = flat.vocab_size();
        flat.masks_mut()[2 * v] = flat.masks()[3 * v];
        assert_eq!(posterior_step(0, 3, &flat).unwrap().mask, 1.0);
        flat.masks_mut()[v] = 0.0;
        assert!(matches!(posterior_step(0, 1, &flat), Err(Error::DivisionByZeroMask { .. })));
    }

    #[test]
    fn reverse_step_examples() {
        let table = ordered(&[0.5, 0.3, 0.2], 6);
        let phat = [0.2, 0.5, 0.3];
        let d = reverse_step_dist(&phat, 3, 1, &table).unwrap();
        let pp = restrict_support(&phat, 1, &table).unwrap();
        assert_eq!(d[3], 0.0);
        for c in 0..3 {
            assert_abs_diff_eq!(d[c], pp[c], epsilon = 1e-15);
        }
        assert_eq!(reverse_step_dist(&phat, 1, 4, &table).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        // one-hot on a category that stays fully masked across the step
        let t = (1..=6).find(|&t| table.m(t - 1, 0) >= 1.0).unwrap();
        let d = reverse_step_dist(&[1.0, 0.0, 0.0], 3, t, &table).unwrap();
        assert_eq!(d[3], 1.0);
    }

    #[test]
    fn reverse_matches_enumerated_sum() {
        // Σ_{x0} q(z_{t-1} | z_t, x0) p̂'(x0) with every q materialized
        let table = ordered(&[0.6, 0.4], 4);
        let phat = [0.35, 0.65];
        for t in 1..=4 {
            let d = reverse_step_dist(&phat, 2, t, &table).unwrap();
            let pp = restrict_support(&phat, t, &table).unwrap();
            let mut expect = [0.0; 3];
            for x in 0..2u32 {
                if table.m(t, x) <= 0.0 {
                    continue;
                }
                let q = posterior_step(x, t, &table).unwrap();
                expect[x as usize] += pp[x as usize] * q.reveal;
                expect[2] += pp[x as usize] * q.mask;
            }
            for k in 0..3 {
                assert_abs_diff_eq!(d[k], expect[k], epsilon = 1e-12);
            }
            assert_abs_diff_eq!(d.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_matches_literal() {
        let table = ordered(&[0.4, 0.35, 0.25], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = rng.gen_range(2..=5);
            let c = rng.gen_range(0..3u32);
            if table.m(t, c) <= 0.0 {
                continue;
            }
            let w: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() + 0.01).collect();
            let s: f64 = w.iter().sum();
            let phat: Vec<f64> = w.iter().map(|x| x / s).collect();
            let kl = kl_step(&[c], &[3], t, &phat, &table).unwrap()[0];
            let p = reverse_step_dist(&phat, 3, t, &table).unwrap();
            let post = posterior_step(c, t, &table).unwrap();
            let mut q = [0.0; 4];
            q[c as usize] = post.reveal;
            q[3] = post.mask;
            let literal: f64 = q.iter().zip(&p).filter(|(q, _)| **q > 0.0).map(|(q, p)| q * (q / p).ln()).sum();
            assert_abs_diff_eq!(kl, literal, epsilon = 1e-12);
            assert!(kl >= -1e-12);
            let mut onehot = vec![0.0; 3];
            onehot[c as usize] = 1.0;
            assert_abs_diff_eq!(kl_step(&[c], &[3], t, &onehot, &table).unwrap()[0], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn unmasked_positions_cost_nothing() {
        let table = standard(3, 3);
        let phat = [0.2, 0.3, 0.5, 0.2, 0.3, 0.5];
        assert_eq!(kl_step(&[0, 1], &[0, 1], 2, &phat, &table).unwrap(), vec![0.0, 0.0]);
        assert_eq!(recon_term(&[0, 1], &[0, 1], &phat, &table).unwrap(), 0.0);
        assert_abs_diff_eq!(
            recon_term(&[0], &[3], &[1.0 / 3.0; 3], &table).unwrap(),
            3f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn prior_requires_full_mask() {
        let table = standard(3, 3);
        assert_eq!(prior_kl(&[3, 3], &table).unwrap(), 0.0);
        assert!(matches!(prior_kl(&[3, 1], &table), Err(Error::NotFullyMasked(1))));
    }

    #[test]
    fn uniform_model_costs_log_v() {
        let table = standard(5, 6);
        let b = nelbo_full(&[0, 3, 4], &Uniform(5), &table, NelboMode::exact()).unwrap();
        assert_abs_diff_eq!(b.bits_per_token(), 5f64.log2(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.perplexity(), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn single_category_costs_nothing() {
        let table = ScheduleTable::from_masks(
            3,
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            OrderingSpec::single_group(1).unwrap(),
            vec![1.0],
        )
        .unwrap();
        let b = nelbo_full(&[0, 0], &Uniform(1), &table, NelboMode::exact()).unwrap();
        assert_abs_diff_eq!(b.total, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn full_matches_oracle_and_bounds_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 0..40 {
            let v = rng.gen_range(2..=4);
            let steps = rng.gen_range(1..=3);
            let len = rng.gen_range(1..=2);
            let w: Vec<f64> = (0..v).map(|_| rng.gen::<f64>() + 0.05).collect();
            let s: f64 = w.iter().sum();
            let probs: Vec<f64> = w.iter().map(|x| x / s).collect();
            let table = ordered(&probs, steps);
            let model = Hashed(v, k);
            let z0: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..v as TokenId)).collect();
            let full = nelbo_full(&z0, &model, &table, NelboMode::exact()).unwrap();
            let oracle = enumerate_elbo_oracle(&z0, &model, &table).unwrap();
            assert_abs_diff_eq!(full.total, oracle, epsilon = 1e-9);
            let ll = enumerate_log_likelihood(&z0, &model, &table).unwrap();
            assert!(-oracle <= ll + 1e-12, "{oracle} {ll}");
        }
    }

    #[test]
    fn two_steps_average_is_exact() {
        let table = ordered(&[0.5, 0.3, 0.2], 2);
        let model = Hashed(3, 9);
        let z0 = [2, 0];
        let full = nelbo_full(&z0, &model, &table, NelboMode::exact()).unwrap();
        let mut avg = 0.0;
        for t in 1..=2 {
            for (z, w) in corruptions(&z0, t, &table, NelboMode::exact()).unwrap() {
                let phat = model.predict(&z, t).unwrap();
                avg += 0.5 * 2.0 * w * step_term(&z0, &z, t, &phat, &table).unwrap();
            }
        }
        assert_abs_diff_eq!(avg, full.total, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_schedule_reduces_to_recon() {
        let table = standard(3, 1);
        let model = Hashed(3, 2);
        let z0 = [1, 2];
        let b = nelbo_full(&z0, &model, &table, NelboMode::exact()).unwrap();
        let phat = model.predict(&[3, 3], 1).unwrap();
        assert_abs_diff_eq!(b.total, -(phat[1].ln() + phat[5].ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(enumerate_elbo_oracle(&z0, &model, &table).unwrap(), b.total, epsilon = 1e-12);
    }

    #[test]
    fn dataset_sum_ignores_partitioning() {
        let table = ordered(&[0.5, 0.3, 0.2], 4);
        let model = Hashed(3, 4);
        let seqs: Vec<TokenSequence> = vec![vec![0, 1, 2].into(), vec![2, 2, 0].into(), vec![1, 0, 0].into()];
        let mode = NelboMode::MonteCarlo { samples: 3, seed: 7 };
        let all = nelbo_dataset(&seqs, &model, &table, mode).unwrap();
        let mut rev: Vec<_> = seqs.clone();
        rev.reverse();
        let mut parts = nelbo_dataset(&rev[..1], &model, &table, mode).unwrap();
        parts.merge(&nelbo_dataset(&rev[1..], &model, &table, mode).unwrap());
        assert_abs_diff_eq!(all.total, parts.total, epsilon = 1e-12);
        assert_eq!(all.tokens, 9);
    }

    #[test]
    fn generation_is_mask_free_and_recorded() {
        let table = ordered(&[0.5, 0.3, 0.2], 8);
        let model = Hashed(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = evenly_spaced_steps(8, 5);
        assert_eq!(rec, vec![8, 6, 4, 2, 0]);
        let g = generate(&model, &table, 6, &rec, &mut rng).unwrap();
        assert_eq!(g.snapshots.len(), 5);
        assert_eq!(g.snapshots[0].1, vec![3; 6]);
        assert_eq!(g.snapshots[4].1, g.sequence.0);
        assert!(g.sequence.iter().all(|&c| c < 3));
        assert_eq!(every_steps(5, 2), vec![5, 3, 1, 0]);
    }

    #[test]
    fn logit_grad_matches_finite_difference() {
        let table = ordered(&[0.4, 0.35, 0.25], 5);
        let logits = [0.3, -0.2, 0.5];
        for t in 1..=5 {
            for c in 0..3u32 {
                if table.m(t, c) <= 0.0 {
                    continue;
                }
                let value = |l: &[f64]| {
                    let row = table.row(t);
                    let e: Vec<f64> = l.iter().zip(row).map(|(x, &m)| if m > 0.0 { x.exp() } else { 0.0 }).collect();
                    let s: f64 = e.iter().sum();
                    let pp: Vec<f64> = e.iter().map(|x| x / s).collect();
                    masked_term_logit_grad(c, t, &pp, &table).unwrap()
                };
                let (_, g) = value(&logits);
                for j in 0..3 {
                    let mut a = logits;
                    let mut b = logits;
                    a[j] += 1e-6;
                    b[j] -= 1e-6;
                    let fd = (value(&a).0 - value(&b).0) / 2e-6;
                    assert_abs_diff_eq!(g[j], fd, epsilon = 1e-6);
                }
            }
        }
    }
}
