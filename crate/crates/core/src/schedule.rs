//! Mutual-information mask schedules under sequential destruction.
//!
//! A schedule assigns every category `c` a mask probability `m_t(c)` at each
//! of the `T + 1` snapshot times. The fraction of marginal information
//! destroyed by a mask state,
//!
//! ```text
//!     r(m) = Σ_c p_c m_c ln(p_c m_c / P_M) / Σ_c p_c ln p_c,    P_M = Σ_c p_c m_c
//!          = 1 − I(z0; zt) / H(z0),
//! ```
//!
//! is made to grow linearly in `t` (optionally through a warp), while only
//! one destruction group is partially masked at any time: all earlier groups
//! are fully masked and all later groups untouched.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ByteCursor, TokenId};
use crate::error::{Error, Result};
use crate::ordering::OrderingSpec;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_BISECTION_ITERS: usize = 200;

/// Per-group mask probabilities in sequential form: groups `< full` are
/// fully masked, group `full` (if any) holds `partial`, later groups are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskState {
    groups: usize,
    full: usize,
    partial: f64,
}

impl MaskState {
    pub fn new(groups: usize, full: usize, partial: f64) -> Result<Self> {
        if full > groups || !(0.0..=1.0).contains(&partial) || (full == groups && partial != 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "state (full={full}, partial={partial}) not sequential over {groups} groups"
            )));
        }
        Ok(Self { groups, full, partial })
    }

    pub fn zero(groups: usize) -> Self {
        Self { groups, full: 0, partial: 0.0 }
    }

    pub fn one(groups: usize) -> Self {
        Self { groups, full: groups, partial: 0.0 }
    }

    pub fn group_count(&self) -> usize {
        self.groups
    }

    pub fn full_groups(&self) -> usize {
        self.full
    }

    pub fn partial(&self) -> f64 {
        self.partial
    }

    pub fn value(&self, group: usize) -> f64 {
        match group.cmp(&self.full) {
            std::cmp::Ordering::Less => 1.0,
            std::cmp::Ordering::Equal => self.partial,
            std::cmp::Ordering::Greater => 0.0,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.groups).map(|g| self.value(g)).collect()
    }

    /// Group values broadcast to categories.
    pub fn category_masks(&self, order: &OrderingSpec) -> Vec<f64> {
        order.assignments().iter().map(|&g| self.value(g)).collect()
    }
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyVocab);
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidProbs("negative or non-finite entry".into()));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidProbs(format!("sums to {s}")));
    }
    Ok(())
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Fraction of marginal information destroyed by per-category masks `m`.
pub fn info_ratio(masks: &[f64], probs: &[f64]) -> Result<f64> {
    if masks.len() != probs.len() {
        return Err(Error::LengthMismatch(format!("{} masks for {} categories", masks.len(), probs.len())));
    }
    let denom: f64 = probs.iter().map(|&p| xlogx(p)).sum();
    if denom == 0.0 {
        return Err(Error::DegenerateEntropy);
    }
    let p_mask: f64 = probs.iter().zip(masks).map(|(p, m)| p * m).sum();
    if p_mask <= 0.0 {
        return Ok(0.0);
    }
    let num: f64 = probs
        .iter()
        .zip(masks)
        .map(|(&p, &m)| {
            let pm = p * m;
            if pm > 0.0 {
                pm * (pm / p_mask).ln()
            } else {
                0.0
            }
        })
        .sum();
    Ok(num / denom)
}

/// [`info_ratio`] for a sequential group state.
pub fn state_ratio(state: &MaskState, order: &OrderingSpec, probs: &[f64]) -> Result<f64> {
    info_ratio(&state.category_masks(order), probs)
}

/// Prefix sums that make the ratio of any sequential state O(1).
#[derive(Debug, Clone)]
pub struct InfoProfile {
    // Σ p ln p over all categories (negative)
    denom: f64,
    // per group: mass q_g and Σ_{c∈g} p ln p
    mass: Vec<f64>,
    plogp: Vec<f64>,
    // cumulative over groups before g
    cum_mass: Vec<f64>,
    cum_plogp: Vec<f64>,
    boundaries: Vec<f64>,
}

impl InfoProfile {
    pub fn new(order: &OrderingSpec, probs: &[f64]) -> Result<Self> {
        check_probs(probs)?;
        if order.vocab_size() != probs.len() {
            return Err(Error::LengthMismatch(format!(
                "ordering covers {} categories, probs has {}",
                order.vocab_size(),
                probs.len()
            )));
        }
        let g = order.group_count();
        let mut mass = vec![0.0; g];
        let mut plogp = vec![0.0; g];
        for (c, &grp) in order.assignments().iter().enumerate() {
            mass[grp] += probs[c];
            plogp[grp] += xlogx(probs[c]);
        }
        let denom: f64 = plogp.iter().sum();
        if denom == 0.0 {
            return Err(Error::DegenerateEntropy);
        }
        let mut cum_mass = vec![0.0; g + 1];
        let mut cum_plogp = vec![0.0; g + 1];
        for k in 0..g {
            cum_mass[k + 1] = cum_mass[k] + mass[k];
            cum_plogp[k + 1] = cum_plogp[k] + plogp[k];
        }
        let mut profile = Self { denom, mass, plogp, cum_mass, cum_plogp, boundaries: Vec::new() };
        let mut boundaries: Vec<f64> = (0..=g).map(|k| profile.ratio(k, 0.0)).collect();
        boundaries[0] = 0.0;
        boundaries[g] = 1.0;
        for k in 0..g {
            if boundaries[k + 1] < boundaries[k] - 1e-12 {
                return Err(Error::NonMonotonic {
                    group: k,
                    next: k + 1,
                    from: boundaries[k],
                    to: boundaries[k + 1],
                });
            }
        }
        profile.boundaries = boundaries;
        Ok(profile)
    }

    pub fn group_count(&self) -> usize {
        self.mass.len()
    }

    /// Ratio with groups `< full` masked and group `full` masked with probability `x`.
    pub fn ratio(&self, full: usize, x: f64) -> f64 {
        let (q, b) = if full < self.mass.len() { (self.mass[full], self.plogp[full]) } else { (0.0, 0.0) };
        let p_mask = self.cum_mass[full] + x * q;
        if p_mask <= 0.0 {
            return 0.0;
        }
        // Σ_c p m ln(p m) over masked mass, minus P_M ln P_M
        let partial = if x > 0.0 { x * b + q * xlogx(x) } else { 0.0 };
        (self.cum_plogp[full] + partial - xlogx(p_mask)) / self.denom
    }

    /// `r_k` for `k = 0..=G`: ratio with exactly the first `k` groups masked.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Sequential state whose ratio is `r`. Flat segments resolve to the
    /// farthest state with that ratio; `r <= 0` pins the all-zero state.
    pub fn solve(&self, r: f64, tol: f64) -> Result<MaskState> {
        let g = self.group_count();
        if !(r.is_finite()) || !(-tol..=1.0 + tol).contains(&r) {
            return Err(Error::InvalidSchedule(format!("target ratio {r} outside [0, 1]")));
        }
        if r <= 0.0 {
            return Ok(MaskState::zero(g));
        }
        let k = self
            .boundaries
            .iter()
            .rposition(|&b| b <= r + tol)
            .expect("r_0 = 0 <= r");
        if k == g {
            return Ok(MaskState::one(g));
        }
        if (r - self.boundaries[k]).abs() <= tol {
            return MaskState::new(g, k, 0.0);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut mid = 0.5;
        // bisect to machine precision in x; a ratio-space stop would leave
        // m off by tol divided by the local slope
        for _ in 0..MAX_BISECTION_ITERS {
            mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let f = self.ratio(k, mid);
            if f == r {
                break;
            }
            if f < r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        MaskState::new(g, k, mid)
    }
}

/// `r_k` for `k = 0..=G`.
pub fn boundary_ratios(order: &OrderingSpec, probs: &[f64]) -> Result<Vec<f64>> {
    Ok(InfoProfile::new(order, probs)?.boundaries.clone())
}

pub fn solve_state_at(r: f64, order: &OrderingSpec, probs: &[f64], tol: f64) -> Result<MaskState> {
    InfoProfile::new(order, probs)?.solve(r, tol)
}

/// Monotone map from normalized time `t/T` to the target information ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Warp {
    Identity,
    /// Time spent destroying group `g` is proportional to `weights[g]` times
    /// its share of information; weight 1 everywhere is the identity.
    GroupWeights { weights: Vec<f64> },
    /// Piecewise-linear through `(u, r)` knots from `(0, 0)` to `(1, 1)`.
    Knots { knots: Vec<(f64, f64)> },
}

impl Warp {
    /// Group weights with the given overrides, default 1.
    pub fn skew(groups: usize, overrides: &[(usize, f64)]) -> Result<Self> {
        let mut weights = vec![1.0; groups];
        for &(g, w) in overrides {
            if g >= groups || !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidSchedule(format!("bad skew weight {g}={w}")));
            }
            weights[g] = w;
        }
        Ok(Warp::GroupWeights { weights })
    }

    fn knots(&self, boundaries: &[f64]) -> Result<Vec<(f64, f64)>> {
        let knots = match self {
            Warp::Identity => vec![(0.0, 0.0), (1.0, 1.0)],
            Warp::GroupWeights { weights } => {
                if weights.len() + 1 != boundaries.len() {
                    return Err(Error::InvalidSchedule(format!(
                        "{} skew weights for {} groups",
                        weights.len(),
                        boundaries.len() - 1
                    )));
                }
                if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return Err(Error::InvalidSchedule("skew weights must be positive".into()));
                }
                let spans: Vec<f64> = weights
                    .iter()
                    .zip(boundaries.windows(2))
                    .map(|(w, b)| w * (b[1] - b[0]))
                    .collect();
                let total: f64 = spans.iter().sum();
                let mut u = 0.0;
                let mut out = vec![(0.0, 0.0)];
                for (k, s) in spans.iter().enumerate() {
                    u += s / total;
                    out.push((u, boundaries[k + 1]));
                }
                let last = out.len() - 1;
                out[last] = (1.0, 1.0);
                out
            }
            Warp::Knots { knots } => knots.clone(),
        };
        let ok = knots.first() == Some(&(0.0, 0.0))
            && knots.last() == Some(&(1.0, 1.0))
            && knots.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        if !ok {
            return Err(Error::InvalidSchedule("warp must be nondecreasing from (0,0) to (1,1)".into()));
        }
        Ok(knots)
    }

    pub fn describe(&self) -> String {
        match self {
            Warp::Identity => "identity".into(),
            Warp::GroupWeights { weights } => {
                let parts: Vec<String> = weights
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 1.0)
                    .map(|(g, w)| format!("{g}={w}"))
                    .collect();
                if parts.is_empty() {
                    "identity".into()
                } else {
                    format!("group-weights({})", parts.join(","))
                }
            }
            Warp::Knots { knots } => format!("knots({knots:?})"),
        }
    }
}

fn eval_knots(knots: &[(f64, f64)], u: f64) -> f64 {
    // last knot at or before u, so coincident knots resolve to the farthest ratio
    let j = knots.iter().rposition(|k| k.0 <= u).unwrap_or(0);
    if j + 1 >= knots.len() {
        return knots[j].1;
    }
    let (u0, r0) = knots[j];
    let (u1, r1) = knots[j + 1];
    if u1 <= u0 {
        return r1;
    }
    r0 + (r1 - r0) * ((u - u0) / (u1 - u0))
}

/// Per-timestep, per-category mask probabilities on a `(T+1) × V` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    steps: usize,
    vocab_size: usize,
    masks: Vec<f64>,
    order: OrderingSpec,
    probs: Vec<f64>,
}

impl ScheduleTable {
    pub fn from_masks(steps: usize, masks: Vec<f64>, order: OrderingSpec, probs: Vec<f64>) -> Result<Self> {
        let v = order.vocab_size();
        if masks.len() != (steps + 1) * v || probs.len() != v {
            return Err(Error::ShapeMismatch(format!(
                "{} mask entries for T={steps}, V={v}",
                masks.len()
            )));
        }
        Ok(Self { steps, vocab_size: v, masks, order, probs })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> &OrderingSpec {
        &self.order
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn m(&self, t: usize, category: TokenId) -> f64 {
        self.masks[t * self.vocab_size + category as usize]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.masks[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    pub fn masks(&self) -> &[f64] {
        &self.masks
    }

    pub fn masks_mut(&mut self) -> &mut [f64] {
        &mut self.masks
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::with_capacity(16 + self.masks.len() * 8);
        buf.extend_from_slice(SCHEDULE_MAGIC);
        buf.extend_from_slice(&SCHEDULE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.steps as u32).to_le_bytes());
        buf.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        for m in &self.masks {
            buf.extend_from_slice(&m.to_le_bytes());
        }
        w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    /// Reads a table written by [`ScheduleTable::write`]; the ordering and
    /// marginal are not stored in the binary file and must be supplied.
    pub fn read(path: impl AsRef<Path>, order: OrderingSpec, probs: Vec<f64>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(4)? != SCHEDULE_MAGIC {
            return Err(Error::CorruptFile(format!("{}: bad magic", path.display())));
        }
        let version = cur.u32()?;
        if version != SCHEDULE_VERSION {
            return Err(Error::VersionMismatch(format!("schedule version {version}")));
        }
        let steps = cur.u32()? as usize;
        let v = cur.u32()? as usize;
        if v != order.vocab_size() {
            return Err(Error::IncompatibleSchedule(format!(
                "table has V={v}, ordering has {}",
                order.vocab_size()
            )));
        }
        let masks = (0..(steps + 1) * v).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        if !cur.is_empty() {
            return Err(Error::CorruptFile(format!("{}: trailing bytes", path.display())));
        }
        Self::from_masks(steps, masks, order, probs)
    }
}

const SCHEDULE_MAGIC: &[u8; 4] = b"ODSC";
const SCHEDULE_VERSION: u32 = 1;

/// JSON sidecar written next to a binary schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSidecar {
    pub order_file: String,
    pub vocab_file: String,
    pub probs_sha256: String,
    pub steps: usize,
    pub warp: Warp,
    pub warp_description: String,
}

/// Hex SHA-256 of the little-endian bytes of a probability vector.
pub fn probs_digest(probs: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in probs {
        h.update(p.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Snapshots of the sequential process at `warp(t/T)` for `t = 0..=T`.
pub fn build_schedule(order: &OrderingSpec, probs: &[f64], steps: usize, warp: &Warp) -> Result<ScheduleTable> {
    if steps < 1 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    let profile = InfoProfile::new(order, probs)?;
    let knots = warp.knots(profile.boundaries())?;
    let g = order.group_count();
    let states: Vec<MaskState> = (0..=steps)
        .into_par_iter()
        .map(|t| {
            if t == 0 {
                Ok(MaskState::zero(g))
            } else if t == steps {
                Ok(MaskState::one(g))
            } else {
                let u = t as f64 / steps as f64;
                profile.solve(eval_knots(&knots, u).clamp(0.0, 1.0), DEFAULT_TOL)
            }
        })
        .collect::<Result<_>>()?;
    let v = probs.len();
    let mut masks = Vec::with_capacity((steps + 1) * v);
    for (t, state) in states.iter().enumerate() {
        for (c, &p) in probs.iter().enumerate() {
            // dead categories carry no information and are absorbed immediately
            let m = if t > 0 && p <= 0.0 { 1.0 } else { state.value(order.group_of(c as TokenId)) };
            masks.push(m);
        }
    }
    ScheduleTable::from_masks(steps, masks, order.clone(), probs.to_vec())
}

/// A broken schedule invariant, located by timestep and category or group.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    FirstRowNotZero { category: TokenId },
    LastRowNotOne { category: TokenId },
    OutOfRange { t: usize, category: TokenId },
    Decreasing { t: usize, category: TokenId },
    DeadNotAbsorbed { t: usize, category: TokenId },
    GroupInconsistent { t: usize, group: usize },
    NotSequential { t: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::FirstRowNotZero { category } => write!(f, "row 0 nonzero for category {category}"),
            Violation::LastRowNotOne { category } => write!(f, "row T not one for category {category}"),
            Violation::OutOfRange { t, category } => write!(f, "m outside [0,1] at t={t}, category {category}"),
            Violation::Decreasing { t, category } => write!(f, "column decreases at t={t}, category {category}"),
            Violation::DeadNotAbsorbed { t, category } => {
                write!(f, "zero-probability category {category} not masked at t={t}")
            }
            Violation::GroupInconsistent { t, group } => write!(f, "group {group} members disagree at t={t}"),
            Violation::NotSequential { t } => write!(f, "row {t} is not in sequential form"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub violations: Vec<Violation>,
    /// Realized information ratio of every row.
    pub ratios: Vec<f64>,
    /// `ratios[t] - ratios[t-1]` for `t = 1..=T`.
    pub ratio_deltas: Vec<f64>,
}

impl Diagnostics {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every table invariant; never fails, reports instead.
pub fn validate_schedule(table: &ScheduleTable) -> Diagnostics {
    let mut violations = Vec::new();
    let steps = table.steps();
    let probs = table.probs();
    let order = table.order();
    for c in 0..table.vocab_size() as TokenId {
        let live = probs[c as usize] > 0.0;
        if table.m(0, c) != 0.0 {
            violations.push(Violation::FirstRowNotZero { category: c });
        }
        if table.m(steps, c) != 1.0 {
            violations.push(Violation::LastRowNotOne { category: c });
        }
        for t in 0..=steps {
            let m = table.m(t, c);
            if !(0.0..=1.0).contains(&m) {
                violations.push(Violation::OutOfRange { t, category: c });
            }
            if t > 0 && m < table.m(t - 1, c) {
                violations.push(Violation::Decreasing { t, category: c });
            }
            if t > 0 && !live && m != 1.0 {
                violations.push(Violation::DeadNotAbsorbed { t, category: c });
            }
        }
    }
    let groups = order.groups();
    for t in 0..=steps {
        let mut values = Vec::with_capacity(groups.len());
        for (g, members) in groups.iter().enumerate() {
            let live: Vec<f64> = members
                .iter()
                .filter(|&&c| probs[c as usize] > 0.0)
                .map(|&c| table.m(t, c))
                .collect();
            if live.windows(2).any(|w| w[0] != w[1]) {
                violations.push(Violation::GroupInconsistent { t, group: g });
            }
            if let Some(&v) = live.first() {
                values.push(v);
            }
        }
        let first_partial = values.iter().position(|&v| v < 1.0).unwrap_or(values.len());
        if values.iter().skip(first_partial + 1).any(|&v| v != 0.0) {
            violations.push(Violation::NotSequential { t });
        }
    }
    let ratios: Vec<f64> = (0..=steps)
        .map(|t| info_ratio(table.row(t), probs).unwrap_or(f64::NAN))
        .collect();
    let ratio_deltas = ratios.windows(2).map(|w| w[1] - w[0]).collect();
    Diagnostics { violations, ratios, ratio_deltas }
}
