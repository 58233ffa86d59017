//! Exact posterior `p(z_0 | z_t)` for the toy grammar.
//!
//! Anchors form an i.i.d. uniform chain over `{a, b}`; each fill is a
//! deterministic function of its two neighbouring anchors. Observing `z_t`
//! multiplies in `m_t(c)` for a masked position and `1 - m_t(c)` for a
//! revealed one, so the posterior is a forward-backward pass over anchors.
//!
//! Ancestral sampling under schedules that reveal fills before anchors can
//! produce `z_t` no grammatical sequence explains. Those inputs are scored
//! with a mismatch likelihood of `MISMATCH` instead of 0, which selects the
//! anchor assignments with the fewest conflicts.

use crate::corpus::toy::{self, A, B};
use crate::corpus::TokenId;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::ScheduleTable;

const V: usize = toy::TOKENS.len();
const MASK: TokenId = V as TokenId;
const ANCHORS: [TokenId; 2] = [A, B];
const MISMATCH: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyOracle {
    steps: usize,
    masks: Vec<f64>,
}

impl ToyOracle {
    pub fn new(table: &ScheduleTable) -> Result<Self> {
        if table.vocab_size() != V {
            return Err(Error::NonToyInput(format!("schedule has V={}, toy data has {V}", table.vocab_size())));
        }
        Ok(Self { steps: table.steps(), masks: table.masks().to_vec() })
    }

    /// `None` when the observation has zero likelihood under the grammar.
    fn posterior(&self, zt: &[TokenId], row: &[f64], mismatch: f64) -> Option<Vec<f64>> {
        let evidence = |z: TokenId, c: TokenId| {
            let m = row[c as usize];
            if z == MASK {
                m
            } else if z == c {
                1.0 - m
            } else {
                mismatch
            }
        };
        let n = zt.len() / 2 + 1;
        let anchor_ev: Vec<[f64; 2]> = (0..n).map(|j| ANCHORS.map(|s| 0.5 * evidence(zt[2 * j], s))).collect();
        // fill_ev[j][s][s'] between anchors j and j+1
        let fill_ev: Vec<[[f64; 2]; 2]> = (0..n - 1)
            .map(|j| ANCHORS.map(|l| ANCHORS.map(|r| evidence(zt[2 * j + 1], toy::fill(l, r).expect("anchors")))))
            .collect();

        let mut alpha = vec![[0.0; 2]; n];
        alpha[0] = anchor_ev[0];
        normalize(&mut alpha[0])?;
        for j in 1..n {
            for s in 0..2 {
                alpha[j][s] = (0..2).map(|p| alpha[j - 1][p] * fill_ev[j - 1][p][s]).sum::<f64>() * anchor_ev[j][s];
            }
            normalize(&mut alpha[j])?;
        }
        let mut beta = vec![[1.0; 2]; n];
        for j in (0..n - 1).rev() {
            for s in 0..2 {
                beta[j][s] = (0..2).map(|r| fill_ev[j][s][r] * anchor_ev[j + 1][r] * beta[j + 1][r]).sum();
            }
            normalize(&mut beta[j])?;
        }

        let mut out = vec![0.0; zt.len() * V];
        for j in 0..n {
            let mut post = [alpha[j][0] * beta[j][0], alpha[j][1] * beta[j][1]];
            normalize(&mut post)?;
            for (s, &a) in ANCHORS.iter().enumerate() {
                out[2 * j * V + a as usize] = post[s];
            }
        }
        for j in 0..n - 1 {
            let base = (2 * j + 1) * V;
            let mut total = 0.0;
            for (l, &al) in ANCHORS.iter().enumerate() {
                for (r, &ar) in ANCHORS.iter().enumerate() {
                    let w = alpha[j][l] * fill_ev[j][l][r] * anchor_ev[j + 1][r] * beta[j + 1][r];
                    out[base + toy::fill(al, ar).expect("anchors") as usize] += w;
                    total += w;
                }
            }
            if !(total > 0.0) {
                return None;
            }
            for x in &mut out[base..base + V] {
                *x /= total;
            }
        }
        Some(out)
    }
}

fn normalize(x: &mut [f64; 2]) -> Option<()> {
    let s = x[0] + x[1];
    if !(s > 0.0) {
        return None;
    }
    x[0] /= s;
    x[1] /= s;
    Some(())
}

impl Denoiser for ToyOracle {
    fn vocab_size(&self) -> usize {
        V
    }

    fn predict(&self, zt: &[TokenId], t: usize) -> Result<Vec<f64>> {
        if t > self.steps {
            return Err(Error::BadTimestep { t, min: 0, max: self.steps });
        }
        if zt.len().is_multiple_of(2) {
            return Err(Error::NonToyInput(format!("length {} is even", zt.len())));
        }
        if let Some(&id) = zt.iter().find(|&&id| id > MASK) {
            return Err(Error::UnknownId { id, vocab: V + 1 });
        }
        let row = &self.masks[t * V..(t + 1) * V];
        self.posterior(zt, row, 0.0)
            .or_else(|| self.posterior(zt, row, MISMATCH))
            .ok_or_else(|| Error::NonToyInput("observation has zero likelihood under the toy grammar".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy::{C, D, E};
    use crate::diffusion::{generate, nelbo_full, NelboMode};
    use crate::ordering::OrderingSpec;
    use crate::schedule::{build_schedule, Warp};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn standard(steps: usize) -> ScheduleTable {
        build_schedule(&OrderingSpec::single_group(V).unwrap(), &toy::MARGINAL, steps, &Warp::Identity).unwrap()
    }

    fn two_phase() -> ScheduleTable {
        let order = OrderingSpec::from_groups(&[vec![C, D, E, toy::F], vec![A, B]], V).unwrap();
        build_schedule(&order, &toy::MARGINAL, 2, &Warp::skew(2, &[(0, 2.0)]).unwrap()).unwrap()
    }

    /// Posterior by enumerating every anchor assignment.
    fn brute(zt: &[TokenId], row: &[f64]) -> Vec<f64> {
        let n = zt.len() / 2 + 1;
        let mut out = vec![0.0; zt.len() * V];
        let mut total = 0.0;
        for bits in 0..1u32 << n {
            let anchors: Vec<TokenId> = (0..n).map(|j| if bits >> j & 1 == 1 { B } else { A }).collect();
            let z0 = toy::from_anchors(&anchors).unwrap();
            let w: f64 = z0
                .iter()
                .zip(zt)
                .map(|(&c, &z)| {
                    let m = row[c as usize];
                    if z == MASK {
                        m
                    } else if z == c {
                        1.0 - m
                    } else {
                        0.0
                    }
                })
                .product();
            total += w;
            for (i, &c) in z0.iter().enumerate() {
                out[i * V + c as usize] += w;
            }
        }
        out.iter().map(|x| x / total).collect()
    }

    #[test]
    fn matches_brute_force() {
        let table = standard(8);
        let oracle = ToyOracle::new(&table).unwrap();
        let z0 = toy::from_anchors(&[A, B, B, A, A]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 1..=8 {
            for _ in 0..10 {
                let zt = crate::diffusion::forward_sample(&z0, t, &table, &mut rng).unwrap();
                let got = oracle.predict(&zt, t).unwrap();
                let want = brute(&zt, table.row(t));
                for (a, b) in got.iter().zip(&want) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn documented_cases() {
        let table = standard(4);
        let oracle = ToyOracle::new(&table).unwrap();
        let p = oracle.predict(&[A, MASK, B], 2).unwrap();
        assert_eq!(&p[V..2 * V], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let p = oracle.predict(&[MASK; 3], 4).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);
        let p = oracle.predict(&[MASK; 3], 2).unwrap();
        for (c, want) in [(C, 0.5), (D, 0.25), (E, 0.25)] {
            assert_abs_diff_eq!(p[V + c as usize], want, epsilon = 1e-12);
        }
        assert!(matches!(oracle.predict(&[A, MASK], 1), Err(Error::NonToyInput(_))));
        // `e` cannot sit between two `a`s; the anchors are kept and the fill corrected
        let p = oracle.predict(&[A, E, A, MASK, MASK], 1).unwrap();
        assert_abs_diff_eq!(p[A as usize], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p[V + C as usize], 1.0, epsilon = 1e-9);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn two_phase_schedule_reaches_entropy() {
        let table = two_phase();
        assert_eq!(table.row(1), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let oracle = ToyOracle::new(&table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = toy::generate(31, &mut rng).unwrap();
        let b = nelbo_full(&z0, &oracle, &table, NelboMode::exact()).unwrap();
        assert_abs_diff_eq!(b.bits_per_token(), toy::entropy_bits_per_token(31), epsilon = 1e-12);
        for _ in 0..50 {
            let g = generate(&oracle, &table, 31, &[], &mut rng).unwrap();
            assert_eq!(toy::violations(&g.sequence), 0);
        }
    }
}
