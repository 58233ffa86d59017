//! Text dumps of corruption and generation paths, one `t=<step> <payload>`
//! line per snapshot.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenId, Vocab};
use crate::diffusion::{evenly_spaced_steps, forward_trajectory, generate, Denoiser};
use crate::error::{Error, Result};
use crate::schedule::ScheduleTable;

#[derive(Debug, Clone, PartialEq)]
pub struct DumpLine {
    pub t: usize,
    /// Token ids with the mask as `V`.
    pub ids: Vec<TokenId>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dump {
    pub lines: Vec<DumpLine>,
}

impl fmt::Display for Dump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "t={} {}", l.t, l.text)?;
        }
        Ok(())
    }
}

fn check_vocab(vocab: &Vocab, table: &ScheduleTable) -> Result<()> {
    if vocab.size() != table.vocab_size() {
        return Err(Error::IncompatibleSchedule(format!(
            "vocabulary has {} categories, schedule has {}",
            vocab.size(),
            table.vocab_size()
        )));
    }
    Ok(())
}

/// Corrupts `sample` along one monotone path; lines run from `t=0` up to `t=T`.
pub fn visualize_forward(
    vocab: &Vocab,
    sample: &[TokenId],
    table: &ScheduleTable,
    snapshots: usize,
    seed: u64,
) -> Result<Dump> {
    check_vocab(vocab, table)?;
    let mut steps = evenly_spaced_steps(table.steps(), snapshots);
    steps.reverse();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = forward_trajectory(sample, table, &steps, &mut rng)?;
    let lines = steps
        .into_iter()
        .zip(path)
        .map(|(t, ids)| DumpLine { t, text: vocab.render(&ids), ids })
        .collect();
    Ok(Dump { lines })
}

/// Samples one sequence from the model; lines run from `t=T` down to `t=0`.
pub fn visualize_reverse<D: Denoiser + ?Sized>(
    model: &D,
    vocab: &Vocab,
    table: &ScheduleTable,
    len: usize,
    snapshots: usize,
    seed: u64,
) -> Result<Dump> {
    check_vocab(vocab, table)?;
    let steps = evenly_spaced_steps(table.steps(), snapshots);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = generate(model, table, len, &steps, &mut rng)?;
    let lines = g
        .snapshots
        .into_iter()
        .map(|(t, ids)| DumpLine { t, text: vocab.render(&ids), ids })
        .collect();
    Ok(Dump { lines })
}

/// Splits a dump back into `(t, payload)` pairs.
pub fn parse_dump(text: &str) -> Result<Vec<(usize, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let rest = line
                .strip_prefix("t=")
                .ok_or_else(|| Error::Parse(format!("line {}: missing `t=` prefix", i + 1)))?;
            let (t, payload) = rest.split_once(' ').unwrap_or((rest, ""));
            let t = t.parse().map_err(|_| Error::Parse(format!("line {}: bad step {t:?}", i + 1)))?;
            Ok((t, payload.to_string()))
        })
        .collect()
}

/// Categories in the order their first occurrence in `sample` is masked
/// along the forward dump (ties keep id order).
pub fn first_masked(dump: &Dump, sample: &[TokenId], mask: TokenId) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = Vec::new();
    for line in &dump.lines {
        let mut now: Vec<TokenId> = sample
            .iter()
            .zip(&line.ids)
            .filter(|&(&c, &z)| z == mask && c != mask && !out.contains(&c))
            .map(|(&c, _)| c)
            .collect();
        now.sort_unstable();
        now.dedup();
        out.extend(now);
    }
    out
}
