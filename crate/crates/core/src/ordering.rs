//! Ordered partitions of the vocabulary into destruction groups.
//!
//! Everything in this module speaks *destruction* order: group 0 is masked
//! first by the forward process and therefore generated last. Strategy names
//! at the user-facing level are phrased in generation order; see
//! [`Strategy::destroy_first`].

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Assignment of every real category to a destruction group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingSpec {
    group_of: Vec<usize>,
    groups: usize,
}

impl OrderingSpec {
    /// Groups listed in destruction order. Every category in `0..vocab_size`
    /// must appear exactly once and no group may be empty.
    pub fn from_groups(groups: &[Vec<TokenId>], vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::EmptyVocab);
        }
        let mut group_of = vec![usize::MAX; vocab_size];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidOrdering(format!("group {g} is empty")));
            }
            for &c in members {
                let slot = group_of
                    .get_mut(c as usize)
                    .ok_or(Error::UnknownId { id: c, vocab: vocab_size })?;
                if *slot != usize::MAX {
                    return Err(Error::InvalidOrdering(format!("category {c} assigned twice")));
                }
                *slot = g;
            }
        }
        if let Some(c) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(Error::InvalidOrdering(format!("category {c} is not assigned")));
        }
        Ok(Self { group_of, groups: groups.len() })
    }

    /// Singleton groups, destroyed in the given order.
    pub fn from_sequence(order: &[TokenId], vocab_size: usize) -> Result<Self> {
        let groups: Vec<Vec<TokenId>> = order.iter().map(|&c| vec![c]).collect();
        Self::from_groups(&groups, vocab_size)
    }

    /// A single group: the standard absorbing process.
    pub fn single_group(vocab_size: usize) -> Result<Self> {
        Self::from_groups(&[(0..vocab_size as TokenId).collect()], vocab_size)
    }

    pub fn vocab_size(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups
    }

    pub fn group_of(&self, category: TokenId) -> usize {
        self.group_of[category as usize]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.group_of
    }

    /// Members of each group in ascending id order, groups in destruction order.
    pub fn groups(&self) -> Vec<Vec<TokenId>> {
        let mut out = vec![Vec::new(); self.groups];
        for (c, &g) in self.group_of.iter().enumerate() {
            out[g].push(c as TokenId);
        }
        out
    }

    /// Categories flattened in destruction order.
    pub fn destruction_sequence(&self) -> Vec<TokenId> {
        self.groups().into_iter().flatten().collect()
    }

    /// Total probability mass of each group.
    pub fn group_probs(&self, probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.groups];
        for (c, &g) in self.group_of.iter().enumerate() {
            out[g] += probs[c];
        }
        out
    }

    /// Same partition with categories relabelled: category `c` becomes `perm[c]`.
    pub fn relabel(&self, perm: &[TokenId]) -> Result<Self> {
        let mut group_of = vec![0; self.group_of.len()];
        for (c, &g) in self.group_of.iter().enumerate() {
            group_of[perm[c] as usize] = g;
        }
        Ok(Self { group_of, groups: self.groups })
    }

    /// `G=<n>` header followed by `token_id<TAB>group` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("G={}\n", self.groups);
        for (c, g) in self.group_of.iter().enumerate() {
            s.push_str(&format!("{c}\t{g}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty ordering file".into()))?;
        let groups: usize = header
            .trim()
            .strip_prefix("G=")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad ordering header {header:?}")))?;
        let mut pairs = Vec::new();
        for line in lines {
            let (c, g) = line
                .split_once('\t')
                .and_then(|(c, g)| Some((c.trim().parse::<usize>().ok()?, g.trim().parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Parse(format!("bad ordering line {line:?}")))?;
            pairs.push((c, g));
        }
        let vocab_size = pairs.len();
        let mut members = vec![Vec::new(); groups];
        for (c, g) in pairs {
            if g >= groups {
                return Err(Error::InvalidOrdering(format!("group {g} out of range (G={groups})")));
            }
            members[g].push(c as TokenId);
        }
        Self::from_groups(&members, vocab_size)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Which end of the frequency ranking the forward process masks first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DestroyFirst {
    Common,
    Rare,
}

/// Which end of the information-gain ranking the forward process masks first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgDestroyFirst {
    High,
    Low,
}

/// Zero-probability categories first (ascending id), then the rest sorted by
/// `key` with ties broken by ascending id.
fn ranked(probs: &[f64], descending: bool, key: impl Fn(usize) -> f64) -> Vec<TokenId> {
    let (mut dead, mut live): (Vec<usize>, Vec<usize>) = (0..probs.len()).partition(|&c| probs[c] <= 0.0);
    dead.sort_unstable();
    live.sort_by(|&a, &b| {
        let ord = key(a).total_cmp(&key(b));
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    dead.into_iter().chain(live).map(|c| c as TokenId).collect()
}

/// Singleton groups sorted by marginal probability.
pub fn order_frequency(probs: &[f64], first: DestroyFirst) -> Result<OrderingSpec> {
    if probs.is_empty() {
        return Err(Error::EmptyVocab);
    }
    let seq = ranked(probs, first == DestroyFirst::Common, |c| probs[c]);
    OrderingSpec::from_sequence(&seq, probs.len())
}

/// A uniformly random permutation of singleton groups.
pub fn order_random(vocab_size: usize, seed: u64) -> Result<OrderingSpec> {
    let mut seq: Vec<TokenId> = (0..vocab_size as TokenId).collect();
    seq.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    OrderingSpec::from_sequence(&seq, vocab_size)
}

/// Expected information gain per category, from pooled window statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct IgReport {
    /// Expected information gain in nats.
    pub scores: Vec<f64>,
    pub window_len: usize,
    /// Fraction of windows containing at least one occurrence.
    pub presence: Vec<f64>,
}

/// Additive window statistics; shards can be accumulated separately and merged.
#[derive(Debug, Clone)]
pub struct IgAccumulator {
    vocab_size: usize,
    window_len: usize,
    windows: u64,
    total: Vec<u64>,
    present_windows: Vec<u64>,
    // row a: token counts pooled over windows that contain a
    present_counts: Vec<u64>,
}

impl IgAccumulator {
    pub fn new(vocab_size: usize, window_len: usize) -> Self {
        Self {
            vocab_size,
            window_len,
            windows: 0,
            total: vec![0; vocab_size],
            present_windows: vec![0; vocab_size],
            present_counts: vec![0; vocab_size * vocab_size],
        }
    }

    pub fn add(&mut self, window: &[TokenId]) -> Result<()> {
        if window.len() != self.window_len {
            return Err(Error::WindowLengthMismatch { expected: self.window_len, got: window.len() });
        }
        let v = self.vocab_size;
        let mut distinct: Vec<usize> = Vec::with_capacity(window.len());
        for &id in window {
            let c = id as usize;
            if c >= v {
                return Err(Error::UnknownId { id, vocab: v });
            }
            if !distinct.contains(&c) {
                distinct.push(c);
            }
        }
        self.windows += 1;
        for &id in window {
            self.total[id as usize] += 1;
        }
        for &a in &distinct {
            self.present_windows[a] += 1;
            let row = &mut self.present_counts[a * v..(a + 1) * v];
            for &id in window {
                row[id as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IgAccumulator) -> Result<()> {
        if other.vocab_size != self.vocab_size || other.window_len != self.window_len {
            return Err(Error::WindowLengthMismatch { expected: self.window_len, got: other.window_len });
        }
        self.windows += other.windows;
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
        for (a, b) in self.present_windows.iter_mut().zip(&other.present_windows) {
            *a += b;
        }
        for (a, b) in self.present_counts.iter_mut().zip(&other.present_counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<IgReport> {
        if self.windows == 0 {
            return Err(Error::NoWindows);
        }
        let v = self.vocab_size;
        let h_all = entropy_of_counts(self.total.iter().copied());
        let mut scores = Vec::with_capacity(v);
        let mut presence = Vec::with_capacity(v);
        for a in 0..v {
            let p1 = self.present_windows[a] as f64 / self.windows as f64;
            let row = &self.present_counts[a * v..(a + 1) * v];
            let mut score = 0.0;
            if self.present_windows[a] > 0 {
                score += p1 * (h_all - entropy_of_counts(row.iter().copied()));
            }
            if self.present_windows[a] < self.windows {
                let absent = self.total.iter().zip(row).map(|(t, r)| t - r);
                score += (1.0 - p1) * (h_all - entropy_of_counts(absent));
            }
            scores.push(score);
            presence.push(p1);
        }
        Ok(IgReport { scores, window_len: self.window_len, presence })
    }
}

fn entropy_of_counts(counts: impl Iterator<Item = u64> + Clone) -> f64 {
    let n: u64 = counts.clone().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Expected information gain of observing whether each category is present
/// in a window, measured on the pooled within-window token distribution.
pub fn information_gain<'a, I>(windows: I, vocab_size: usize, window_len: usize) -> Result<IgReport>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    let mut acc = IgAccumulator::new(vocab_size, window_len);
    for w in windows {
        acc.add(w)?;
    }
    acc.finish()
}

/// Singleton groups sorted by information gain. Categories never observed
/// go first.
pub fn order_information_gain(report: &IgReport, first: IgDestroyFirst) -> Result<OrderingSpec> {
    if report.scores.is_empty() {
        return Err(Error::EmptyVocab);
    }
    let seq = ranked(&report.presence, first == IgDestroyFirst::High, |c| report.scores[c]);
    OrderingSpec::from_sequence(&seq, report.scores.len())
}

/// Partitions categories, sorted by probability, into `blocks` contiguous
/// groups of roughly equal `p^alpha` mass. Zero-probability categories join
/// the earliest destroyed group.
pub fn make_blocks(probs: &[f64], blocks: usize, alpha: f64, first: DestroyFirst) -> Result<OrderingSpec> {
    if probs.is_empty() {
        return Err(Error::EmptyVocab);
    }
    if blocks == 0 || !(alpha > 0.0) {
        return Err(Error::InvalidOrdering(format!("blocks={blocks}, alpha={alpha}")));
    }
    let mut live: Vec<usize> = (0..probs.len()).filter(|&c| probs[c] > 0.0).collect();
    if blocks > live.len() {
        return Err(Error::BTooLarge { blocks, nonzero: live.len() });
    }
    live.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let weights: Vec<f64> = live.iter().map(|&c| probs[c].powf(alpha)).collect();
    let total: f64 = weights.iter().sum();

    // block index per category, most common first
    let n = live.len();
    let mut block_of_rank = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut prev = 0usize;
    for (i, w) in weights.iter().enumerate() {
        let b = if i == 0 {
            0
        } else {
            let target = (((cum / total) * blocks as f64) + 1e-9).floor() as usize;
            let mut b = target.clamp(prev, prev + 1).min(blocks - 1);
            if n - i <= blocks - 1 - prev {
                b = prev + 1;
            }
            b
        };
        block_of_rank.push(b);
        prev = b;
        cum += w;
    }

    let mut groups = vec![Vec::new(); blocks];
    for (rank, &c) in live.iter().enumerate() {
        let b = block_of_rank[rank];
        let g = match first {
            DestroyFirst::Common => b,
            DestroyFirst::Rare => blocks - 1 - b,
        };
        groups[g].push(c as TokenId);
    }
    groups[0].extend((0..probs.len()).filter(|&c| probs[c] <= 0.0).map(|c| c as TokenId));
    OrderingSpec::from_groups(&groups, probs.len())
}

/// User-facing ordering strategies, named by *generation* order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// One group: standard absorbing diffusion.
    Standard,
    /// Frequent categories generated first, i.e. destroyed last.
    CommonFirst,
    RareFirst,
    Random,
    /// High information-gain categories generated first.
    InfoGain,
    InfoGainLow,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Standard,
        Strategy::CommonFirst,
        Strategy::RareFirst,
        Strategy::Random,
        Strategy::InfoGain,
        Strategy::InfoGainLow,
    ];

    /// The destruction direction implied by a frequency strategy.
    pub fn destroy_first(self) -> Option<DestroyFirst> {
        match self {
            Strategy::CommonFirst => Some(DestroyFirst::Rare),
            Strategy::RareFirst => Some(DestroyFirst::Common),
            _ => None,
        }
    }

    pub fn ig_destroy_first(self) -> Option<IgDestroyFirst> {
        match self {
            Strategy::InfoGain => Some(IgDestroyFirst::Low),
            Strategy::InfoGainLow => Some(IgDestroyFirst::High),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::CommonFirst => "common-first",
            Strategy::RareFirst => "rare-first",
            Strategy::Random => "random",
            Strategy::InfoGain => "info-gain",
            Strategy::InfoGainLow => "info-gain-low",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown strategy {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};
    use proptest::strategy::Strategy as PropStrategy;

    fn seq(spec: &OrderingSpec) -> Vec<TokenId> {
        spec.destruction_sequence()
    }

    #[test]
    fn frequency_orders() {
        let probs = [0.5, 0.3, 0.2];
        let cfg = order_frequency(&probs, Strategy::CommonFirst.destroy_first().unwrap()).unwrap();
        assert_eq!(seq(&cfg), vec![2, 1, 0]);
        let rfg = order_frequency(&probs, Strategy::RareFirst.destroy_first().unwrap()).unwrap();
        assert_eq!(seq(&rfg), vec![0, 1, 2]);
        assert_eq!(cfg.group_count(), 3);
        assert!(matches!(order_frequency(&[], DestroyFirst::Rare), Err(Error::EmptyVocab)));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let probs = [0.25, 0.25, 0.25, 0.125, 0.125, 0.0];
        let rare = order_frequency(&probs, DestroyFirst::Rare).unwrap();
        assert_eq!(seq(&rare), vec![5, 3, 4, 0, 1, 2]);
        let common = order_frequency(&probs, DestroyFirst::Common).unwrap();
        // the dead category still goes first
        assert_eq!(seq(&common), vec![5, 0, 1, 2, 3, 4]);
    }

    #[test]
    fn random_order_is_seeded() {
        assert_eq!(seq(&order_random(1, 7).unwrap()), vec![0]);
        assert_eq!(order_random(10, 42).unwrap(), order_random(10, 42).unwrap());
        assert_ne!(order_random(10, 42).unwrap(), order_random(10, 43).unwrap());
    }

    #[test]
    fn random_order_is_uniform_over_permutations() {
        let mut counts = std::collections::HashMap::new();
        let n = 100_000u64;
        for seed in 0..n {
            *counts.entry(seq(&order_random(3, seed).unwrap())).or_insert(0u64) += 1;
        }
        assert_eq!(counts.len(), 6);
        // chi-square with 5 dof; 0.999 quantile is 20.5
        let expected = n as f64 / 6.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 20.5, "chi2 = {chi2}");
    }

    #[test]
    fn ig_alternating_is_zero() {
        let ids: Vec<TokenId> = (0..100).map(|i| i % 2).collect();
        let r = information_gain(crate::corpus::windows(&ids, 2, 1), 2, 2).unwrap();
        assert_eq!(r.presence, vec![1.0, 1.0]);
        for s in &r.scores {
            assert_abs_diff_eq!(*s, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ig_pure_windows_is_log_two() {
        let ws: Vec<Vec<TokenId>> = (0..50).flat_map(|_| [vec![0, 0], vec![1, 1]]).collect();
        let r = information_gain(ws.iter().map(|w| w.as_slice()), 2, 2).unwrap();
        for s in &r.scores {
            assert_abs_diff_eq!(*s, std::f64::consts::LN_2, epsilon = 1e-12);
        }
    }

    #[test]
    fn ig_errors() {
        assert!(matches!(information_gain(std::iter::empty(), 3, 2), Err(Error::NoWindows)));
        let w: &[TokenId] = &[0, 1, 2];
        assert!(matches!(
            information_gain([w], 3, 2),
            Err(Error::WindowLengthMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn ig_ordering_directions() {
        let r = IgReport { scores: vec![0.1, 0.9], window_len: 2, presence: vec![0.5, 0.5] };
        assert_eq!(seq(&order_information_gain(&r, IgDestroyFirst::High).unwrap()), vec![1, 0]);
        assert_eq!(seq(&order_information_gain(&r, IgDestroyFirst::Low).unwrap()), vec![0, 1]);
        let z = IgReport { scores: vec![0.0; 3], window_len: 2, presence: vec![1.0; 3] };
        assert_eq!(seq(&order_information_gain(&z, IgDestroyFirst::High).unwrap()), vec![0, 1, 2]);
    }

    /// Pooled entropies recomputed by filtering windows, independent of the accumulator.
    fn ig_brute_force(ws: &[&[TokenId]], v: usize) -> Vec<f64> {
        let pooled = |sel: &dyn Fn(&[TokenId]) -> bool| {
            let mut counts = vec![0u64; v];
            for w in ws.iter().filter(|w| sel(w)) {
                for &id in w.iter() {
                    counts[id as usize] += 1;
                }
            }
            entropy_of_counts(counts.into_iter())
        };
        let h = pooled(&|_| true);
        (0..v as TokenId)
            .map(|a| {
                let n1 = ws.iter().filter(|w| w.contains(&a)).count() as f64;
                let p1 = n1 / ws.len() as f64;
                let hp = if n1 > 0.0 { pooled(&|w| w.contains(&a)) } else { h };
                let ha = if p1 < 1.0 { pooled(&|w| !w.contains(&a)) } else { h };
                p1 * (h - hp) + (1.0 - p1) * (h - ha)
            })
            .collect()
    }

    #[test]
    fn ig_on_toy_windows() {
        use crate::corpus::toy;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<_> = (0..5_000).map(|_| toy::generate(21, &mut rng).unwrap()).collect();
        let ws: Vec<&[TokenId]> = seqs.iter().flat_map(|s| crate::corpus::windows(s, 3, 1)).collect();
        let r = information_gain(ws.iter().copied(), 6, 3).unwrap();
        let oracle = ig_brute_force(&ws, 6);
        for (a, b) in r.scores.iter().zip(&oracle) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        assert_eq!(r.presence[toy::F as usize], 0.0);
        assert_eq!(r.scores[toy::F as usize], 0.0);
        assert!(r.scores.iter().all(|s| *s >= -1e-12));
        // `e` pins both neighbours to `b`, so it carries the most information
        let best = (0..6).max_by(|&i, &j| r.scores[i].total_cmp(&r.scores[j])).unwrap();
        assert_eq!(best, toy::E as usize, "{:?}", r.scores);
    }

    #[test]
    fn blocks_basic() {
        let one = make_blocks(&[0.4, 0.3, 0.2, 0.1], 1, 1.0, DestroyFirst::Common).unwrap();
        assert_eq!(one.group_count(), 1);
        let two = make_blocks(&[0.25; 4], 2, 1.0, DestroyFirst::Common).unwrap();
        assert_eq!(two.groups(), vec![vec![0, 1], vec![2, 3]]);
        assert!(matches!(
            make_blocks(&[0.5, 0.5, 0.0], 3, 1.0, DestroyFirst::Common),
            Err(Error::BTooLarge { blocks: 3, nonzero: 2 })
        ));
        // dominant category cannot starve later blocks
        let skewed = make_blocks(&[0.9, 0.05, 0.03, 0.02], 3, 1.0, DestroyFirst::Common).unwrap();
        assert!(skewed.groups().iter().all(|g| !g.is_empty()));
    }

    #[test]
    fn alpha_moves_block_boundaries() {
        let probs: Vec<f64> = crate::corpus::normalize(&(1..=40).map(|i| 1.0 / i as f64).collect::<Vec<_>>()).unwrap();
        let low = make_blocks(&probs, 4, 0.9, DestroyFirst::Common).unwrap();
        let high = make_blocks(&probs, 4, 1.1, DestroyFirst::Common).unwrap();
        // a larger exponent concentrates weight on frequent words, shrinking the first block
        assert!(high.groups()[0].len() <= low.groups()[0].len());
        assert!(high.groups()[3].len() >= low.groups()[3].len());
    }

    #[test]
    fn ordering_file_round_trip() {
        let spec = make_blocks(&[0.4, 0.3, 0.2, 0.1, 0.0], 2, 1.0, DestroyFirst::Rare).unwrap();
        let text = spec.to_text();
        assert!(text.starts_with("G=2\n"));
        assert_eq!(OrderingSpec::parse(&text).unwrap(), spec);
        assert!(OrderingSpec::parse("G=1\n0\t3\n").is_err());
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
        assert_eq!(Strategy::InfoGain.ig_destroy_first(), Some(IgDestroyFirst::Low));
    }

    fn distinct_probs() -> impl PropStrategy<Value = Vec<f64>> {
        proptest::collection::vec(1u32..1_000_000, 1..30).prop_filter_map("distinct", |w| {
            let mut s = w.clone();
            s.sort_unstable();
            s.dedup();
            (s.len() == w.len()).then(|| crate::corpus::normalize(&w.iter().map(|&x| x as f64).collect::<Vec<_>>()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn common_is_reverse_of_rare(probs in distinct_probs()) {
            let mut c = seq(&order_frequency(&probs, DestroyFirst::Common).unwrap());
            let r = seq(&order_frequency(&probs, DestroyFirst::Rare).unwrap());
            c.reverse();
            prop_assert_eq!(c, r);
        }

        #[test]
        fn blocks_of_size_one_match_frequency(probs in distinct_probs()) {
            let b = make_blocks(&probs, probs.len(), 1.0, DestroyFirst::Rare).unwrap();
            prop_assert_eq!(b, order_frequency(&probs, DestroyFirst::Rare).unwrap());
        }

        #[test]
        fn blocks_partition(probs in distinct_probs(), b in 1usize..8, alpha in 0.5f64..1.5) {
            prop_assume!(b <= probs.len());
            let spec = make_blocks(&probs, b, alpha, DestroyFirst::Common).unwrap();
            let mut all = spec.destruction_sequence();
            all.sort_unstable();
            prop_assert_eq!(all, (0..probs.len() as TokenId).collect::<Vec<_>>());
            prop_assert!(spec.groups().iter().all(|g| !g.is_empty()));
        }

        #[test]
        fn ig_invariant_to_order_and_duplication(ids in proptest::collection::vec(0u32..4, 12..60)) {
            let ws: Vec<&[TokenId]> = crate::corpus::windows(&ids, 4, 1).collect();
            let base = information_gain(ws.iter().copied(), 4, 4).unwrap();
            let rev = information_gain(ws.iter().rev().copied(), 4, 4).unwrap();
            let dup = information_gain(ws.iter().chain(ws.iter()).copied(), 4, 4).unwrap();
            for i in 0..4 {
                prop_assert!((base.scores[i] - rev.scores[i]).abs() < 1e-12);
                prop_assert!((base.scores[i] - dup.scores[i]).abs() < 1e-12);
                prop_assert!(base.scores[i] >= -1e-12);
            }
        }
    }
}
