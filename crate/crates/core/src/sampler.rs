//! Cross-subject batch composition.
//!
//! A batch of `B` entries takes `round(θ·B)` entries from one dominant subject,
//! chosen with probability proportional to its partition size, and fills the
//! rest from the other subjects. `random` and `stratified` are the comparison
//! baselines; `ours_r` differs from `ours` only in how the non-dominant
//! remainder is drawn (subject first, then sample).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Ours,
    OursR,
    Random,
    Stratified,
}

impl FromStr for SamplingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ours" => Ok(Self::Ours),
            "ours_r" | "ours-r" => Ok(Self::OursR),
            "random" => Ok(Self::Random),
            "stratified" => Ok(Self::Stratified),
            other => Err(Error::Argument(format!("unknown sampling strategy `{other}`"))),
        }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ours => "ours",
            Self::OursR => "ours_r",
            Self::Random => "random",
            Self::Stratified => "stratified",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub subject_id: String,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub entries: Vec<BatchEntry>,
    /// For `random` and `stratified` this is the most frequent subject, ties
    /// broken by id order.
    pub dominant_subject: String,
}

impl BatchPlan {
    pub fn count_for(&self, subject_id: &str) -> usize {
        self.entries.iter().filter(|e| e.subject_id == subject_id).count()
    }
}

/// Selection probability of each subject, proportional to its sample count.
pub fn subject_probabilities(sizes: &BTreeMap<String, usize>) -> Result<BTreeMap<String, f64>> {
    check_sizes(sizes)?;
    let total: usize = sizes.values().sum();
    Ok(sizes
        .iter()
        .map(|(id, &n)| (id.clone(), n as f64 / total as f64))
        .collect())
}

fn check_sizes(sizes: &BTreeMap<String, usize>) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Argument("no subjects to sample from".into()));
    }
    if let Some((id, _)) = sizes.iter().find(|(_, &n)| n == 0) {
        return Err(Error::Argument(format!("subject `{id}` has no samples")));
    }
    Ok(())
}

/// Number of batches per epoch: `ceil(total / B)`.
pub fn epoch_batches(sizes: &BTreeMap<String, usize>, batch_size: usize) -> usize {
    let total: usize = sizes.values().sum();
    total.div_ceil(batch_size.max(1))
}

/// Entries taken from the dominant subject: `θ·B` rounded half to even.
pub fn dominant_count(batch_size: usize, theta: f64) -> usize {
    ((theta * batch_size as f64).round_ties_even() as usize).min(batch_size)
}

/// `amount` indices in `0..n`, distinct whenever `n >= amount`.
fn draw_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, amount: usize) -> Vec<usize> {
    if amount <= n {
        index::sample(rng, n, amount).into_vec()
    } else {
        (0..amount).map(|_| rng.random_range(0..n)).collect()
    }
}

fn pick_weighted<R: Rng + ?Sized>(rng: &mut R, sizes: &BTreeMap<String, usize>) -> String {
    let total: usize = sizes.values().sum();
    let mut ticket = rng.random_range(0..total);
    for (id, &n) in sizes {
        if ticket < n {
            return id.clone();
        }
        ticket -= n;
    }
    unreachable!("ticket below total")
}

/// Maps indices of the concatenation of `subjects` back to (subject, index).
fn unpool(subjects: &[(&String, usize)], mut pooled: usize) -> BatchEntry {
    for (id, n) in subjects {
        if pooled < *n {
            return BatchEntry {
                subject_id: (*id).clone(),
                sample_index: pooled,
            };
        }
        pooled -= n;
    }
    unreachable!("pooled index below pool size")
}

fn pooled_draw<R: Rng + ?Sized>(rng: &mut R, subjects: &[(&String, usize)], amount: usize) -> Vec<BatchEntry> {
    let pool: usize = subjects.iter().map(|(_, n)| n).sum();
    draw_indices(rng, pool, amount)
        .into_iter()
        .map(|i| unpool(subjects, i))
        .collect()
}

fn within<R: Rng + ?Sized>(rng: &mut R, id: &str, n: usize, amount: usize) -> Vec<BatchEntry> {
    draw_indices(rng, n, amount)
        .into_iter()
        .map(|i| BatchEntry {
            subject_id: id.to_string(),
            sample_index: i,
        })
        .collect()
}

fn most_frequent(entries: &[BatchEntry], sizes: &BTreeMap<String, usize>) -> String {
    let mut best = (0usize, String::new());
    for id in sizes.keys() {
        let c = entries.iter().filter(|e| &e.subject_id == id).count();
        if c > best.0 || best.1.is_empty() {
            best = (c, id.clone());
        }
    }
    best.1
}

pub fn compose_batch<R: Rng + ?Sized>(
    sizes: &BTreeMap<String, usize>,
    batch_size: usize,
    theta: f64,
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Result<BatchPlan> {
    check_sizes(sizes)?;
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Argument(format!("theta {theta} outside [0, 1]")));
    }

    if sizes.len() == 1 {
        let (id, &n) = sizes.iter().next().expect("one subject");
        return Ok(BatchPlan {
            entries: within(rng, id, n, batch_size),
            dominant_subject: id.clone(),
        });
    }

    match strategy {
        SamplingStrategy::Ours | SamplingStrategy::OursR => {
            let dominant = pick_weighted(rng, sizes);
            let take = dominant_count(batch_size, theta);
            let mut entries: Vec<BatchEntry> = within(rng, &dominant, sizes[&dominant], take);
            let others: Vec<(&String, usize)> = sizes
                .iter()
                .filter(|(id, _)| **id != dominant)
                .map(|(id, &n)| (id, n))
                .collect();
            let rest = batch_size - take;
            if strategy == SamplingStrategy::Ours {
                entries.extend(pooled_draw(rng, &others, rest));
            } else {
                for _ in 0..rest {
                    let (id, n) = others[rng.random_range(0..others.len())];
                    entries.push(BatchEntry {
                        subject_id: id.clone(),
                        sample_index: rng.random_range(0..n),
                    });
                }
            }
            Ok(BatchPlan {
                entries,
                dominant_subject: dominant,
            })
        }
        SamplingStrategy::Random => {
            let all: Vec<(&String, usize)> = sizes.iter().map(|(id, &n)| (id, n)).collect();
            let entries = pooled_draw(rng, &all, batch_size);
            let dominant_subject = most_frequent(&entries, sizes);
            Ok(BatchPlan {
                entries,
                dominant_subject,
            })
        }
        SamplingStrategy::Stratified => {
            let k = sizes.len();
            let base = batch_size / k;
            let extra = batch_size % k;
            let offset = rng.random_range(0..k);
            let mut entries = Vec::with_capacity(batch_size);
            for (i, (id, &n)) in sizes.iter().enumerate() {
                let gets_extra = (i + k - offset) % k < extra;
                entries.extend(within(rng, id, n, base + usize::from(gets_extra)));
            }
            let dominant_subject = most_frequent(&entries, sizes);
            Ok(BatchPlan {
                entries,
                dominant_subject,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    /// Mean over plans of the share of entries from the dominant subject.
    pub dominant_fraction_mean: f64,
    /// Share of plans in which each subject was dominant.
    pub dominant_frequency: BTreeMap<String, f64>,
    /// Share of all entries contributed by each subject.
    pub sample_frequency: BTreeMap<String, f64>,
    pub plans: usize,
    pub entries: usize,
}

pub fn batch_statistics(plans: &[BatchPlan]) -> Result<SamplerStats> {
    if plans.is_empty() {
        return Err(Error::Argument("no plans to summarize".into()));
    }
    let mut dominant: BTreeMap<String, usize> = BTreeMap::new();
    let mut samples: BTreeMap<String, usize> = BTreeMap::new();
    let mut fraction_sum = 0.0;
    let mut total = 0usize;
    for plan in plans {
        *dominant.entry(plan.dominant_subject.clone()).or_default() += 1;
        for e in &plan.entries {
            *samples.entry(e.subject_id.clone()).or_default() += 1;
        }
        total += plan.entries.len();
        if !plan.entries.is_empty() {
            fraction_sum += plan.count_for(&plan.dominant_subject) as f64 / plan.entries.len() as f64;
        }
    }
    for id in samples.keys() {
        dominant.entry(id.clone()).or_default();
    }
    let n = plans.len() as f64;
    Ok(SamplerStats {
        dominant_fraction_mean: fraction_sum / n,
        dominant_frequency: dominant.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
        sample_frequency: samples
            .into_iter()
            .map(|(k, c)| (k, c as f64 / total.max(1) as f64))
            .collect(),
        plans: plans.len(),
        entries: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::new_rng;
    use proptest::prelude::*;

    fn equal(k: usize, n: usize) -> BTreeMap<String, usize> {
        (0..k).map(|i| (format!("S{}", i + 1), n)).collect()
    }

    #[test]
    fn probabilities_are_proportional() {
        let p = subject_probabilities(&equal(4, 24_980)).unwrap();
        assert!(p.values().all(|&v| v == 0.25));
        let sizes: BTreeMap<String, usize> = [("A".to_string(), 100), ("B".to_string(), 300)].into();
        let p = subject_probabilities(&sizes).unwrap();
        assert_eq!(p["A"], 0.25);
        assert_eq!(p["B"], 0.75);
        assert_eq!(subject_probabilities(&equal(1, 5)).unwrap()["S1"], 1.0);
    }

    #[test]
    fn probability_errors() {
        assert!(subject_probabilities(&BTreeMap::new()).is_err());
        let sizes: BTreeMap<String, usize> = [("A".to_string(), 0)].into();
        assert!(subject_probabilities(&sizes).is_err());
    }

    #[test]
    fn half_batch_from_dominant_subject() {
        let mut rng = new_rng(0);
        let plan = compose_batch(&equal(4, 24_980), 256, 0.5, SamplingStrategy::Ours, &mut rng).unwrap();
        assert_eq!(plan.entries.len(), 256);
        assert_eq!(plan.count_for(&plan.dominant_subject), 128);
    }

    #[test]
    fn full_theta_uses_one_subject() {
        let mut rng = new_rng(1);
        for strategy in [SamplingStrategy::Ours, SamplingStrategy::OursR] {
            let plan = compose_batch(&equal(4, 1000), 256, 1.0, strategy, &mut rng).unwrap();
            assert_eq!(plan.count_for(&plan.dominant_subject), 256);
        }
    }

    #[test]
    fn single_subject_degenerate_case() {
        let mut rng = new_rng(2);
        for strategy in [
            SamplingStrategy::Ours,
            SamplingStrategy::OursR,
            SamplingStrategy::Random,
            SamplingStrategy::Stratified,
        ] {
            for theta in [0.0, 0.3, 1.0] {
                let plan = compose_batch(&equal(1, 10), 32, theta, strategy, &mut rng).unwrap();
                assert_eq!(plan.count_for("S1"), 32);
                assert!(plan.entries.iter().all(|e| e.sample_index < 10));
            }
        }
    }

    #[test]
    fn compose_errors() {
        let mut rng = new_rng(3);
        assert!(compose_batch(&equal(2, 5), 0, 0.5, SamplingStrategy::Ours, &mut rng).is_err());
        assert!(compose_batch(&equal(2, 5), 4, 1.5, SamplingStrategy::Ours, &mut rng).is_err());
        assert!("weighted".parse::<SamplingStrategy>().is_err());
        assert_eq!("ours-r".parse::<SamplingStrategy>().unwrap(), SamplingStrategy::OursR);
    }

    #[test]
    fn rounding_is_half_to_even() {
        assert_eq!(dominant_count(5, 0.5), 2);
        assert_eq!(dominant_count(7, 0.5), 4);
        assert_eq!(dominant_count(16, 0.44), 7);
        assert_eq!(dominant_count(256, 0.5), 128);
    }

    #[test]
    fn stratified_is_exactly_balanced() {
        let mut rng = new_rng(4);
        let plans: Vec<_> = (0..100)
            .map(|_| compose_batch(&equal(4, 500), 256, 0.5, SamplingStrategy::Stratified, &mut rng).unwrap())
            .collect();
        for p in &plans {
            for id in ["S1", "S2", "S3", "S4"] {
                assert_eq!(p.count_for(id), 64);
            }
        }
    }

    #[test]
    fn stratified_remainder_rotates() {
        let mut rng = new_rng(5);
        let mut extra = BTreeMap::<String, usize>::new();
        for _ in 0..4000 {
            let p = compose_batch(&equal(3, 50), 10, 0.5, SamplingStrategy::Stratified, &mut rng).unwrap();
            for id in ["S1", "S2", "S3"] {
                if p.count_for(id) == 4 {
                    *extra.entry(id.into()).or_default() += 1;
                }
            }
        }
        for &c in extra.values() {
            assert!((c as f64 / 4000.0 - 1.0 / 3.0).abs() < 0.03);
        }
    }

    #[test]
    fn dominant_frequency_matches_probabilities() {
        let mut rng = new_rng(6);
        let plans: Vec<_> = (0..10_000)
            .map(|_| compose_batch(&equal(4, 300), 64, 0.5, SamplingStrategy::Ours, &mut rng).unwrap())
            .collect();
        let stats = batch_statistics(&plans).unwrap();
        for &f in stats.dominant_frequency.values() {
            assert!((f - 0.25).abs() < 0.01, "{f}");
        }
        assert_eq!(stats.dominant_fraction_mean, 0.5);
    }

    #[test]
    fn random_sample_frequency_is_uniform() {
        let mut rng = new_rng(7);
        let plans: Vec<_> = (0..4000)
            .map(|_| compose_batch(&equal(4, 100), 256, 0.5, SamplingStrategy::Random, &mut rng).unwrap())
            .collect();
        let stats = batch_statistics(&plans).unwrap();
        assert!(stats.entries >= 1_000_000);
        for &f in stats.sample_frequency.values() {
            assert!((f - 0.25).abs() < 0.005, "{f}");
        }
    }

    #[test]
    fn random_and_stratified_share_marginals() {
        let mut rng = new_rng(8);
        let draw = |strategy, rng: &mut _| -> SamplerStats {
            let plans: Vec<_> = (0..2000)
                .map(|_| compose_batch(&equal(4, 200), 64, 0.5, strategy, rng).unwrap())
                .collect();
            batch_statistics(&plans).unwrap()
        };
        let r = draw(SamplingStrategy::Random, &mut rng);
        let s = draw(SamplingStrategy::Stratified, &mut rng);
        for (a, b) in r.sample_frequency.values().zip(s.sample_frequency.values()) {
            assert!((a - b).abs() < 0.01);
        }
    }

    #[test]
    fn ours_r_remainder_is_subject_first() {
        // With unequal non-dominant partitions, subject-first sampling spreads
        // the remainder evenly across subjects while pooled sampling follows
        // partition sizes.
        let sizes: BTreeMap<String, usize> = [
            ("A".to_string(), 10_000),
            ("B".to_string(), 100),
            ("C".to_string(), 900),
        ]
        .into();
        let mut rng = new_rng(9);
        let (mut b_r, mut b_p) = (0usize, 0usize);
        for _ in 0..3000 {
            let r = compose_batch(&sizes, 40, 0.5, SamplingStrategy::OursR, &mut rng).unwrap();
            let p = compose_batch(&sizes, 40, 0.5, SamplingStrategy::Ours, &mut rng).unwrap();
            if r.dominant_subject == "A" {
                b_r += r.count_for("B");
            }
            if p.dominant_subject == "A" {
                b_p += p.count_for("B");
            }
        }
        assert!(b_r > 3 * b_p);
    }

    #[test]
    fn epoch_length() {
        assert_eq!(epoch_batches(&equal(4, 24_980), 256), 391);
        assert_eq!(epoch_batches(&equal(2, 64), 64), 2);
    }

    proptest! {
        #[test]
        fn plans_are_well_formed(
            sizes in prop::collection::vec(1usize..40, 1..6),
            batch in 1usize..80,
            theta in 0.0f64..=1.0,
            strategy in prop_oneof![Just(SamplingStrategy::Ours), Just(SamplingStrategy::OursR), Just(SamplingStrategy::Random), Just(SamplingStrategy::Stratified)],
            seed in any::<u64>(),
        ) {
            let sizes: BTreeMap<String, usize> = sizes.into_iter().enumerate().map(|(i, n)| (format!("s{i}"), n)).collect();
            let mut rng = new_rng(seed);
            let plan = compose_batch(&sizes, batch, theta, strategy, &mut rng).unwrap();
            prop_assert_eq!(plan.entries.len(), batch);
            for e in &plan.entries {
                prop_assert!(e.sample_index < sizes[&e.subject_id]);
            }
            if sizes.len() > 1 && matches!(strategy, SamplingStrategy::Ours | SamplingStrategy::OursR) {
                let take = dominant_count(batch, theta);
                prop_assert_eq!(plan.count_for(&plan.dominant_subject), take);
                let dom: Vec<_> = plan.entries.iter().filter(|e| e.subject_id == plan.dominant_subject).map(|e| e.sample_index).collect();
                if sizes[&plan.dominant_subject] >= take {
                    let mut uniq = dom.clone();
                    uniq.sort_unstable();
                    uniq.dedup();
                    prop_assert_eq!(uniq.len(), dom.len());
                }
            }
        }
    }
}
