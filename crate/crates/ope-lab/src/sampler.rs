//! Reproducible i.i.d. offline datasets.
//!
//! Record `i` of a dataset is drawn from its own counter-derived random
//! stream `(seed, i)`, so sampling is order-independent and parallelizes
//! without changing the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::OpeError;
use crate::features::StateDistribution;
use crate::mdp::FiniteMdp;
use crate::Result;

/// One logged interaction `(s, a, r, s_next)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// A batch of i.i.d. samples with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub records: Vec<SampleRecord>,
    pub seed: u64,
    /// Digest of the generating MDP and sampling distribution.
    pub instance_hash: String,
}

impl OfflineDataset {
    pub fn n(&self) -> usize {
        self.records.len()
    }
}

/// Short content digest of `(mdp, mu)`, recorded in dataset metadata so a
/// dataset can be matched to the instance that produced it.
pub fn instance_digest(mdp: &FiniteMdp, mu: &StateDistribution) -> String {
    let mut hasher = Sha256::new();
    hasher.update(mdp.gamma.to_bits().to_le_bytes());
    hasher.update((mdp.n_states() as u64).to_le_bytes());
    for acts in &mdp.actions {
        hasher.update((acts.len() as u64).to_le_bytes());
        for model in acts {
            for &p in &model.transition {
                hasher.update(p.to_bits().to_le_bytes());
            }
            for &(v, p) in &model.reward.support {
                hasher.update(v.to_bits().to_le_bytes());
                hasher.update(p.to_bits().to_le_bytes());
            }
        }
    }
    for acts in &mu.weight {
        for &w in acts {
            hasher.update(w.to_bits().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Cumulative tables for fast inverse-cdf sampling of `(s, a)` pairs and of
/// transition rows.
struct FastSampler<'a> {
    mdp: &'a FiniteMdp,
    pairs: Vec<(usize, usize)>,
    mu_cum: Vec<f64>,
    row_cum: Vec<Vec<Vec<f64>>>,
}

impl<'a> FastSampler<'a> {
    fn new(mdp: &'a FiniteMdp, mu: &StateDistribution) -> Self {
        let mut pairs = Vec::new();
        let mut mu_cum = Vec::new();
        let mut acc = 0.0;
        for (s, acts) in mu.weight.iter().enumerate() {
            for (a, &w) in acts.iter().enumerate() {
                acc += w;
                pairs.push((s, a));
                mu_cum.push(acc);
            }
        }
        let row_cum = mdp
            .actions
            .iter()
            .map(|acts| {
                acts.iter()
                    .map(|model| {
                        let mut acc = 0.0;
                        model
                            .transition
                            .iter()
                            .map(|&p| {
                                acc += p;
                                acc
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        FastSampler {
            mdp,
            pairs,
            mu_cum,
            row_cum,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SampleRecord {
        let u: f64 = rand::Rng::random(rng);
        let k = self
            .mu_cum
            .partition_point(|&c| c <= u)
            .min(self.pairs.len() - 1);
        let (state, action) = self.pairs[k];
        let reward = self.mdp.actions[state][action].reward.sample(rng);
        let row = &self.row_cum[state][action];
        let u2: f64 = rand::Rng::random(rng);
        let next_state = row.partition_point(|&c| c <= u2).min(row.len() - 1);
        SampleRecord {
            state,
            action,
            reward,
            next_state,
        }
    }
}

/// Draws `n` records i.i.d.: `(s, a) ~ mu`, then `(r, s_next)` from the MDP.
/// Identical `(mdp, mu, n, seed)` produce bit-identical datasets.
pub fn sample_dataset(
    mdp: &FiniteMdp,
    mu: &StateDistribution,
    n: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if mu.weight.len() != mdp.n_states() {
        return Err(OpeError::DimensionMismatch {
            expected: mdp.n_states(),
            actual: mu.weight.len(),
        });
    }
    let sampler = FastSampler::new(mdp, mu);
    let records: Vec<SampleRecord> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sampler.draw(&mut rng)
        })
        .collect();
    Ok(OfflineDataset {
        records,
        seed,
        instance_hash: instance_digest(mdp, mu),
    })
}

/// Relative frequency of each `(s, a)` pair in the dataset.
pub fn empirical_mu(ds: &OfflineDataset, mdp: &FiniteMdp) -> Result<StateDistribution> {
    if ds.records.is_empty() {
        return Err(OpeError::EmptyDataset);
    }
    let mut counts: Vec<Vec<f64>> = mdp
        .actions
        .iter()
        .map(|acts| vec![0.0; acts.len()])
        .collect();
    for rec in &ds.records {
        if rec.state >= counts.len() || rec.action >= counts[rec.state].len() {
            return Err(OpeError::IndexOutOfRange(format!(
                "record ({}, {}) outside MDP layout",
                rec.state, rec.action
            )));
        }
        counts[rec.state][rec.action] += 1.0;
    }
    let n = ds.n() as f64;
    for row in &mut counts {
        for c in row.iter_mut() {
            *c /= n;
        }
    }
    StateDistribution::new(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hard_instance::{build, HardInstanceSpec};
    use crate::mdp::{ActionModel, Policy, RewardDist};

    fn hard_bundle(q: f64) -> crate::hard_instance::HardInstanceBundle {
        let spec = HardInstanceSpec::from_counts(0.9, 2, 2, q, 0.1, false).unwrap();
        build(&spec).unwrap()
    }

    #[test]
    fn empty_dataset() {
        let b = hard_bundle(1.0);
        let ds = sample_dataset(&b.mdp, &b.mu, 0, 1).unwrap();
        assert_eq!(ds.n(), 0);
        assert!(empirical_mu(&ds, &b.mdp).is_err());
    }

    #[test]
    fn determinism_same_seed() {
        let b = hard_bundle(1.0);
        let d1 = sample_dataset(&b.mdp, &b.mu, 500, 42).unwrap();
        let d2 = sample_dataset(&b.mdp, &b.mu, 500, 42).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn adjacent_seeds_differ() {
        let b = hard_bundle(1.0);
        let d1 = sample_dataset(&b.mdp, &b.mu, 500, 7).unwrap();
        let d2 = sample_dataset(&b.mdp, &b.mu, 500, 8).unwrap();
        assert_ne!(d1.records, d2.records);
    }

    #[test]
    fn prefix_stability_under_growth() {
        // Counter-based streams: growing the dataset keeps earlier records.
        let b = hard_bundle(1.0);
        let d1 = sample_dataset(&b.mdp, &b.mu, 100, 9).unwrap();
        let d2 = sample_dataset(&b.mdp, &b.mu, 200, 9).unwrap();
        assert_eq!(d1.records[..], d2.records[..100]);
    }

    #[test]
    fn deterministic_rewards_pass_through() {
        let mdp = crate::mdp::FiniteMdp {
            gamma: 0.5,
            actions: vec![vec![ActionModel {
                transition: vec![1.0],
                reward: RewardDist::point(0.25),
            }]],
        };
        let mu = StateDistribution::new(vec![vec![1.0]]).unwrap();
        let ds = sample_dataset(&mdp, &mu, 50, 3).unwrap();
        assert!(ds
            .records
            .iter()
            .all(|r| r.reward == 0.25 && r.next_state == 0));
    }

    #[test]
    fn level0_fraction_concentrates() {
        let b = hard_bundle(1.0); // p = 1
        let n = 100_000;
        let ds = sample_dataset(&b.mdp, &b.mu, n, 11).unwrap();
        let level0: usize = ds
            .records
            .iter()
            .filter(|r| {
                let label = b.labels[r.state];
                label.group == crate::hard_instance::Group::B && label.level == 0
            })
            .count();
        let expect = 1.0 / b.spec.levels as f64;
        let se = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((level0 as f64 / n as f64 - expect).abs() <= 3.0 * se);
    }

    #[test]
    fn empirical_mu_point_mass() {
        let b = hard_bundle(1.0);
        let ds = OfflineDataset {
            records: vec![SampleRecord {
                state: 3,
                action: 0,
                reward: 0.0,
                next_state: 3,
            }],
            seed: 0,
            instance_hash: String::new(),
        };
        let mu = empirical_mu(&ds, &b.mdp).unwrap();
        assert_eq!(mu.weight[3][0], 1.0);
    }

    #[test]
    fn empirical_mu_close_to_uniform_group_b() {
        let b = hard_bundle(1.0); // p = 1: mu = Unif(G_B)
        let ds = sample_dataset(&b.mdp, &b.mu, 1_000_000, 5).unwrap();
        let emp = empirical_mu(&ds, &b.mdp).unwrap();
        assert!(emp.tv_distance(&b.mu) <= 0.01);
    }

    #[test]
    fn concatenation_preserves_empirical_mu() {
        let b = hard_bundle(0.905);
        let ds = sample_dataset(&b.mdp, &b.mu, 400, 21).unwrap();
        let mut doubled = ds.clone();
        doubled.records.extend_from_slice(&ds.records);
        let a = empirical_mu(&ds, &b.mdp).unwrap();
        let c = empirical_mu(&doubled, &b.mdp).unwrap();
        assert!(a.tv_distance(&c) <= 1e-15);
    }

    #[test]
    fn digest_distinguishes_instances() {
        let b1 = hard_bundle(1.0);
        let b2 = hard_bundle(0.905);
        assert_ne!(
            instance_digest(&b1.mdp, &b1.mu),
            instance_digest(&b2.mdp, &b2.mu)
        );
        let _ = Policy::uniform(&b1.mdp);
    }
}
