//! Exact counting arithmetic on finite `(state, action, style)` datasets.
//!
//! Priors, posteriors, PMI weights and weighted cross-entropy minimizers are
//! computed as exact rationals from sample counts, so degenerate-case
//! properties of the weighted objective can be checked without rounding.

use num_rational::Ratio;
use rand::Rng;

use crate::dataset::{Provenance, Step, StyleDataset, Trajectory};
use crate::{Error, Result};

pub type Rational = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TabSample {
    pub state: usize,
    pub action: usize,
    pub style: usize,
}

#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub n_states: usize,
    pub n_actions: usize,
    pub k: usize,
    samples: Vec<TabSample>,
    /// counts[s][a][z]
    counts: Vec<Vec<Vec<i128>>>,
}

/// Per state and style, the minimizing action distribution (`None` when the
/// pair carries no weight).
pub type PolicyTable = Vec<Vec<Option<Vec<Rational>>>>;

impl TabularDataset {
    pub fn new(n_states: usize, n_actions: usize, k: usize, samples: Vec<TabSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut counts = vec![vec![vec![0i128; k]; n_actions]; n_states];
        for s in &samples {
            if s.state >= n_states || s.action >= n_actions {
                return Err(Error::InvalidArgument(format!("sample {s:?} out of range")));
            }
            if s.style >= k {
                return Err(Error::LabelRange { label: s.style, k });
            }
            counts[s.state][s.action][s.style] += 1;
        }
        Ok(Self {
            n_states,
            n_actions,
            k,
            samples,
            counts,
        })
    }

    pub fn samples(&self) -> &[TabSample] {
        &self.samples
    }

    pub fn total(&self) -> i128 {
        self.samples.len() as i128
    }

    pub fn count(&self, s: usize, a: usize, z: usize) -> i128 {
        self.counts[s][a][z]
    }

    pub fn count_sa(&self, s: usize, a: usize) -> i128 {
        self.counts[s][a].iter().sum()
    }

    pub fn count_s(&self, s: usize) -> i128 {
        (0..self.n_actions).map(|a| self.count_sa(s, a)).sum()
    }

    pub fn count_z(&self, z: usize) -> i128 {
        self.counts
            .iter()
            .flat_map(|row| row.iter().map(move |c| c[z]))
            .sum()
    }

    pub fn prior(&self, z: usize) -> Rational {
        Rational::new(self.count_z(z), self.total())
    }

    pub fn posterior(&self, z: usize, s: usize, a: usize) -> Option<Rational> {
        let n = self.count_sa(s, a);
        (n > 0).then(|| Rational::new(self.count(s, a, z), n))
    }

    /// `p(z|s,a) / p(z)`; `None` where `(s, a)` or `z` never occurs.
    pub fn pmi_weight(&self, s: usize, a: usize, z: usize) -> Option<Rational> {
        let nz = self.count_z(z);
        let nsa = self.count_sa(s, a);
        (nz > 0 && nsa > 0).then(|| Rational::new(self.count(s, a, z) * self.total(), nsa * nz))
    }

    /// Empirical `p(a|s)`.
    pub fn empirical_policy(&self, s: usize) -> Option<Vec<Rational>> {
        let n = self.count_s(s);
        (n > 0).then(|| {
            (0..self.n_actions)
                .map(|a| Rational::new(self.count_sa(s, a), n))
                .collect()
        })
    }

    /// Closed-form minimizer of `Σ_samples w(s,a,z) · -log π(a|s,z)` over
    /// per-`(s, z)` categorical distributions: `π(a|s,z) ∝ n(s,a,z) w(s,a,z)`.
    pub fn weighted_minimizer<F>(&self, weight: F) -> PolicyTable
    where
        F: Fn(usize, usize, usize) -> Rational,
    {
        (0..self.n_states)
            .map(|s| {
                (0..self.k)
                    .map(|z| {
                        let mass: Vec<Rational> = (0..self.n_actions)
                            .map(|a| {
                                let c = self.count(s, a, z);
                                if c == 0 {
                                    Rational::from_integer(0)
                                } else {
                                    Rational::from_integer(c) * weight(s, a, z)
                                }
                            })
                            .collect();
                        let total: Rational = mass.iter().cloned().sum();
                        (total > Rational::from_integer(0))
                            .then(|| mass.into_iter().map(|m| m / total).collect())
                    })
                    .collect()
            })
            .collect()
    }

    /// Minimizer under exact PMI weights.
    pub fn pmi_minimizer(&self) -> PolicyTable {
        self.weighted_minimizer(|s, a, z| {
            self.pmi_weight(s, a, z)
                .unwrap_or_else(|| Rational::from_integer(0))
        })
    }

    /// Mean over samples of `-log π(a|s,z) · p(z|s,a)/p(z)` with exact
    /// weights; `log_prob` returns `log π(a|s,z)`.
    pub fn bc_pmi_loss<F>(&self, log_prob: F) -> f64
    where
        F: Fn(usize, usize, usize) -> f64,
    {
        let sum: f64 = self
            .samples
            .iter()
            .map(|x| {
                let w = self.pmi_weight(x.state, x.action, x.style).unwrap();
                -log_prob(x.state, x.action, x.style) * to_f64(w)
            })
            .sum();
        sum / self.total() as f64
    }

    /// Behavioral cloning loss restricted to the samples of style `z`.
    pub fn style_bc_loss<F>(&self, z: usize, log_prob: F) -> f64
    where
        F: Fn(usize, usize, usize) -> f64,
    {
        let own: Vec<_> = self.samples.iter().filter(|x| x.style == z).collect();
        own.iter()
            .map(|x| -log_prob(x.state, x.action, z))
            .sum::<f64>()
            / own.len() as f64
    }

    /// Exact `I(S,A;Z)` in nats.
    pub fn mutual_information(&self) -> f64 {
        let n = self.total() as f64;
        let mut mi = 0.0;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let nsa = self.count_sa(s, a) as f64;
                for z in 0..self.k {
                    let c = self.count(s, a, z) as f64;
                    if c > 0.0 {
                        mi += c / n * (c * n / (nsa * self.count_z(z) as f64)).ln();
                    }
                }
            }
        }
        mi
    }

    /// One single-step trajectory per sample; observations are one-hot
    /// states.
    pub fn to_style_dataset(&self) -> Result<StyleDataset> {
        let trajectories = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut obs = vec![0.0; self.n_states];
                obs[x.state] = 1.0;
                Trajectory {
                    style_id: x.style,
                    steps: vec![Step {
                        obs,
                        action: x.action as u16,
                    }],
                    provenance: Provenance {
                        seed: 0,
                        episode: i as u32,
                    },
                }
            })
            .collect();
        StyleDataset::new(trajectories, self.k, self.n_actions)
    }
}

pub fn to_f64(q: Rational) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// Styles independent of `(s, a)` by construction: every `(s, a)` pair with
/// multiplicity `m` appears `m * ratio[z]` times with style `z`.
pub fn independent_toy<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    style_ratio: &[usize],
    rng: &mut R,
) -> TabularDataset {
    let mut samples = Vec::new();
    for s in 0..n_states {
        for a in 0..n_actions {
            let m = rng.random_range(0..4usize);
            for (z, &r) in style_ratio.iter().enumerate() {
                for _ in 0..m * r {
                    samples.push(TabSample {
                        state: s,
                        action: a,
                        style: z,
                    });
                }
            }
        }
    }
    // Guarantee every state is visited.
    for s in 0..n_states {
        for (z, &r) in style_ratio.iter().enumerate() {
            for _ in 0..r {
                samples.push(TabSample {
                    state: s,
                    action: s % n_actions,
                    style: z,
                });
            }
        }
    }
    TabularDataset::new(n_states, n_actions, style_ratio.len(), samples).unwrap()
}

/// `(s, a)` determines the style through `label(s, a)`; multiplicities
/// random in `1..=max_mult`.
pub fn deterministic_toy<R, F>(
    n_states: usize,
    n_actions: usize,
    k: usize,
    label: F,
    max_mult: usize,
    rng: &mut R,
) -> TabularDataset
where
    R: Rng + ?Sized,
    F: Fn(usize, usize) -> usize,
{
    let mut samples = Vec::new();
    for s in 0..n_states {
        for a in 0..n_actions {
            let m = rng.random_range(1..=max_mult);
            for _ in 0..m {
                samples.push(TabSample {
                    state: s,
                    action: a,
                    style: label(s, a),
                });
            }
        }
    }
    TabularDataset::new(n_states, n_actions, k, samples).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn one() -> Rational {
        Rational::from_integer(1)
    }

    #[test]
    fn independent_toy_has_unit_weights_and_bc_minimizer() {
        let ds = independent_toy(6, 4, &[1, 2, 3], &mut seed::rng(1));
        for s in 0..6 {
            for a in 0..4 {
                for z in 0..3 {
                    if ds.count_sa(s, a) > 0 {
                        assert_eq!(ds.pmi_weight(s, a, z).unwrap(), one());
                    }
                }
            }
        }
        let table = ds.pmi_minimizer();
        for (s, row) in table.iter().enumerate() {
            let bc = ds.empirical_policy(s).unwrap();
            for pi in row {
                assert_eq!(pi.as_ref().unwrap(), &bc);
            }
        }
        assert!(ds.mutual_information().abs() < 1e-12);
    }

    #[test]
    fn scaling_weights_keeps_the_minimizer() {
        let ds = deterministic_toy(5, 3, 3, |s, a| (s * 3 + a) % 3, 5, &mut seed::rng(2));
        let base = ds.weighted_minimizer(|s, a, z| ds.pmi_weight(s, a, z).unwrap());
        let scaled = ds.weighted_minimizer(|s, a, z| ds.pmi_weight(s, a, z).unwrap() * Rational::new(7, 3));
        assert_eq!(base, scaled);
    }

    #[test]
    fn deterministic_toy_mi_is_style_entropy() {
        let ds = deterministic_toy(8, 4, 4, |s, a| (s + a) % 4, 1, &mut seed::rng(3));
        assert!((ds.mutual_information() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(ds.pmi_weight(0, 0, 0).unwrap(), Rational::from_integer(4));
        assert_eq!(ds.pmi_weight(0, 0, 1).unwrap(), Rational::from_integer(0));
    }

    #[test]
    fn one_hot_conversion_keeps_counts() {
        let ds = deterministic_toy(4, 2, 2, |s, _| s % 2, 3, &mut seed::rng(4));
        let sd = ds.to_style_dataset().unwrap();
        assert_eq!(sd.len() as i128, ds.total());
        assert_eq!(sd.obs_dim(), 4);
        assert_eq!(sd.style_counts()[0] as i128, ds.count_z(0));
    }
}
