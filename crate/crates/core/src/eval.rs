//! Rollouts and trajectory metrics: DTW, positionwise Euclidean distance,
//! smoothed state-action histogram KL and style calibration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelingFn, Provenance, Step, StyleDataset, Trajectory};
use crate::env::{Circle2D, NoiseConfig, StyleSpec, NUM_BINS};
use crate::trainer::Policy;
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSet {
    pub trajectories: Vec<Trajectory>,
    pub intended_style: usize,
    pub policy_tag: String,
    pub seed: u64,
}

impl RolloutSet {
    pub fn paths(&self) -> Vec<Vec<[f64; 2]>> {
        self.trajectories.iter().map(Trajectory::positions).collect()
    }
}

/// Full-horizon episodes of `policy` conditioned on `style` (ignored by
/// unconditioned policies). Episode `e` runs on its own stream derived from
/// `(seed, style, e)`.
pub fn rollout(
    policy: &Policy,
    policy_tag: &str,
    env: &Circle2D,
    style: usize,
    episodes: usize,
    noise: &NoiseConfig,
    seed: u64,
    greedy: bool,
) -> Result<RolloutSet> {
    noise.validate()?;
    let trajectories = (0..episodes as u32)
        .into_par_iter()
        .map(|e| {
            let mut rng = seed::rng(seed::mix(&[seed, style as u64, u64::from(e)]));
            let mut state = env.reset();
            let mut steps = Vec::with_capacity(crate::env::HORIZON);
            while !state.is_terminal() {
                let obs = state.observation();
                let action = policy.act(&obs, Some(style), &mut rng, greedy)?;
                steps.push(Step {
                    obs: obs.to_vec(),
                    action: action.bin() as u16,
                });
                state = env.step(&state, action, noise, &mut rng)?;
            }
            Ok(Trajectory {
                style_id: style,
                steps,
                provenance: Provenance { seed, episode: e },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutSet {
        trajectories,
        intended_style: style,
        policy_tag: policy_tag.to_string(),
        seed,
    })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Unconstrained dynamic time warping cost with Euclidean point cost.
pub fn dtw(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "dtw needs non-empty sequences");
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &pa in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = dist(pa, b[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// `Σ_t ‖a_t - b_t‖`.
pub fn euclid_dist(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(&p, &q)| dist(p, q)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KlConfig {
    pub grid: usize,
    pub action_groups: usize,
    pub smoothing: f64,
    /// Bounding-box expansion, as a fraction of each side's span.
    pub margin: f64,
    pub num_actions: usize,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            grid: 40,
            action_groups: 8,
            smoothing: 0.5,
            margin: 0.05,
            num_actions: NUM_BINS,
        }
    }
}

/// Joint position-cell x action-group histogram over a box fixed by the
/// reference set. Positions outside the box share one overflow cell.
#[derive(Debug, Clone)]
pub struct HistogramSpace {
    lo: [f64; 2],
    hi: [f64; 2],
    cfg: KlConfig,
}

impl HistogramSpace {
    pub fn from_reference(reference: &[Trajectory], cfg: KlConfig) -> Result<Self> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for t in reference {
            for p in t.positions() {
                for d in 0..2 {
                    lo[d] = lo[d].min(p[d]);
                    hi[d] = hi[d].max(p[d]);
                }
            }
        }
        if !lo[0].is_finite() {
            return Err(Error::EmptyDataset);
        }
        for d in 0..2 {
            let span = (hi[d] - lo[d]).max(1e-9);
            lo[d] -= cfg.margin * span;
            hi[d] += cfg.margin * span;
        }
        Ok(Self { lo, hi, cfg })
    }

    pub fn num_cells(&self) -> usize {
        (self.cfg.grid * self.cfg.grid + 1) * self.cfg.action_groups
    }

    fn cell(&self, p: [f64; 2], action: usize) -> usize {
        let g = self.cfg.grid;
        let mut idx = [0usize; 2];
        let mut outside = false;
        for d in 0..2 {
            let u = (p[d] - self.lo[d]) / (self.hi[d] - self.lo[d]);
            if !(0.0..=1.0).contains(&u) {
                outside = true;
            }
            idx[d] = ((u * g as f64).floor() as usize).min(g - 1);
        }
        let pos = if outside { g * g } else { idx[1] * g + idx[0] };
        let group = action * self.cfg.action_groups / self.cfg.num_actions;
        pos * self.cfg.action_groups + group
    }

    pub fn counts(&self, trajectories: &[Trajectory]) -> Vec<f64> {
        let mut h = vec![0.0; self.num_cells()];
        for t in trajectories {
            for (s, p) in t.steps.iter().zip(t.positions()) {
                h[self.cell(p, s.action as usize)] += 1.0;
            }
        }
        h
    }

    pub fn smoothed(&self, counts: &[f64], alpha: f64) -> Vec<f64> {
        let total: f64 = counts.iter().sum::<f64>() + alpha * counts.len() as f64;
        counts.iter().map(|c| (c + alpha) / total).collect()
    }
}

/// `Σ p log(p/q)` over cells with `p > 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// `KL(p̂_ref ‖ p̂_gen)` over smoothed joint histograms.
pub fn kl_state_action(generated: &[Trajectory], reference: &[Trajectory], cfg: &KlConfig) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let space = HistogramSpace::from_reference(reference, *cfg)?;
    let p = space.smoothed(&space.counts(reference), cfg.smoothing);
    let q = space.smoothed(&space.counts(generated), cfg.smoothing);
    Ok(kl_divergence(&p, &q).max(0.0))
}

/// KL between the raw and the smoothed reference histogram: the distortion
/// smoothing alone introduces.
pub fn smoothing_floor(reference: &[Trajectory], cfg: &KlConfig) -> Result<f64> {
    let space = HistogramSpace::from_reference(reference, *cfg)?;
    let counts = space.counts(reference);
    let raw = space.smoothed(&counts, 0.0);
    let smooth = space.smoothed(&counts, cfg.smoothing);
    Ok(kl_divergence(&raw, &smooth))
}

/// Fraction of rollouts that `labeler` assigns to the intended style.
pub fn calibration(rollouts: &RolloutSet, labeler: &LabelingFn) -> f64 {
    if rollouts.trajectories.is_empty() {
        return 0.0;
    }
    let hits = rollouts
        .trajectories
        .iter()
        .filter(|t| labeler.label(t) == rollouts.intended_style)
        .count();
    hits as f64 / rollouts.trajectories.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "DTW")]
    Dtw,
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "KL")]
    Kl,
    #[serde(rename = "calibration")]
    Calibration,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dtw, Metric::Ed, Metric::Kl, Metric::Calibration];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dtw => "DTW",
            Metric::Ed => "ED",
            Metric::Kl => "KL",
            Metric::Calibration => "calibration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub policy: String,
    pub style: usize,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, policy: &str, style: usize, metric: Metric) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.style == style && r.metric == metric)
    }

    pub fn mean(&self, policy: &str, style: usize, metric: Metric) -> Option<f64> {
        self.get(policy, style, metric).map(|r| r.mean)
    }

    pub fn policies(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.policy) {
                out.push(r.policy.clone());
            }
        }
        out
    }

    pub fn styles(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.rows.iter().map(|r| r.style).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,style,metric,mean,std,seeds,episodes\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{}",
                r.policy,
                r.style,
                r.metric.name(),
                r.mean,
                r.std,
                r.seeds,
                r.episodes
            );
        }
        out
    }

    /// Rows grouped by style and metric, one column per policy.
    pub fn to_markdown(&self) -> String {
        let policies = self.policies();
        let mut out = String::from("| Style | Metric |");
        for p in &policies {
            let _ = write!(out, " {p} |");
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(policies.len()));
        out.push('\n');
        for style in self.styles() {
            for metric in Metric::ALL {
                let _ = write!(out, "| Class {} | {} |", style + 1, metric.name());
                for p in &policies {
                    match self.get(p, style, metric) {
                        Some(r) => {
                            let _ = write!(out, " {:.3} ± {:.3} |", r.mean, r.std);
                        }
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub kl: KlConfig,
    pub greedy: bool,
    /// Rollouts per cell kept in the report for plotting.
    pub plot_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            kl: KlConfig::default(),
            greedy: false,
            plot_episodes: 10,
        }
    }
}

/// Everything policies are scored against.
pub struct EvalContext<'a> {
    pub env: Circle2D,
    pub specs: &'a [StyleSpec],
    /// Environment noise during evaluation rollouts.
    pub noise: NoiseConfig,
    /// Expert demonstrations: the KL reference, per style.
    pub demos: &'a StyleDataset,
    pub labeler: &'a LabelingFn,
    pub cfg: EvalConfig,
}

/// Policies trained under one seed.
pub struct SeedRun {
    pub seed: u64,
    pub policies: Vec<(String, Policy)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPaths {
    pub policy: String,
    pub style: usize,
    pub paths: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub table: MetricTable,
    /// Noise-free expert path per style.
    pub experts: Vec<Vec<[f64; 2]>>,
    /// Sample rollouts from the first seed.
    pub rollouts: Vec<CellPaths>,
}

/// Scores of one `(policy, style)` cell under one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScores {
    pub dtw: f64,
    pub ed: f64,
    pub kl: f64,
    pub calibration: f64,
}

pub fn score_rollouts(
    set: &RolloutSet,
    expert: &[[f64; 2]],
    reference: &[Trajectory],
    ctx: &EvalContext<'_>,
) -> Result<CellScores> {
    let paths = set.paths();
    let n = paths.len() as f64;
    let per: Vec<(f64, f64)> = paths
        .par_iter()
        .map(|p| Ok((dtw(p, expert), euclid_dist(p, expert)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellScores {
        dtw: per.iter().map(|x| x.0).sum::<f64>() / n,
        ed: per.iter().map(|x| x.1).sum::<f64>() / n,
        kl: kl_state_action(&set.trajectories, reference, &ctx.cfg.kl)?,
        calibration: calibration(set, ctx.labeler),
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every `(seed, policy, style)` cell and aggregates mean ± sample std
/// across seeds. Rollout streams depend only on `(seed, style)`, so every
/// policy faces the same environment noise.
pub fn build_report(runs: &[SeedRun], ctx: &EvalContext<'_>) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no seeds to evaluate".into()));
    }
    let experts = ctx
        .specs
        .iter()
        .map(|s| ctx.env.reference_path(s))
        .collect::<Result<Vec<_>>>()?;
    let references: Vec<Vec<Trajectory>> = ctx
        .specs
        .iter()
        .map(|s| ctx.demos.trajectories_of(s.style_id).cloned().collect())
        .collect();
    let mut scores: BTreeMap<(String, usize), Vec<CellScores>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut plots = Vec::new();
    for (ri, run) in runs.iter().enumerate() {
        for (name, policy) in &run.policies {
            if !order.contains(name) {
                order.push(name.clone());
            }
            for spec in ctx.specs {
                let z = spec.style_id;
                let rollout_seed = seed::derive(run.seed, "eval", z as u64);
                let set = rollout(policy, name, &ctx.env, z, ctx.cfg.episodes, &ctx.noise, rollout_seed, ctx.cfg.greedy)
                    .map_err(|e| Error::InvalidArgument(format!("cell ({name}, style {z}, seed {}): {e}", run.seed)))?;
                let cell = score_rollouts(&set, &experts[z], &references[z], ctx)
                    .map_err(|e| Error::InvalidArgument(format!("cell ({name}, style {z}, seed {}): {e}", run.seed)))?;
                scores.entry((name.clone(), z)).or_default().push(cell);
                if ri == 0 {
                    plots.push(CellPaths {
                        policy: name.clone(),
                        style: z,
                        paths: set.paths().into_iter().take(ctx.cfg.plot_episodes).collect(),
                    });
                }
            }
        }
    }
    let mut table = MetricTable::default();
    for name in &order {
        for spec in ctx.specs {
            let cells = &scores[&(name.clone(), spec.style_id)];
            for metric in Metric::ALL {
                let xs: Vec<f64> = cells
                    .iter()
                    .map(|c| match metric {
                        Metric::Dtw => c.dtw,
                        Metric::Ed => c.ed,
                        Metric::Kl => c.kl,
                        Metric::Calibration => c.calibration,
                    })
                    .collect();
                let (mean, std) = mean_std(&xs);
                table.rows.push(MetricRow {
                    policy: name.clone(),
                    style: spec.style_id,
                    metric,
                    mean,
                    std,
                    seeds: xs.len(),
                    episodes: ctx.cfg.episodes,
                });
            }
        }
    }
    Ok(EvalReport {
        table,
        experts,
        rollouts: plots,
    })
}
