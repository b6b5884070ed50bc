//! Policy training: vanilla BC, conditional BC (shared network or one
//! network per style) and PMI-weighted BC.
//!
//! All modes share one epoch loop over a precomputed `(input, action,
//! weight)` table. BC and conditional BC use unit weights; BC-PMI takes
//! its weights from a frozen [`MineEstimator`], optionally minus a moving
//! average baseline.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{draw_categorical, StyleDataset};
use crate::env::DirectionAction;
use crate::mine::MineEstimator;
use crate::nn::{self, softmax, Activation, AdamConfig, AdamState, GradBundle, MlpNet};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Bc,
    CondBc,
    CbcSeparate,
    BcPmi,
}

impl PolicyMode {
    pub const ALL: [PolicyMode; 4] = [
        PolicyMode::Bc,
        PolicyMode::CondBc,
        PolicyMode::CbcSeparate,
        PolicyMode::BcPmi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::Bc => "bc",
            PolicyMode::CondBc => "cond_bc",
            PolicyMode::CbcSeparate => "cbc_separate",
            PolicyMode::BcPmi => "bc_pmi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub activation: Activation,
    /// Subtract the moving-average baseline from the PMI weights.
    pub use_baseline: bool,
    pub baseline_decay: f64,
    /// Clip baseline-subtracted weights at zero.
    pub clip_negative: bool,
    pub obs_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 128,
            lr: 1e-3,
            hidden: 32,
            activation: Activation::Tanh,
            use_baseline: false,
            baseline_decay: 0.99,
            clip_negative: false,
            obs_scale: 0.1,
        }
    }
}

/// Policy over `obs * obs_scale`, with a one-hot style appended when
/// `k` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub net: MlpNet,
    pub obs_scale: f64,
    pub k: Option<usize>,
}

impl PolicyNet {
    fn input(&self, obs: &[f64], style: Option<usize>) -> Result<Vec<f64>> {
        let mut x: Vec<f64> = scaled_obs(obs, self.obs_scale);
        if let Some(k) = self.k {
            let z = style.ok_or_else(|| {
                Error::InvalidArgument("a conditioned policy needs a style id".into())
            })?;
            if z >= k {
                return Err(Error::LabelRange { label: z, k });
            }
            x.extend((0..k).map(|i| if i == z { 1.0 } else { 0.0 }));
        }
        Ok(x)
    }

    pub fn logits(&self, obs: &[f64], style: Option<usize>) -> Result<Vec<f64>> {
        self.net.forward(&self.input(obs, style)?)
    }

    pub fn probs(&self, obs: &[f64], style: Option<usize>) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(obs, style)?))
    }
}

/// `π(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconditionedPolicy {
    pub policy: PolicyNet,
}

/// `π(a|s,z)` from one shared network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedPolicy {
    pub policy: PolicyNet,
    pub k: usize,
    pub mode: PolicyMode,
}

/// One unconditioned network per style.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatePolicies {
    pub per_style: Vec<UnconditionedPolicy>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Unconditioned(UnconditionedPolicy),
    Conditioned(ConditionedPolicy),
    Separate(SeparatePolicies),
}

impl Policy {
    pub fn mode(&self) -> PolicyMode {
        match self {
            Policy::Unconditioned(_) => PolicyMode::Bc,
            Policy::Conditioned(c) => c.mode,
            Policy::Separate(_) => PolicyMode::CbcSeparate,
        }
    }

    pub fn k(&self) -> Option<usize> {
        match self {
            Policy::Unconditioned(_) => None,
            Policy::Conditioned(c) => Some(c.k),
            Policy::Separate(s) => Some(s.per_style.len()),
        }
    }

    /// Action distribution; unconditioned policies ignore `style`.
    pub fn probs(&self, obs: &[f64], style: Option<usize>) -> Result<Vec<f64>> {
        match self {
            Policy::Unconditioned(p) => p.policy.probs(obs, None),
            Policy::Conditioned(c) => c.policy.probs(obs, style),
            Policy::Separate(s) => {
                let z = style.ok_or_else(|| {
                    Error::InvalidArgument("a conditioned policy needs a style id".into())
                })?;
                let p = s.per_style.get(z).ok_or(Error::LabelRange {
                    label: z,
                    k: s.per_style.len(),
                })?;
                p.policy.probs(obs, None)
            }
        }
    }

    pub fn act_bin<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        style: Option<usize>,
        rng: &mut R,
        greedy: bool,
    ) -> Result<usize> {
        let p = self.probs(obs, style)?;
        Ok(if greedy { argmax(&p) } else { draw_categorical(&p, rng) })
    }

    /// Samples (or argmaxes) a Circle 2D direction.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        style: Option<usize>,
        rng: &mut R,
        greedy: bool,
    ) -> Result<DirectionAction> {
        DirectionAction::new(self.act_bin(obs, style, rng, greedy)?)
    }

    pub fn nets(&self) -> Vec<&PolicyNet> {
        match self {
            Policy::Unconditioned(p) => vec![&p.policy],
            Policy::Conditioned(c) => vec![&c.policy],
            Policy::Separate(s) => s.per_style.iter().map(|p| &p.policy).collect(),
        }
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Moving average `b̃` of the batch-mean weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineTracker {
    pub value: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl BaselineTracker {
    pub fn new(decay: f64) -> Self {
        Self {
            value: 0.0,
            decay,
            initialized: false,
        }
    }

    /// Folds in a batch mean and returns the updated baseline.
    pub fn update(&mut self, batch_mean: f64) -> f64 {
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean;
        } else {
            self.value = batch_mean;
            self.initialized = true;
        }
        self.value
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean weighted loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean over the final epoch of per-batch mean effective weights.
    pub final_epoch_mean_weight: f64,
    pub steps: usize,
    pub final_baseline: Option<f64>,
}

struct Table {
    inputs: Vec<Vec<f64>>,
    targets: Vec<usize>,
    weights: Vec<f64>,
}

fn fit(
    net: &mut MlpNet,
    table: &Table,
    cfg: &PolicyConfig,
    rng: &mut seed::Rng,
    mut baseline: Option<BaselineTracker>,
) -> Result<TrainReport> {
    if table.inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let mut adam = AdamState::new(net, AdamConfig::with_lr(cfg.lr));
    let mut grads = GradBundle::zeros_like(net);
    let mut order: Vec<usize> = (0..table.inputs.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut weight_means = Vec::new();
        for (bi, batch) in order.chunks(cfg.batch).enumerate() {
            let n = batch.len() as f64;
            let shift = match baseline.as_mut() {
                Some(tracker) => {
                    let mean = batch.iter().map(|&i| table.weights[i]).sum::<f64>() / n;
                    tracker.update(mean)
                }
                None => 0.0,
            };
            grads.reset();
            let mut eff_sum = 0.0;
            for &i in batch {
                let mut w = table.weights[i] - shift;
                if cfg.clip_negative && w < 0.0 {
                    w = 0.0;
                }
                eff_sum += w;
                net.accumulate_ce(&table.inputs[i], table.targets[i], w, &mut grads)
                    .map_err(|e| Error::Diverged {
                        stage: "policy epoch/batch",
                        index: epoch * 1_000_000 + bi,
                        reason: e.to_string(),
                    })?;
            }
            grads.scale(1.0 / n);
            epoch_loss += grads.loss * n;
            weight_means.push(eff_sum / n);
            adam.step(net, &grads).map_err(|e| Error::Diverged {
                stage: "policy epoch/batch",
                index: epoch * 1_000_000 + bi,
                reason: e.to_string(),
            })?;
            report.steps += 1;
        }
        report
            .epoch_losses
            .push(epoch_loss / table.inputs.len() as f64);
        report.final_epoch_mean_weight =
            weight_means.iter().sum::<f64>() / weight_means.len() as f64;
    }
    report.final_baseline = baseline.map(|b| b.value);
    Ok(report)
}

fn scaled_obs(obs: &[f64], scale: f64) -> Vec<f64> {
    obs.iter().map(|v| v * scale).collect()
}

fn one_hot_append(obs: &[f64], scale: f64, z: Option<(usize, usize)>) -> Vec<f64> {
    let mut x: Vec<f64> = scaled_obs(obs, scale);
    if let Some((z, k)) = z {
        x.extend((0..k).map(|i| if i == z { 1.0 } else { 0.0 }));
    }
    x
}

fn build_table(ds: &StyleDataset, cfg: &PolicyConfig, conditioned: bool, weights: Vec<f64>) -> Table {
    let k = ds.k();
    let mut inputs = Vec::with_capacity(ds.len());
    let mut targets = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        inputs.push(one_hot_append(s.obs, cfg.obs_scale, conditioned.then_some((s.style, k))));
        targets.push(s.action);
    }
    Table {
        inputs,
        targets,
        weights,
    }
}

fn init_net(in_dim: usize, out_dim: usize, cfg: &PolicyConfig, seed: u64, index: u64) -> Result<MlpNet> {
    MlpNet::new(
        &[in_dim, cfg.hidden, out_dim],
        cfg.activation,
        &mut seed::stage_rng(seed, "policy-init", index),
    )
}

fn check_nonempty(ds: &StyleDataset) -> Result<()> {
    if ds.is_empty() {
        Err(Error::EmptyDataset)
    } else {
        Ok(())
    }
}

/// Vanilla BC: mean cross-entropy over all samples, styles ignored.
pub fn train_bc(ds: &StyleDataset, cfg: &PolicyConfig, seed: u64) -> Result<(UnconditionedPolicy, TrainReport)> {
    check_nonempty(ds)?;
    let mut net = init_net(ds.obs_dim(), ds.num_actions(), cfg, seed, 0)?;
    let table = build_table(ds, cfg, false, vec![1.0; ds.len()]);
    let report = fit(&mut net, &table, cfg, &mut seed::stage_rng(seed, "policy-batches", 0), None)?;
    Ok((
        UnconditionedPolicy {
            policy: PolicyNet {
                net,
                obs_scale: cfg.obs_scale,
                k: None,
            },
        },
        report,
    ))
}

/// Trains a conditioned policy on `ds` with the given per-sample weights.
/// `baseline` subtracts the moving average of the batch-mean weight.
pub fn train_weighted(
    ds: &StyleDataset,
    weights: Vec<f64>,
    cfg: &PolicyConfig,
    seed: u64,
    mode: PolicyMode,
) -> Result<(ConditionedPolicy, TrainReport)> {
    check_nonempty(ds)?;
    if weights.len() != ds.len() {
        return Err(Error::Shape {
            expected: ds.len(),
            got: weights.len(),
        });
    }
    let k = ds.k();
    let mut net = init_net(ds.obs_dim() + k, ds.num_actions(), cfg, seed, 0)?;
    let table = build_table(ds, cfg, true, weights);
    let baseline = (mode == PolicyMode::BcPmi && cfg.use_baseline)
        .then(|| BaselineTracker::new(cfg.baseline_decay));
    let report = fit(
        &mut net,
        &table,
        cfg,
        &mut seed::stage_rng(seed, "policy-batches", 0),
        baseline,
    )?;
    Ok((
        ConditionedPolicy {
            policy: PolicyNet {
                net,
                obs_scale: cfg.obs_scale,
                k: Some(k),
            },
            k,
            mode,
        },
        report,
    ))
}

/// Shared-network conditional BC with unit weights.
pub fn train_cond_bc(ds: &StyleDataset, cfg: &PolicyConfig, seed: u64) -> Result<(ConditionedPolicy, TrainReport)> {
    train_weighted(ds, vec![1.0; ds.len()], cfg, seed, PolicyMode::CondBc)
}

/// One unconditioned BC network per style, each trained on its own subset.
pub fn train_cbc_separate(ds: &StyleDataset, cfg: &PolicyConfig, seed: u64) -> Result<(SeparatePolicies, Vec<TrainReport>)> {
    check_nonempty(ds)?;
    let mut per_style = Vec::with_capacity(ds.k());
    let mut reports = Vec::with_capacity(ds.k());
    for z in 0..ds.k() {
        let subset: Vec<_> = ds.trajectories_of(z).cloned().collect();
        if subset.is_empty() {
            return Err(Error::InvalidArgument(format!("style {z} has no trajectories")));
        }
        let sub = StyleDataset::new(subset, ds.k(), ds.num_actions())?;
        let style_seed = seed::derive(seed, "cbc-style", z as u64);
        let (p, r) = train_bc(&sub, cfg, style_seed)?;
        per_style.push(p);
        reports.push(r);
    }
    Ok((SeparatePolicies { per_style }, reports))
}

/// BC with weights `exp(log_pmi)` from the frozen estimator, computed once
/// up front.
pub fn train_bc_pmi(
    ds: &StyleDataset,
    est: &MineEstimator,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<(ConditionedPolicy, TrainReport)> {
    check_nonempty(ds)?;
    let weights = est.dataset_weights(ds)?;
    train_weighted(ds, weights, cfg, seed, PolicyMode::BcPmi)
}

/// Trains `mode`, returning a uniform [`Policy`].
pub fn train_mode(
    ds: &StyleDataset,
    mode: PolicyMode,
    est: Option<&MineEstimator>,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<Policy> {
    Ok(match mode {
        PolicyMode::Bc => Policy::Unconditioned(train_bc(ds, cfg, seed)?.0),
        PolicyMode::CondBc => Policy::Conditioned(train_cond_bc(ds, cfg, seed)?.0),
        PolicyMode::CbcSeparate => Policy::Separate(train_cbc_separate(ds, cfg, seed)?.0),
        PolicyMode::BcPmi => {
            let est = est.ok_or_else(|| Error::Usage("bc_pmi needs a trained estimator".into()))?;
            Policy::Conditioned(train_bc_pmi(ds, est, cfg, seed)?.0)
        }
    })
}

/// Sidecar written next to policy checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySidecar {
    pub mode: PolicyMode,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub config: PolicyConfig,
    pub seed: u64,
    pub obs_scale: f64,
    /// Checkpoint file names relative to the sidecar, one per network.
    pub networks: Vec<String>,
}

/// Writes `<stem>.sbnn` (or `<stem>_<z>.sbnn` per style) and `<stem>.json`.
pub fn save_policy(policy: &Policy, dir: &Path, stem: &str, cfg: &PolicyConfig, seed: u64) -> Result<()> {
    let nets = policy.nets();
    let names: Vec<String> = if nets.len() == 1 {
        vec![format!("{stem}.sbnn")]
    } else {
        (0..nets.len()).map(|z| format!("{stem}_{z}.sbnn")).collect()
    };
    for (net, name) in nets.iter().zip(&names) {
        nn::save_checkpoint(&net.net, &dir.join(name))?;
    }
    let sidecar = PolicySidecar {
        mode: policy.mode(),
        k: policy.k(),
        config: cfg.clone(),
        seed,
        obs_scale: nets[0].obs_scale,
        networks: names,
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
}

/// Loads a policy from its JSON sidecar.
pub fn load_policy(sidecar_path: &Path) -> Result<Policy> {
    let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let meta: PolicySidecar = serde_json::from_str(&text)?;
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let mut nets = meta
        .networks
        .iter()
        .map(|n| nn::load_checkpoint(&dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    let bad = |r: &str| Error::format(sidecar_path, r);
    let wrap = |net, k| PolicyNet {
        net,
        obs_scale: meta.obs_scale,
        k,
    };
    Ok(match meta.mode {
        PolicyMode::Bc => Policy::Unconditioned(UnconditionedPolicy {
            policy: wrap(nets.pop().ok_or_else(|| bad("missing network"))?, None),
        }),
        PolicyMode::CondBc | PolicyMode::BcPmi => {
            let k = meta.k.ok_or_else(|| bad("conditioned policy without K"))?;
            Policy::Conditioned(ConditionedPolicy {
                policy: wrap(nets.pop().ok_or_else(|| bad("missing network"))?, Some(k)),
                k,
                mode: meta.mode,
            })
        }
        PolicyMode::CbcSeparate => Policy::Separate(SeparatePolicies {
            per_style: nets
                .into_iter()
                .map(|n| UnconditionedPolicy { policy: wrap(n, None) })
                .collect(),
        }),
    })
}
