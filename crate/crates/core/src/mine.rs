//! Donsker–Varadhan mutual-information estimation between `(s, a)` and the
//! style `z`.
//!
//! The statistics network `T(s, a, z)` maximizes
//! `E_joint[T] - log E_marginal[exp T]`. At the optimum `T` equals the PMI
//! `log p(z|s,a)/p(z)` up to an additive constant; subtracting
//! `log(ema_denominator)` removes the constant so that `exp(log_pmi)`
//! averages to one over the product of marginals.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{MarginalStrategy, Sample, StyleDataset};
use crate::env::bin_heading;
use crate::nn::{self, Activation, AdamConfig, AdamState, GradBundle, MlpNet};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub hidden: usize,
    pub activation: Activation,
    pub marginal: MarginalStrategy,
    /// Multiplier applied to observations before they enter the network.
    pub obs_scale: f64,
    /// Upper clamp for `weight`; `None` disables it.
    pub w_max: Option<f64>,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch: 512,
            lr: 1e-3,
            ema_decay: 0.99,
            hidden: 32,
            activation: Activation::Tanh,
            marginal: MarginalStrategy::Shuffle,
            obs_scale: 0.1,
            w_max: Some(20.0),
        }
    }
}

/// Metadata persisted next to the network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineSidecar {
    pub ema_denominator: f64,
    pub ema_decay: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub mi_history: Vec<f64>,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub obs_scale: f64,
    pub w_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MineEstimator {
    pub net: MlpNet,
    pub ema_denominator: f64,
    pub ema_decay: f64,
    pub mi_history: Vec<f64>,
    k: usize,
    obs_dim: usize,
    num_actions: usize,
    obs_scale: f64,
    w_max: Option<f64>,
}

impl MineEstimator {
    /// Untrained estimator around `net`, whose input must be
    /// `obs_dim + 2 + k` wide with a scalar output.
    pub fn from_net(
        net: MlpNet,
        k: usize,
        obs_dim: usize,
        num_actions: usize,
        obs_scale: f64,
    ) -> Result<Self> {
        if net.input_dim() != obs_dim + 2 + k {
            return Err(Error::Shape {
                expected: obs_dim + 2 + k,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != 1 {
            return Err(Error::Shape {
                expected: 1,
                got: net.output_dim(),
            });
        }
        Ok(Self {
            net,
            ema_denominator: 1.0,
            ema_decay: 0.99,
            mi_history: Vec::new(),
            k,
            obs_dim,
            num_actions,
            obs_scale,
            w_max: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn w_max(&self) -> Option<f64> {
        self.w_max
    }

    pub fn set_w_max(&mut self, w_max: Option<f64>) {
        self.w_max = w_max;
    }

    /// `obs * scale ++ (sin θ, cos θ) ++ one_hot(z)`.
    pub fn encode(&self, obs: &[f64], action: usize, z: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.obs_dim + 2 + self.k);
        x.extend(obs.iter().map(|v| v * self.obs_scale));
        let h = bin_heading(action, self.num_actions);
        x.push(h.sin());
        x.push(h.cos());
        x.extend((0..self.k).map(|i| if i == z { 1.0 } else { 0.0 }));
        x
    }

    pub fn statistic(&self, obs: &[f64], action: usize, z: usize) -> Result<f64> {
        Ok(self.net.forward(&self.encode(obs, action, z))?[0])
    }

    /// `(1/b) Σ T(s,a,z) - log((1/b) Σ exp T(s,a,z̄))`.
    pub fn dv_bound(&self, joint: &[Sample<'_>], marginal_styles: &[usize]) -> Result<f64> {
        if joint.len() != marginal_styles.len() || joint.len() < 2 {
            return Err(Error::InvalidArgument(
                "joint and marginal batches must have equal size >= 2".into(),
            ));
        }
        let b = joint.len() as f64;
        let mut t_joint = 0.0;
        let mut t_marg = Vec::with_capacity(joint.len());
        for (s, &zb) in joint.iter().zip(marginal_styles) {
            t_joint += self.statistic(s.obs, s.action, s.style)?;
            t_marg.push(self.statistic(s.obs, s.action, zb)?);
        }
        Ok(t_joint / b - nn::log_mean_exp(&t_marg))
    }

    /// Large-sample bound estimate on `n` fresh draws.
    pub fn estimate_bound<R: Rng + ?Sized>(
        &self,
        ds: &StyleDataset,
        n: usize,
        strategy: MarginalStrategy,
        rng: &mut R,
    ) -> Result<f64> {
        let joint = ds.sample_joint(n, rng)?;
        let zbar = ds.sample_marginal_styles(&joint, strategy, rng)?;
        self.dv_bound(&joint, &zbar)
    }

    /// Centered statistic `T(s,a,z) - log(ema_denominator)`.
    pub fn log_pmi(&self, obs: &[f64], action: usize, z: usize) -> Result<f64> {
        Ok(self.statistic(obs, action, z)? - self.ema_denominator.ln())
    }

    /// `exp(log_pmi)`, clamped to `w_max` when set.
    pub fn weight(&self, obs: &[f64], action: usize, z: usize) -> Result<f64> {
        let w = self.log_pmi(obs, action, z)?.exp();
        Ok(match self.w_max {
            Some(m) => w.clamp(0.0, m),
            None => w,
        })
    }

    /// Weights for every sample of `ds`, in flat-index order.
    pub fn dataset_weights(&self, ds: &StyleDataset) -> Result<Vec<f64>> {
        if ds.k() != self.k {
            return Err(Error::StyleMismatch {
                estimator: self.k,
                dataset: ds.k(),
            });
        }
        (0..ds.len())
            .into_par_iter()
            .map(|i| {
                let s = ds.sample(i);
                self.weight(s.obs, s.action, s.style)
            })
            .collect()
    }

    pub fn sidecar(&self) -> MineSidecar {
        MineSidecar {
            ema_denominator: self.ema_denominator,
            ema_decay: self.ema_decay,
            k: self.k,
            mi_history: self.mi_history.clone(),
            obs_dim: self.obs_dim,
            num_actions: self.num_actions,
            obs_scale: self.obs_scale,
            w_max: self.w_max,
        }
    }

    /// Writes `<stem>.sbnn` and `<stem>.json`.
    pub fn save(&self, net_path: &Path, sidecar_path: &Path) -> Result<()> {
        nn::save_checkpoint(&self.net, net_path)?;
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn load(net_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let net = nn::load_checkpoint(net_path)?;
        let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let meta: MineSidecar = serde_json::from_str(&text)?;
        let mut est = Self::from_net(net, meta.k, meta.obs_dim, meta.num_actions, meta.obs_scale)?;
        est.ema_denominator = meta.ema_denominator;
        est.ema_decay = meta.ema_decay;
        est.mi_history = meta.mi_history;
        est.w_max = meta.w_max;
        Ok(est)
    }
}

/// Fits `T` by gradient ascent on the DV bound.
///
/// The gradient of `log E[exp T]` divides by an exponential moving average
/// of the marginal batch mean of `exp T` instead of the batch mean itself.
pub fn train_mine(ds: &StyleDataset, cfg: &MineConfig, seed: u64) -> Result<MineEstimator> {
    let populated = ds.style_counts().iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Err(Error::InvalidArgument(
            "MINE needs at least two styles with samples".into(),
        ));
    }
    if cfg.batch < 2 || !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::InvalidArgument("MINE batch must be >= 2 and ema_decay in (0, 1)".into()));
    }
    let k = ds.k();
    let dims = [ds.obs_dim() + 2 + k, cfg.hidden, 1];
    let net = MlpNet::new(&dims, cfg.activation, &mut seed::stage_rng(seed, "mine-init", 0))?;
    let mut est = MineEstimator::from_net(net, k, ds.obs_dim(), ds.num_actions(), cfg.obs_scale)?;
    est.ema_decay = cfg.ema_decay;
    est.w_max = cfg.w_max;
    let mut adam = AdamState::new(&est.net, AdamConfig::with_lr(cfg.lr));
    let mut rng = seed::stage_rng(seed, "mine-batches", 0);
    let mut grads = GradBundle::zeros_like(&est.net);
    let b = cfg.batch as f64;
    let mut ema: Option<f64> = None;

    for it in 0..cfg.iterations {
        let joint = ds.sample_joint(cfg.batch, &mut rng)?;
        let zbar = ds.sample_marginal_styles(&joint, cfg.marginal, &mut rng)?;
        let marg_inputs: Vec<Vec<f64>> = joint
            .iter()
            .zip(&zbar)
            .map(|(s, &z)| est.encode(s.obs, s.action, z))
            .collect();
        let t_marg = marg_inputs
            .iter()
            .map(|x| est.net.forward(x).map(|y| y[0]))
            .collect::<Result<Vec<f64>>>()?;
        let lme = nn::log_mean_exp(&t_marg);
        let batch_mean_exp = lme.exp();
        let denom = match ema {
            None => batch_mean_exp,
            Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * batch_mean_exp,
        };
        if !denom.is_finite() || denom <= 0.0 {
            return Err(Error::Diverged {
                stage: "mine iteration",
                index: it,
                reason: format!("moving-average denominator {denom}"),
            });
        }
        ema = Some(denom);

        // Minimize -bound.
        grads.reset();
        let mut t_joint = 0.0;
        for s in &joint {
            t_joint += est
                .net
                .accumulate_scalar(&est.encode(s.obs, s.action, s.style), -1.0 / b, &mut grads)?;
        }
        for (x, &t) in marg_inputs.iter().zip(&t_marg) {
            est.net.accumulate_scalar(x, t.exp() / (b * denom), &mut grads)?;
        }
        let bound = t_joint / b - lme;
        if !bound.is_finite() {
            return Err(Error::Diverged {
                stage: "mine iteration",
                index: it,
                reason: "non-finite bound".into(),
            });
        }
        est.mi_history.push(bound);
        adam.step(&mut est.net, &grads).map_err(|e| Error::Diverged {
            stage: "mine iteration",
            index: it,
            reason: e.to_string(),
        })?;
    }
    est.ema_denominator = ema.unwrap_or(1.0);
    Ok(est)
}

/// Mean of `history` over consecutive windows of `window` iterations.
pub fn windowed_means(history: &[f64], window: usize) -> Vec<f64> {
    history
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}
