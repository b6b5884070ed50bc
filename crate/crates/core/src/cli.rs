//! The `stylebc` command-line pipeline.
//!
//! Every command is a function of the JSON run configuration plus explicit
//! flags. Stage outputs carry a JSON manifest with SHA-256 digests of their
//! inputs and outputs, so a report can be traced back to the exact dataset,
//! estimators and checkpoints it was computed from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{circle2d_quadrant_label, StyleDataset};
use crate::env::{Circle2D, NoiseConfig, StyleSpec, TRANSLATION_STEPS};
use crate::eval::{build_report, CellPaths, EvalConfig, EvalContext, EvalReport, KlConfig, SeedRun};
use crate::mine::{train_mine, MineConfig, MineEstimator};
use crate::trainer::{load_policy, save_policy, train_mode, Policy, PolicyConfig, PolicyMode};
use crate::{seed, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "stylebc", version, about = "Style-conditioned behavioral cloning with PMI weighting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    /// Worker threads for within-stage parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Override a config field by dotted path, e.g. `mine.iterations=500`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert demonstrations.
    Gen,
    /// Train a MINE estimator on the dataset.
    TrainMine {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Seed index within the run.
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Train one policy.
    TrainPolicy {
        /// bc, cond_bc, cbc_separate or bc_pmi.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Estimator sidecar (`mine.json`), required for bc_pmi.
        #[arg(long)]
        estimator: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Evaluate policies and write metrics.csv and report.json.
    Eval {
        /// Policy sidecars; when absent every trained seed directory is used.
        #[arg(long)]
        policy: Vec<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Render SVG figures from a report and MI curves.
    Plot {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long = "mi-curve")]
        mi_curve: Vec<PathBuf>,
    },
    /// Run the whole pipeline.
    Repro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseLevels {
    pub action_angle_sigma: f64,
    pub position_sigma: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        let d = NoiseConfig::default();
        Self {
            action_angle_sigma: d.action_angle_sigma,
            position_sigma: d.position_sigma,
        }
    }
}

impl NoiseLevels {
    pub fn with_seed(self, seed: u64) -> NoiseConfig {
        NoiseConfig {
            action_angle_sigma: self.action_angle_sigma,
            position_sigma: self.position_sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub speed: f64,
    pub headings_deg: Vec<f64>,
    pub angular_velocities_deg: Vec<f64>,
    pub translation_steps: usize,
    pub demo_noise: NoiseLevels,
    /// Environment noise during policy rollouts.
    pub eval_noise: NoiseLevels,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            speed: crate::env::DEFAULT_SPEED,
            headings_deg: vec![45.0, 135.0, 225.0, 315.0],
            angular_velocities_deg: vec![2.0, -2.0, 3.0, -3.0],
            translation_steps: TRANSLATION_STEPS,
            demo_noise: NoiseLevels::default(),
            eval_noise: NoiseLevels::default(),
        }
    }
}

impl EnvConfig {
    pub fn env(&self) -> Circle2D {
        Circle2D { speed: self.speed }
    }

    pub fn specs(&self) -> Result<Vec<StyleSpec>> {
        if self.headings_deg.len() != self.angular_velocities_deg.len() || self.headings_deg.len() < 2 {
            return Err(Error::Usage(
                "env.headings_deg and env.angular_velocities_deg need the same length, at least 2".into(),
            ));
        }
        let specs: Vec<StyleSpec> = self
            .headings_deg
            .iter()
            .zip(&self.angular_velocities_deg)
            .enumerate()
            .map(|(i, (h, w))| StyleSpec {
                style_id: i,
                translation_heading: h.to_radians(),
                angular_velocity: w.to_radians(),
                translation_steps: self.translation_steps,
            })
            .collect();
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub episodes_per_style: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { episodes_per_style: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeConfigs {
    /// Modes trained and evaluated by `repro`, in report order.
    pub modes: Vec<PolicyMode>,
    pub bc: PolicyConfig,
    pub cond_bc: PolicyConfig,
    pub cbc_separate: PolicyConfig,
    pub bc_pmi: PolicyConfig,
}

impl Default for ModeConfigs {
    fn default() -> Self {
        Self {
            modes: PolicyMode::ALL.to_vec(),
            bc: PolicyConfig::default(),
            cond_bc: PolicyConfig::default(),
            cbc_separate: PolicyConfig::default(),
            bc_pmi: PolicyConfig::default(),
        }
    }
}

impl ModeConfigs {
    pub fn get(&self, mode: PolicyMode) -> &PolicyConfig {
        match mode {
            PolicyMode::Bc => &self.bc,
            PolicyMode::CondBc => &self.cond_bc,
            PolicyMode::CbcSeparate => &self.cbc_separate,
            PolicyMode::BcPmi => &self.bc_pmi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPlan {
    pub seeds: usize,
    pub episodes: usize,
    pub greedy: bool,
    pub plot_episodes: usize,
    pub kl: KlConfig,
}

impl Default for EvalPlan {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            seeds: 5,
            episodes: d.episodes,
            greedy: d.greedy,
            plot_episodes: d.plot_episodes,
            kl: d.kl,
        }
    }
}

impl EvalPlan {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.episodes,
            kl: self.kl,
            greedy: self.greedy,
            plot_episodes: self.plot_episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub mine: MineConfig,
    pub policy: ModeConfigs,
    pub eval: EvalPlan,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: "circle2d".into(),
            seed: 0,
            env: EnvConfig::default(),
            dataset: DatasetConfig::default(),
            mine: MineConfig::default(),
            policy: ModeConfigs::default(),
            eval: EvalPlan::default(),
            out_dir: PathBuf::from("runs/circle2d"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Sets the field at a dotted path. The value is parsed as JSON and
    /// falls back to a plain string.
    pub fn set_path(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects PATH=VALUE, got `{assignment}`")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let mut node = &mut root;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(key))
                .ok_or_else(|| Error::Usage(format!("unknown config path `{path}`")))?;
        }
        *node = value;
        *self = serde_json::from_value(root).map_err(|e| Error::Usage(format!("--set {path}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.specs()?;
        if self.dataset.episodes_per_style == 0 {
            return Err(Error::Usage("dataset.episodes_per_style must be positive".into()));
        }
        if self.eval.seeds == 0 || self.eval.episodes == 0 {
            return Err(Error::Usage("eval.seeds and eval.episodes must be positive".into()));
        }
        if self.policy.modes.is_empty() {
            return Err(Error::Usage("policy.modes is empty".into()));
        }
        self.env.demo_noise.with_seed(0).validate()?;
        self.env.eval_noise.with_seed(0).validate()
    }

    pub fn dataset_seed(&self) -> u64 {
        seed::derive(self.seed, "dataset", 0)
    }

    /// Seed of training/evaluation run `index`.
    pub fn run_seed(&self, index: u64) -> u64 {
        seed::derive(self.seed, "run", index)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("dataset.sbds")
    }

    pub fn seed_dir(&self, index: u64) -> PathBuf {
        self.out_dir.join(format!("seed{index}"))
    }
}

/// Resolves the configuration from file, `--set` overrides and flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.set_path(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    /// File name → SHA-256 of each input.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: Value,
}

fn digests(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

fn write_manifest(
    path: &Path,
    stage: &str,
    cfg: &RunConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    details: Value,
) -> Result<Manifest> {
    let m = Manifest {
        stage: stage.into(),
        config_sha256: sha256_str(&cfg.to_json()?),
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
        details,
    };
    write_text(path, &(serde_json::to_string_pretty(&m)? + "\n"))?;
    Ok(m)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Refuses to clobber existing files unless `force` is set.
fn check_outputs(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Usage(format!(
            "{} already exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn log_stage(stage: &str, start: Instant) {
    eprintln!("[stylebc] {stage} done in {:.1}s", start.elapsed().as_secs_f64());
}

/// `gen`: writes `dataset.sbds` and `dataset.manifest.json`.
pub fn cmd_gen(cfg: &RunConfig, force: bool) -> Result<StyleDataset> {
    let path = cfg.dataset_path();
    let manifest = cfg.out_dir.join("dataset.manifest.json");
    check_outputs(&[path.clone(), manifest.clone()], force)?;
    ensure_dir(&cfg.out_dir)?;
    let start = Instant::now();
    let specs = cfg.env.specs()?;
    let noise = cfg.env.demo_noise.with_seed(cfg.dataset_seed());
    let trajs = cfg.env.env().generate_demos(&specs, cfg.dataset.episodes_per_style, &noise)?;
    let ds = StyleDataset::circle2d(trajs, specs.len())?;
    ds.save(&path)?;
    write_text(&cfg.out_dir.join("config.json"), &cfg.to_json()?)?;
    write_manifest(
        &manifest,
        "gen",
        cfg,
        &[],
        &[path],
        serde_json::json!({
            "samples": ds.len(),
            "trajectories": ds.trajectories().len(),
            "style_counts": ds.style_counts(),
            "prior": ds.style_prior()?,
            "noise_seed": noise.seed,
        }),
    )?;
    log_stage("gen", start);
    Ok(ds)
}

/// `train-mine`: writes `mine.sbnn`, `mine.json`, `mi_curve.csv` and a
/// manifest under the seed directory.
pub fn cmd_train_mine(cfg: &RunConfig, dataset: &Path, index: u64, force: bool) -> Result<MineEstimator> {
    let dir = cfg.seed_dir(index);
    let net = dir.join("mine.sbnn");
    let side = dir.join("mine.json");
    let curve = dir.join("mi_curve.csv");
    check_outputs(&[net.clone(), side.clone(), curve.clone()], force)?;
    let ds = StyleDataset::load(dataset)?;
    ensure_dir(&dir)?;
    let start = Instant::now();
    let mine_seed = seed::derive(cfg.run_seed(index), "mine", 0);
    let est = train_mine(&ds, &cfg.mine, mine_seed)?;
    est.save(&net, &side)?;
    write_text(&curve, &mi_curve_csv(&est.mi_history))?;
    write_manifest(
        &dir.join("mine.manifest.json"),
        "train-mine",
        cfg,
        &[dataset.to_path_buf()],
        &[net, side, curve],
        serde_json::json!({
            "seed": mine_seed,
            "final_bound": est.mi_history.last(),
        }),
    )?;
    log_stage("train-mine", start);
    Ok(est)
}

pub fn mi_curve_csv(history: &[f64]) -> String {
    let mut out = String::from("iteration,bound\n");
    for (i, v) in history.iter().enumerate() {
        let _ = writeln!(out, "{i},{v:.6}");
    }
    out
}

pub fn parse_mi_curve(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::format(path, format!("bad row `{l}`")))
        })
        .collect()
}

/// `train-policy`: writes `<mode>.sbnn` (or one file per style), its
/// sidecar and a manifest under the seed directory.
pub fn cmd_train_policy(
    cfg: &RunConfig,
    dataset: &Path,
    mode: PolicyMode,
    estimator: Option<&Path>,
    index: u64,
    force: bool,
) -> Result<Policy> {
    if mode == PolicyMode::BcPmi && estimator.is_none() {
        return Err(Error::Usage("bc_pmi needs --estimator".into()));
    }
    let dir = cfg.seed_dir(index);
    let side = dir.join(format!("{}.json", mode.name()));
    check_outputs(std::slice::from_ref(&side), force)?;
    let ds = StyleDataset::load(dataset)?;
    let est = match estimator {
        Some(p) => Some(MineEstimator::load(&p.with_extension("sbnn"), p)?),
        None => None,
    };
    ensure_dir(&dir)?;
    let start = Instant::now();
    let pcfg = cfg.policy.get(mode);
    let policy_seed = seed::derive(cfg.run_seed(index), "policy", 0);
    let policy = train_mode(&ds, mode, est.as_ref(), pcfg, policy_seed)?;
    save_policy(&policy, &dir, mode.name(), pcfg, policy_seed)?;
    let mut inputs = vec![dataset.to_path_buf()];
    if let Some(p) = estimator {
        inputs.push(p.with_extension("sbnn"));
        inputs.push(p.to_path_buf());
    }
    let mut outputs = vec![side];
    outputs.extend(policy_files(&policy, &dir, mode));
    write_manifest(
        &dir.join(format!("{}.manifest.json", mode.name())),
        "train-policy",
        cfg,
        &inputs,
        &outputs,
        serde_json::json!({ "mode": mode, "seed": policy_seed }),
    )?;
    log_stage(&format!("train-policy {}", mode.name()), start);
    Ok(policy)
}

fn policy_files(policy: &Policy, dir: &Path, mode: PolicyMode) -> Vec<PathBuf> {
    let n = policy.nets().len();
    if n == 1 {
        vec![dir.join(format!("{}.sbnn", mode.name()))]
    } else {
        (0..n).map(|z| dir.join(format!("{}_{z}.sbnn", mode.name()))).collect()
    }
}

/// Evaluates `runs` and writes `metrics.csv` and `report.json`.
pub fn evaluate_runs(
    cfg: &RunConfig,
    ds: &StyleDataset,
    runs: &[SeedRun],
    inputs: &[PathBuf],
    force: bool,
) -> Result<EvalReport> {
    let csv = cfg.out_dir.join("metrics.csv");
    let json = cfg.out_dir.join("report.json");
    check_outputs(&[csv.clone(), json.clone()], force)?;
    ensure_dir(&cfg.out_dir)?;
    let start = Instant::now();
    let specs = cfg.env.specs()?;
    let env = cfg.env.env();
    let labeler = circle2d_quadrant_label(&env, &specs)?;
    let ctx = EvalContext {
        env,
        specs: &specs,
        noise: cfg.env.eval_noise.with_seed(0),
        demos: ds,
        labeler: &labeler,
        cfg: cfg.eval.eval_config(),
    };
    let report = build_report(runs, &ctx)?;
    write_text(&csv, &report.table.to_csv())?;
    let doc = serde_json::json!({
        "experiment": cfg.experiment,
        "seeds": runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
        "inputs": digests(inputs)?,
        "table": report.table,
        "experts": report.experts,
        "rollouts": report.rollouts,
    });
    write_text(&json, &(serde_json::to_string(&doc)? + "\n"))?;
    log_stage("eval", start);
    Ok(report)
}

/// `eval`: explicit `--policy` sidecars form one run; otherwise every seed
/// directory is loaded.
pub fn cmd_eval(cfg: &RunConfig, dataset: &Path, policies: &[PathBuf], index: u64, force: bool) -> Result<EvalReport> {
    let ds = StyleDataset::load(dataset)?;
    let mut inputs = vec![dataset.to_path_buf()];
    let runs = if policies.is_empty() {
        (0..cfg.eval.seeds as u64)
            .map(|i| {
                let dir = cfg.seed_dir(i);
                let policies = cfg
                    .policy
                    .modes
                    .iter()
                    .map(|m| {
                        let side = dir.join(format!("{}.json", m.name()));
                        inputs.push(side.clone());
                        Ok((m.name().to_string(), load_policy(&side)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SeedRun {
                    seed: cfg.run_seed(i),
                    policies,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let policies = policies
            .iter()
            .map(|p| {
                inputs.push(p.clone());
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                Ok((name, load_policy(p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        vec![SeedRun {
            seed: cfg.run_seed(index),
            policies,
        }]
    };
    evaluate_runs(cfg, &ds, &runs, &inputs, force)
}

const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

fn polyline(points: &[[f64; 2]], tx: &dyn Fn([f64; 2]) -> (f64, f64)) -> String {
    let mut s = String::new();
    for (i, &p) in points.iter().enumerate() {
        let (x, y) = tx(p);
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s
}

/// Rollout bundles of one policy, one colour per style, over the dashed
/// noise-free expert paths.
pub fn render_policy_svg(policy: &str, cells: &[&CellPaths], experts: &[Vec<[f64; 2]>]) -> Result<String> {
    if cells.iter().all(|c| c.paths.is_empty()) {
        return Err(Error::InvalidArgument(format!("no rollouts to plot for `{policy}`")));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let all = cells
        .iter()
        .flat_map(|c| c.paths.iter())
        .chain(experts.iter())
        .flatten();
    for p in all {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9) * 1.1;
    let cx = (lo[0] + hi[0]) / 2.0;
    let cy = (lo[1] + hi[1]) / 2.0;
    let size = 480.0;
    let tx = move |p: [f64; 2]| {
        (
            (p[0] - cx) / span * size + size / 2.0,
            size / 2.0 - (p[1] - cy) / span * size,
        )
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{h}\" viewBox=\"0 0 {size} {h}\">",
        h = size + 24.0
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"8\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"14\">{policy}</text>",
        size + 18.0
    );
    for cell in cells {
        let color = PALETTE[cell.style % PALETTE.len()];
        for path in &cell.paths {
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-opacity=\"0.5\" stroke-width=\"1\" points=\"{}\"/>",
                polyline(path, &tx)
            );
        }
    }
    for path in experts {
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"black\" stroke-dasharray=\"4 3\" stroke-width=\"1.5\" points=\"{}\"/>",
            polyline(path, &tx)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// MI estimate per iteration, one line per curve.
pub fn render_curve_svg(curves: &[(String, Vec<f64>)]) -> Result<String> {
    let values: Vec<f64> = curves.iter().flat_map(|c| c.1.iter().copied()).collect();
    if values.is_empty() {
        return Err(Error::InvalidArgument("no MI values to plot".into()));
    }
    let n = curves.iter().map(|c| c.1.len()).max().unwrap_or(1).max(2);
    let ymin = values.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let ymax = values.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(ymin + 1e-9);
    let (w, h, m) = (640.0, 360.0, 40.0);
    let tx = |i: usize, v: f64| {
        (
            m + i as f64 / (n - 1) as f64 * (w - 2.0 * m),
            h - m - (v - ymin) / (ymax - ymin) * (h - 2.0 * m),
        )
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let (x0, y0) = tx(0, ymin);
    let (x1, y1) = tx(n - 1, ymax);
    let _ = writeln!(
        svg,
        "<polyline fill=\"none\" stroke=\"black\" points=\"{x0:.2},{y1:.2} {x0:.2},{y0:.2} {x1:.2},{y0:.2}\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"4\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{ymax:.3}</text>",
        y1 + 4.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"4\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{ymin:.3}</text>",
        y0 + 4.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">iteration {}</text>",
        x1,
        h - 10.0,
        n - 1
    );
    for (ci, (name, ys)) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let mut pts = String::new();
        for (i, &v) in ys.iter().enumerate() {
            let (x, y) = tx(i, v);
            let _ = write!(pts, "{}{x:.2},{y:.2}", if i > 0 { " " } else { "" });
        }
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{pts}\"><title>{name}</title></polyline>"
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// `plot`: one SVG per policy plus the expert layout and the MI curves.
pub fn cmd_plot(cfg: &RunConfig, report: &Path, mi_curves: &[PathBuf], force: bool) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(report).map_err(|e| Error::io(report, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::format(report, e.to_string()))?;
    let rollouts: Vec<CellPaths> = serde_json::from_value(doc.get("rollouts").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::format(report, e.to_string()))?;
    let experts: Vec<Vec<[f64; 2]>> = serde_json::from_value(doc.get("experts").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::format(report, e.to_string()))?;
    if rollouts.iter().all(|c| c.paths.is_empty()) {
        return Err(Error::InvalidArgument(format!("{} holds no rollouts", report.display())));
    }
    let dir = cfg.out_dir.join("plots");
    let mut policies: Vec<&str> = Vec::new();
    for c in &rollouts {
        if !policies.contains(&c.policy.as_str()) {
            policies.push(&c.policy);
        }
    }
    let mut rendered = Vec::new();
    for p in &policies {
        let cells: Vec<&CellPaths> = rollouts.iter().filter(|c| c.policy == *p).collect();
        rendered.push((dir.join(format!("{p}.svg")), render_policy_svg(p, &cells, &experts)?));
    }
    let expert_cells: Vec<CellPaths> = experts
        .iter()
        .enumerate()
        .map(|(z, path)| CellPaths {
            policy: "expert".into(),
            style: z,
            paths: vec![path.clone()],
        })
        .collect();
    let refs: Vec<&CellPaths> = expert_cells.iter().collect();
    rendered.push((dir.join("expert.svg"), render_policy_svg("expert (noise-free)", &refs, &[])?));
    if !mi_curves.is_empty() {
        let curves = mi_curves
            .iter()
            .map(|p| Ok((p.display().to_string(), parse_mi_curve(p)?)))
            .collect::<Result<Vec<_>>>()?;
        rendered.push((dir.join("mi_curve.svg"), render_curve_svg(&curves)?));
    }
    let paths: Vec<PathBuf> = rendered.iter().map(|r| r.0.clone()).collect();
    check_outputs(&paths, force)?;
    ensure_dir(&dir)?;
    for (path, svg) in &rendered {
        write_text(path, svg)?;
    }
    Ok(paths)
}

/// Result of a full pipeline run.
pub struct ReproOutcome {
    pub report: EvalReport,
    /// Last DV bound of each seed's estimator.
    pub final_bounds: Vec<f64>,
    pub summary: String,
}

/// `repro`: gen → per-seed MINE and policies → eval → plots → summary.md.
pub fn cmd_repro(cfg: &RunConfig, force: bool) -> Result<ReproOutcome> {
    let start = Instant::now();
    let summary_path = cfg.out_dir.join("summary.md");
    check_outputs(&[summary_path.clone(), cfg.dataset_path()], force)?;
    let dataset = cfg.dataset_path();
    cmd_gen(cfg, force)?;
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    let mut final_bounds = Vec::new();
    let mut inputs = vec![dataset.clone()];
    let needs_mine = cfg.policy.modes.contains(&PolicyMode::BcPmi);
    for i in 0..cfg.eval.seeds as u64 {
        let dir = cfg.seed_dir(i);
        let estimator = if needs_mine {
            let est = cmd_train_mine(cfg, &dataset, i, force)?;
            final_bounds.push(est.mi_history.last().copied().unwrap_or(f64::NAN));
            curves.push(dir.join("mi_curve.csv"));
            Some(dir.join("mine.json"))
        } else {
            None
        };
        let mut policies = Vec::new();
        for &mode in &cfg.policy.modes {
            let est = if mode == PolicyMode::BcPmi { estimator.as_deref() } else { None };
            let policy = cmd_train_policy(cfg, &dataset, mode, est, i, force)?;
            inputs.push(dir.join(format!("{}.json", mode.name())));
            inputs.extend(policy_files(&policy, &dir, mode));
            policies.push((mode.name().to_string(), policy));
        }
        runs.push(SeedRun {
            seed: cfg.run_seed(i),
            policies,
        });
    }
    let ds = StyleDataset::load(&dataset)?;
    let report = evaluate_runs(cfg, &ds, &runs, &inputs, force)?;
    cmd_plot(cfg, &cfg.out_dir.join("report.json"), &curves, force)?;

    let mut summary = format!(
        "# {}\n\nmaster seed {}, {} seeds, {} evaluation episodes per cell, mean ± std across seeds\n\n",
        cfg.experiment, cfg.seed, cfg.eval.seeds, cfg.eval.episodes
    );
    summary.push_str(&report.table.to_markdown());
    if !final_bounds.is_empty() {
        summary.push_str("\nFinal MINE bound per seed:");
        for b in &final_bounds {
            let _ = write!(summary, " {b:.4}");
        }
        summary.push('\n');
    }
    write_text(&summary_path, &summary)?;
    log_stage("repro", start);
    Ok(ReproOutcome {
        report,
        final_bounds,
        summary,
    })
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dataset = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| cfg.dataset_path());
    match &cli.command {
        Command::Gen => cmd_gen(cfg, cli.force).map(drop),
        Command::TrainMine { dataset: d, index } => cmd_train_mine(cfg, &dataset(d), *index, cli.force).map(drop),
        Command::TrainPolicy {
            mode,
            dataset: d,
            estimator,
            index,
        } => {
            let m = PolicyMode::parse(mode).ok_or_else(|| {
                Error::Usage(format!("unknown mode `{mode}`; expected bc, cond_bc, cbc_separate or bc_pmi"))
            })?;
            cmd_train_policy(cfg, &dataset(d), m, estimator.as_deref(), *index, cli.force).map(drop)
        }
        Command::Eval {
            policy,
            dataset: d,
            index,
        } => cmd_eval(cfg, &dataset(d), policy, *index, cli.force).map(drop),
        Command::Plot { report, mi_curve } => {
            let report = report.clone().unwrap_or_else(|| cfg.out_dir.join("report.json"));
            for p in cmd_plot(cfg, &report, mi_curve, cli.force)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Repro => {
            let out = cmd_repro(cfg, cli.force)?;
            print!("{}", out.summary);
            Ok(())
        }
    }
}

/// Runs a parsed command on a pool of `--threads` workers.
pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    let cfg = resolve_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    pool.install(|| dispatch(cli, &cfg))
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("stylebc: {e}");
            e.exit_code()
        }
    }
}
