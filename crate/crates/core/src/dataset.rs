//! Demonstration storage and samplers.
//!
//! A [`StyleDataset`] keeps whole trajectories plus a flat `(trajectory,
//! step)` index so that joint `(s, a, z)` samples can be drawn uniformly.
//! Sample-level style counts give the empirical prior `p(z)`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, Circle2D, StyleSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub action: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub episode: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub style_id: usize,
    pub steps: Vec<Step>,
    pub provenance: Provenance,
}

impl Trajectory {
    /// Current position at every step: the last two observation entries.
    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.steps
            .iter()
            .map(|s| {
                let n = s.obs.len();
                [s.obs[n - 2], s.obs[n - 1]]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a> {
    pub obs: &'a [f64],
    pub action: usize,
    pub style: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginalStrategy {
    /// Permute the batch's own style column.
    #[default]
    Shuffle,
    /// Draw i.i.d. from the empirical prior.
    PriorDraw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleDataset {
    trajectories: Vec<Trajectory>,
    flat_index: Vec<(u32, u32)>,
    style_counts: Vec<usize>,
    k: usize,
    obs_dim: usize,
    num_actions: usize,
}

impl StyleDataset {
    pub fn new(trajectories: Vec<Trajectory>, k: usize, num_actions: usize) -> Result<Self> {
        if k == 0 || num_actions == 0 {
            return Err(Error::InvalidArgument("K and the action count must be positive".into()));
        }
        let obs_dim = trajectories
            .iter()
            .flat_map(|t| t.steps.first())
            .map(|s| s.obs.len())
            .next()
            .unwrap_or(0);
        let mut flat_index = Vec::new();
        let mut style_counts = vec![0; k];
        for (ti, t) in trajectories.iter().enumerate() {
            if t.style_id >= k {
                return Err(Error::LabelRange { label: t.style_id, k });
            }
            for (si, s) in t.steps.iter().enumerate() {
                if s.obs.len() != obs_dim {
                    return Err(Error::Shape {
                        expected: obs_dim,
                        got: s.obs.len(),
                    });
                }
                if s.action as usize >= num_actions {
                    return Err(Error::InvalidArgument(format!(
                        "action {} out of range [0, {num_actions})",
                        s.action
                    )));
                }
                flat_index.push((ti as u32, si as u32));
            }
            style_counts[t.style_id] += t.steps.len();
        }
        Ok(Self {
            trajectories,
            flat_index,
            style_counts,
            k,
            obs_dim,
            num_actions,
        })
    }

    /// Circle 2D layout: 10-dim observations, 72 direction bins.
    pub fn circle2d(trajectories: Vec<Trajectory>, k: usize) -> Result<Self> {
        let ds = Self::new(trajectories, k, env::NUM_BINS)?;
        if !ds.is_empty() && ds.obs_dim != env::OBS_DIM {
            return Err(Error::Shape {
                expected: env::OBS_DIM,
                got: ds.obs_dim,
            });
        }
        Ok(ds)
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

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn style_counts(&self) -> &[usize] {
        &self.style_counts
    }

    pub fn len(&self) -> usize {
        self.flat_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat_index.is_empty()
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        let (t, s) = self.flat_index[i];
        let traj = &self.trajectories[t as usize];
        let step = &traj.steps[s as usize];
        Sample {
            obs: &step.obs,
            action: step.action as usize,
            style: traj.style_id,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample<'_>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    /// Empirical sample-level prior over the K styles.
    pub fn style_prior(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let total = self.len() as f64;
        Ok(self.style_counts.iter().map(|&c| c as f64 / total).collect())
    }

    /// Uniform draws with replacement from the flat index.
    pub fn sample_joint<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Sample<'_>>> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch == 0 {
            return Err(Error::InvalidArgument("batch must be >= 1".into()));
        }
        Ok((0..batch)
            .map(|_| self.sample(rng.random_range(0..self.len())))
            .collect())
    }

    /// Styles `z̄` paired with the joint batch's `(s, a)` to sample the
    /// product of marginals.
    pub fn sample_marginal_styles<R: Rng + ?Sized>(
        &self,
        joint: &[Sample<'_>],
        strategy: MarginalStrategy,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        match strategy {
            MarginalStrategy::Shuffle => {
                let mut z: Vec<usize> = joint.iter().map(|s| s.style).collect();
                z.shuffle(rng);
                Ok(z)
            }
            MarginalStrategy::PriorDraw => {
                let prior = self.style_prior()?;
                Ok(joint.iter().map(|_| draw_categorical(&prior, rng)).collect())
            }
        }
    }

    /// Relabels every trajectory with `f` and recomputes the counts.
    pub fn apply_labeling(&self, f: &LabelingFn) -> Result<StyleDataset> {
        let mut trajectories = self.trajectories.clone();
        for t in &mut trajectories {
            let label = f.label(t);
            if label >= self.k {
                return Err(Error::LabelRange { label, k: self.k });
            }
            t.style_id = label;
        }
        Self::new(trajectories, self.k, self.num_actions).map(|mut ds| {
            ds.obs_dim = self.obs_dim;
            ds
        })
    }

    /// Trajectories carrying style `z`.
    pub fn trajectories_of(&self, z: usize) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(move |t| t.style_id == z)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w, path)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f), path)
    }

    /// Writes the `SBDS` format: magic, version `u32`, K `u32`, trajectory
    /// count `u32`, then per trajectory style `u32`, step count `u32`,
    /// provenance `(u64, u32)` and steps as 10 x `f64` + `u16`, little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W, origin: &Path) -> Result<()> {
        if !self.is_empty() && (self.obs_dim != env::OBS_DIM || self.num_actions != env::NUM_BINS) {
            return Err(Error::InvalidArgument(format!(
                "only the Circle 2D layout ({} obs, {} actions) can be serialized",
                env::OBS_DIM,
                env::NUM_BINS
            )));
        }
        let io = |e| Error::io(origin, e);
        w.write_all(DS_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(DS_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(self.k as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(self.trajectories.len() as u32).map_err(io)?;
        for t in &self.trajectories {
            w.write_u32::<LittleEndian>(t.style_id as u32).map_err(io)?;
            w.write_u32::<LittleEndian>(t.steps.len() as u32).map_err(io)?;
            w.write_u64::<LittleEndian>(t.provenance.seed).map_err(io)?;
            w.write_u32::<LittleEndian>(t.provenance.episode).map_err(io)?;
            for s in &t.steps {
                for &v in &s.obs {
                    w.write_f64::<LittleEndian>(v).map_err(io)?;
                }
                w.write_u16::<LittleEndian>(s.action).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let trunc = |_| Error::format(origin, "truncated dataset file");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != DS_MAGIC {
            return Err(Error::format(origin, "bad magic, not a dataset file"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != DS_VERSION {
            return Err(Error::format(origin, format!("unsupported dataset version {version}")));
        }
        let k = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut trajectories = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let style_id = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let seed = r.read_u64::<LittleEndian>().map_err(trunc)?;
            let episode = r.read_u32::<LittleEndian>().map_err(trunc)?;
            let mut steps = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let mut obs = vec![0.0; env::OBS_DIM];
                r.read_f64_into::<LittleEndian>(&mut obs).map_err(trunc)?;
                let action = r.read_u16::<LittleEndian>().map_err(trunc)?;
                steps.push(Step { obs, action });
            }
            trajectories.push(Trajectory {
                style_id,
                steps,
                provenance: Provenance { seed, episode },
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(origin, e))? != 0 {
            return Err(Error::format(origin, "trailing bytes after dataset"));
        }
        let ds = Self::circle2d(trajectories, k)?;
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(ds)
    }
}

const DS_MAGIC: &[u8; 4] = b"SBDS";
const DS_VERSION: u32 = 1;

pub(crate) fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` slightly below 1: take the last non-zero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// A named programmatic map from a trajectory to a style label.
#[derive(Clone)]
pub struct LabelingFn {
    pub name: String,
    f: Arc<dyn Fn(&Trajectory) -> usize + Send + Sync>,
}

impl fmt::Debug for LabelingFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LabelingFn").field("name", &self.name).finish()
    }
}

impl LabelingFn {
    pub fn new(name: impl Into<String>, f: impl Fn(&Trajectory) -> usize + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn label(&self, t: &Trajectory) -> usize {
        (self.f)(t)
    }

    /// Keeps every trajectory's current label.
    pub fn identity() -> Self {
        Self::new("identity", |t: &Trajectory| t.style_id)
    }

    pub fn constant(label: usize) -> Self {
        Self::new(format!("constant_{label}"), move |_: &Trajectory| label)
    }
}

/// Window over which the circling signature is measured.
const SIGNATURE_START: usize = 100;

/// Centroid sign and turning sign of a position sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CircleSignature {
    x_negative: bool,
    y_negative: bool,
    turns_left: bool,
}

fn signature(positions: &[[f64; 2]]) -> CircleSignature {
    let start = if positions.len() > SIGNATURE_START + 1 {
        SIGNATURE_START
    } else {
        0
    };
    let window = &positions[start..];
    let n = window.len().max(1) as f64;
    let cx = window.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = window.iter().map(|p| p[1]).sum::<f64>() / n;
    let headings: Vec<f64> = window
        .windows(2)
        .map(|w| (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]))
        .collect();
    let turn: f64 = headings
        .windows(2)
        .map(|h| {
            let d = h[1] - h[0];
            (d + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
        })
        .sum();
    CircleSignature {
        x_negative: cx < 0.0,
        y_negative: cy < 0.0,
        turns_left: turn > 0.0,
    }
}

/// Circle 2D labeler: the centroid quadrant over steps 100..300, refined by
/// the sign of the net heading change, matched against each style's
/// noise-free signature.
///
/// Quadrant bits score 2 each and the turn sign scores 1; the best-scoring
/// style wins, ties going to the lowest id.
pub fn circle2d_quadrant_label(env: &Circle2D, specs: &[StyleSpec]) -> Result<LabelingFn> {
    let signatures = specs
        .iter()
        .map(|s| Ok((s.style_id, signature(&env.reference_path(s)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelingFn::new("circle2d_quadrant_label", move |t: &Trajectory| {
        let sig = signature(&t.positions());
        let mut best = (0usize, i32::MIN);
        for &(id, s) in &signatures {
            let score = 2 * i32::from(s.x_negative == sig.x_negative)
                + 2 * i32::from(s.y_negative == sig.y_negative)
                + i32::from(s.turns_left == sig.turns_left);
            if score > best.1 || (score == best.1 && id < best.0) {
                best = (id, score);
            }
        }
        best.0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::NoiseConfig;
    use crate::seed;

    fn toy_traj(style: usize, len: usize, action: u16) -> Trajectory {
        Trajectory {
            style_id: style,
            steps: (0..len)
                .map(|i| Step {
                    obs: vec![i as f64; 10],
                    action,
                })
                .collect(),
            provenance: Provenance { seed: 0, episode: 0 },
        }
    }

    fn circle_demos(episodes: usize, noise: NoiseConfig) -> StyleDataset {
        let env = Circle2D::default();
        let demos = env
            .generate_demos(&StyleSpec::default_styles(), episodes, &noise)
            .unwrap();
        StyleDataset::circle2d(demos, 4).unwrap()
    }

    #[test]
    fn prior_from_counts() {
        let ds = circle_demos(2, NoiseConfig::default());
        assert_eq!(ds.style_prior().unwrap(), vec![0.25; 4]);

        let ds = StyleDataset::new(
            vec![toy_traj(0, 300, 1), toy_traj(1, 300, 1), toy_traj(2, 600, 1)],
            3,
            72,
        )
        .unwrap();
        let p = ds.style_prior().unwrap();
        assert_eq!(p, vec![0.25, 0.25, 0.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(ds.style_counts().iter().sum::<usize>(), ds.len());
    }

    #[test]
    fn empty_dataset_errors() {
        let ds = StyleDataset::new(vec![], 4, 72).unwrap();
        assert!(matches!(ds.style_prior(), Err(Error::EmptyDataset)));
        assert!(matches!(ds.sample_joint(4, &mut seed::rng(0)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn joint_samples_are_valid() {
        let ds = circle_demos(1, NoiseConfig::default());
        let batch = ds.sample_joint(128, &mut seed::rng(1)).unwrap();
        assert_eq!(batch.len(), 128);
        assert!(batch.iter().all(|s| s.action < 72 && s.obs.len() == 10));

        let single = StyleDataset::new(vec![toy_traj(2, 50, 4)], 4, 72).unwrap();
        let b = single.sample_joint(64, &mut seed::rng(2)).unwrap();
        assert!(b.iter().all(|s| s.style == 2));
    }

    #[test]
    fn joint_style_frequencies_are_balanced() {
        let ds = StyleDataset::new((0..4).map(|z| toy_traj(z, 100, 0)).collect(), 4, 72).unwrap();
        let mut rng = seed::rng(3);
        let mut counts = [0usize; 4];
        for _ in 0..100 {
            for s in ds.sample_joint(10_000, &mut rng).unwrap() {
                counts[s.style] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 1e6 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn shuffle_preserves_multiset_and_singleton() {
        let ds = StyleDataset::new(vec![toy_traj(0, 2, 0), toy_traj(1, 2, 0)], 2, 72).unwrap();
        let joint: Vec<_> = ds.samples().collect();
        let mut z = ds
            .sample_marginal_styles(&joint, MarginalStrategy::Shuffle, &mut seed::rng(4))
            .unwrap();
        z.sort();
        assert_eq!(z, vec![0, 0, 1, 1]);

        let one = &joint[2..3];
        let z = ds
            .sample_marginal_styles(one, MarginalStrategy::Shuffle, &mut seed::rng(5))
            .unwrap();
        assert_eq!(z, vec![1]);
    }

    #[test]
    fn prior_draw_matches_uniform_prior() {
        let ds = StyleDataset::new((0..4).map(|z| toy_traj(z, 10, 0)).collect(), 4, 72).unwrap();
        let joint: Vec<_> = ds.samples().collect();
        let mut rng = seed::rng(6);
        let mut counts = [0usize; 4];
        for _ in 0..2500 {
            for z in ds
                .sample_marginal_styles(&joint, MarginalStrategy::PriorDraw, &mut rng)
                .unwrap()
            {
                counts[z] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.015);
        }
    }

    #[test]
    fn labeling_identity_constant_and_range() {
        let ds = circle_demos(1, NoiseConfig::default());
        assert_eq!(ds.apply_labeling(&LabelingFn::identity()).unwrap(), ds);

        let c = ds.apply_labeling(&LabelingFn::constant(3)).unwrap();
        assert_eq!(c.style_prior().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);

        assert!(matches!(
            ds.apply_labeling(&LabelingFn::constant(4)),
            Err(Error::LabelRange { label: 4, k: 4 })
        ));
    }

    #[test]
    fn quadrant_label_recovers_noise_free_styles() {
        let env = Circle2D::default();
        let specs = StyleSpec::default_styles();
        let ds = circle_demos(3, NoiseConfig::noise_free(0));
        let f = circle2d_quadrant_label(&env, &specs).unwrap();
        for t in ds.trajectories() {
            assert_eq!(f.label(t), t.style_id);
        }
        let noisy = circle_demos(25, NoiseConfig::default());
        let agree = noisy
            .trajectories()
            .iter()
            .filter(|t| f.label(t) == t.style_id)
            .count();
        assert_eq!(agree, noisy.trajectories().len());
    }

    #[test]
    fn prior_after_labeling_matches_direct_count() {
        let ds = circle_demos(2, NoiseConfig::default());
        let f = LabelingFn::new("x_sign", |t: &Trajectory| {
            usize::from(t.positions().last().unwrap()[0] < 0.0)
        });
        let relabeled = ds.apply_labeling(&f).unwrap();
        let mut direct = [0usize; 4];
        for t in ds.trajectories() {
            direct[f.label(t)] += t.steps.len();
        }
        let prior = relabeled.style_prior().unwrap();
        for z in 0..4 {
            assert_eq!(prior[z], direct[z] as f64 / ds.len() as f64);
        }
    }

    #[test]
    fn save_load_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sbds");
        let ds = circle_demos(1, NoiseConfig::default());
        ds.save(&path).unwrap();
        let back = StyleDataset::load(&path).unwrap();
        assert_eq!(back, ds);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        assert!(matches!(
            StyleDataset::read_from(&bytes[..], &path),
            Err(Error::Format { .. })
        ));

        let bytes = std::fs::read(&path).unwrap();
        assert!(StyleDataset::read_from(&bytes[..bytes.len() - 1], &path).is_err());

        let empty = StyleDataset::new(vec![], 4, 72).unwrap();
        let mut buf = Vec::new();
        empty.write_to(&mut buf, &path).unwrap();
        assert!(matches!(
            StyleDataset::read_from(&buf[..], &path),
            Err(Error::EmptyDataset)
        ));
    }
}
