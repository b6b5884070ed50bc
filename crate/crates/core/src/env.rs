//! Circle 2D: a point agent moving at constant speed on the plane by picking
//! one of 72 headings. Each stylized expert translates along a fixed heading
//! for 75 steps, then turns at a constant angular velocity until the episode
//! ends at step 300.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Provenance, Step, Trajectory};
use crate::{seed, Error, Result};

pub const HORIZON: usize = 300;
pub const HISTORY_LEN: usize = 5;
pub const OBS_DIM: usize = 2 * HISTORY_LEN;
pub const NUM_BINS: usize = 72;
pub const TRANSLATION_STEPS: usize = 75;
pub const DEFAULT_SPEED: f64 = 0.1;

const BIN_WIDTH: f64 = 2.0 * PI / NUM_BINS as f64;

/// Heading of bin `bin` out of `num_bins` evenly spaced directions.
pub fn bin_heading(bin: usize, num_bins: usize) -> f64 {
    bin as f64 * (2.0 * PI / num_bins as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DirectionAction(u16);

impl DirectionAction {
    pub fn new(bin: usize) -> Result<Self> {
        if bin >= NUM_BINS {
            return Err(Error::InvalidArgument(format!(
                "direction bin {bin} out of range [0, {NUM_BINS})"
            )));
        }
        Ok(Self(bin as u16))
    }

    /// Nearest bin to an arbitrary angle.
    pub fn from_heading(angle: f64) -> Self {
        let bin = (angle / BIN_WIDTH).round().rem_euclid(NUM_BINS as f64) as u16;
        Self(bin % NUM_BINS as u16)
    }

    pub fn bin(self) -> usize {
        self.0 as usize
    }

    pub fn heading(self) -> f64 {
        bin_heading(self.bin(), NUM_BINS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub time_step: usize,
    /// Positions at `t-4 ..= t`, oldest first.
    pub history: [[f64; 2]; HISTORY_LEN],
}

impl EnvState {
    pub fn observation(&self) -> [f64; OBS_DIM] {
        let mut obs = [0.0; OBS_DIM];
        for (i, p) in self.history.iter().enumerate() {
            obs[2 * i] = p[0];
            obs[2 * i + 1] = p[1];
        }
        obs
    }

    pub fn is_terminal(&self) -> bool {
        self.time_step >= HORIZON
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: usize,
    /// Radians.
    pub translation_heading: f64,
    /// Radians per step, signed (positive turns counter-clockwise).
    pub angular_velocity: f64,
    pub translation_steps: usize,
}

impl StyleSpec {
    /// Four styles: one diagonal heading per quadrant, turning at
    /// +2, -2, +3 and -3 degrees per step.
    pub fn default_styles() -> Vec<StyleSpec> {
        let headings = [45.0_f64, 135.0, 225.0, 315.0];
        let omegas = [2.0_f64, -2.0, 3.0, -3.0];
        headings
            .iter()
            .zip(omegas)
            .enumerate()
            .map(|(i, (h, w))| StyleSpec {
                style_id: i,
                translation_heading: h.to_radians(),
                angular_velocity: w.to_radians(),
                translation_steps: TRANSLATION_STEPS,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.translation_steps >= HORIZON {
            return Err(Error::InvalidArgument(
                "translation phase must end before the horizon".into(),
            ));
        }
        let turn = self.angular_velocity.abs() * (HORIZON - self.translation_steps) as f64;
        if turn < 2.0 * PI - 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "style {} cannot complete a loop: total turn {turn:.3} rad",
                self.style_id
            )));
        }
        Ok(())
    }

    /// Noise-free target heading at time step `t`.
    pub fn target_heading(&self, t: usize) -> f64 {
        if t < self.translation_steps {
            self.translation_heading
        } else {
            let turned = (t + 1 - self.translation_steps) as f64;
            self.translation_heading + self.angular_velocity * turned
        }
    }

    /// Radius of the constant-turn polygon traced at `speed`.
    pub fn circle_radius(&self, speed: f64) -> f64 {
        speed / (2.0 * (self.angular_velocity.abs() / 2.0).sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Std of the Gaussian added to the expert heading, radians.
    pub action_angle_sigma: f64,
    /// Std of the isotropic Gaussian added to each transition.
    pub position_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            action_angle_sigma: 0.05,
            position_sigma: 0.01,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn noise_free(seed: u64) -> Self {
        Self {
            action_angle_sigma: 0.0,
            position_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s.is_finite() && s >= 0.0;
        if !ok(self.action_angle_sigma) || !ok(self.position_sigma) {
            return Err(Error::InvalidArgument("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).unwrap().sample(rng)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle2D {
    pub speed: f64,
}

impl Default for Circle2D {
    fn default() -> Self {
        Self {
            speed: DEFAULT_SPEED,
        }
    }
}

impl Circle2D {
    /// The initial state is fixed at the origin.
    pub fn reset(&self) -> EnvState {
        EnvState {
            position: [0.0, 0.0],
            time_step: 0,
            history: [[0.0, 0.0]; HISTORY_LEN],
        }
    }

    /// Moves along an arbitrary heading. [`Circle2D::step`] restricts this to
    /// the 72 bins.
    pub fn step_heading<R: Rng + ?Sized>(
        &self,
        state: &EnvState,
        heading: f64,
        noise: &NoiseConfig,
        rng: &mut R,
    ) -> Result<EnvState> {
        if state.is_terminal() {
            return Err(Error::EpisodeOver(state.time_step));
        }
        let dx = gaussian(noise.position_sigma, rng);
        let dy = gaussian(noise.position_sigma, rng);
        let position = [
            state.position[0] + self.speed * heading.cos() + dx,
            state.position[1] + self.speed * heading.sin() + dy,
        ];
        let mut history = state.history;
        history.rotate_left(1);
        history[HISTORY_LEN - 1] = position;
        Ok(EnvState {
            position,
            time_step: state.time_step + 1,
            history,
        })
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &EnvState,
        action: DirectionAction,
        noise: &NoiseConfig,
        rng: &mut R,
    ) -> Result<EnvState> {
        self.step_heading(state, action.heading(), noise, rng)
    }

    pub fn expert_action<R: Rng + ?Sized>(
        &self,
        spec: &StyleSpec,
        state: &EnvState,
        noise: &NoiseConfig,
        rng: &mut R,
    ) -> Result<DirectionAction> {
        if state.is_terminal() {
            return Err(Error::EpisodeOver(state.time_step));
        }
        let heading = spec.target_heading(state.time_step) + gaussian(noise.action_angle_sigma, rng);
        Ok(DirectionAction::from_heading(heading))
    }

    /// One expert episode, reproducible from `(noise.seed, style, episode)`.
    pub fn expert_episode(&self, spec: &StyleSpec, noise: &NoiseConfig, episode: u32) -> Result<Trajectory> {
        let sub_seed = seed::mix(&[noise.seed, spec.style_id as u64, u64::from(episode)]);
        let mut rng = seed::rng(sub_seed);
        let mut state = self.reset();
        let mut steps = Vec::with_capacity(HORIZON);
        while !state.is_terminal() {
            let action = self.expert_action(spec, &state, noise, &mut rng)?;
            steps.push(Step {
                obs: state.observation().to_vec(),
                action: action.bin() as u16,
            });
            state = self.step(&state, action, noise, &mut rng)?;
        }
        Ok(Trajectory {
            style_id: spec.style_id,
            steps,
            provenance: Provenance {
                seed: noise.seed,
                episode,
            },
        })
    }

    /// `episodes_per_style` trajectories per style, grouped by style.
    pub fn generate_demos(
        &self,
        specs: &[StyleSpec],
        episodes_per_style: usize,
        noise: &NoiseConfig,
    ) -> Result<Vec<Trajectory>> {
        if episodes_per_style == 0 {
            return Err(Error::InvalidArgument("episodes_per_style must be >= 1".into()));
        }
        noise.validate()?;
        for s in specs {
            s.validate()?;
        }
        let jobs: Vec<(usize, u32)> = (0..specs.len())
            .flat_map(|s| (0..episodes_per_style as u32).map(move |e| (s, e)))
            .collect();
        jobs.par_iter()
            .map(|&(s, e)| self.expert_episode(&specs[s], noise, e))
            .collect()
    }

    /// Noise-free expert positions for `spec`, one per time step.
    pub fn reference_path(&self, spec: &StyleSpec) -> Result<Vec<[f64; 2]>> {
        Ok(self
            .expert_episode(spec, &NoiseConfig::noise_free(0), 0)?
            .positions())
    }
}
