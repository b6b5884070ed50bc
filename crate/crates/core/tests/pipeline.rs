use rand::Rng;

use stylebc::dataset::{circle2d_quadrant_label, MarginalStrategy, Provenance, Step, StyleDataset, Trajectory};
use stylebc::env::{Circle2D, DirectionAction, NoiseConfig, StyleSpec, HORIZON, NUM_BINS};
use stylebc::eval::{calibration, RolloutSet};
use stylebc::mine::{train_mine, MineConfig};
use stylebc::seed;

fn demos(episodes: usize) -> StyleDataset {
    let env = Circle2D::default();
    let specs = StyleSpec::default_styles();
    let noise = NoiseConfig {
        seed: 17,
        ..NoiseConfig::default()
    };
    let trajs = env.generate_demos(&specs, episodes, &noise).unwrap();
    StyleDataset::circle2d(trajs, specs.len()).unwrap()
}

/// Every sample becomes its own one-step trajectory with a label drawn
/// uniformly at random, so `(s, a)` and `z` are independent.
fn shuffled_labels(ds: &StyleDataset, seed: u64) -> StyleDataset {
    let mut rng = seed::rng(seed);
    let k = ds.k();
    let trajs = ds
        .samples()
        .enumerate()
        .map(|(i, s)| Trajectory {
            style_id: rng.random_range(0..k),
            steps: vec![Step {
                obs: s.obs.to_vec(),
                action: s.action as u16,
            }],
            provenance: Provenance {
                seed,
                episode: i as u32,
            },
        })
        .collect();
    StyleDataset::circle2d(trajs, k).unwrap()
}

#[test]
fn mine_finds_style_information_in_demos() {
    let ds = demos(20);
    let est = train_mine(&ds, &MineConfig::default(), 5).unwrap();
    let bound = est
        .estimate_bound(&ds, 50_000, MarginalStrategy::Shuffle, &mut seed::rng(6))
        .unwrap();
    assert!(bound > 0.5, "bound {bound}");
    assert!(bound < 4f64.ln() + 0.02, "bound {bound}");
}

#[test]
fn mine_on_shuffled_labels_is_near_zero() {
    let ds = shuffled_labels(&demos(20), 7);
    let est = train_mine(&ds, &MineConfig::default(), 8).unwrap();
    let bound = est
        .estimate_bound(&ds, 50_000, MarginalStrategy::Shuffle, &mut seed::rng(9))
        .unwrap();
    assert!(bound.abs() <= 0.05, "bound {bound}");
}

#[test]
fn mine_training_is_reproducible() {
    let ds = demos(2);
    let cfg = MineConfig {
        iterations: 200,
        ..MineConfig::default()
    };
    let a = train_mine(&ds, &cfg, 3).unwrap();
    let b = train_mine(&ds, &cfg, 3).unwrap();
    assert_eq!(a.sidecar(), b.sidecar());
    for s in ds.samples().step_by(97) {
        for z in 0..ds.k() {
            assert_eq!(
                a.statistic(s.obs, s.action, z).unwrap().to_bits(),
                b.statistic(s.obs, s.action, z).unwrap().to_bits()
            );
        }
    }
    let c = train_mine(&ds, &cfg, 4).unwrap();
    assert_ne!(a.sidecar().mi_history, c.sidecar().mi_history);
}

#[test]
fn uniform_random_walks_calibrate_near_chance() {
    let env = Circle2D::default();
    let specs = StyleSpec::default_styles();
    let labeler = circle2d_quadrant_label(&env, &specs).unwrap();
    let noise = NoiseConfig::noise_free(0);
    let mut rng = seed::rng(10);
    let mut total = 0.0;
    for z in 0..specs.len() {
        let trajectories = (0..200u32)
            .map(|e| {
                let mut state = env.reset();
                let mut steps = Vec::with_capacity(HORIZON);
                for _ in 0..HORIZON {
                    let action = DirectionAction::new(rng.random_range(0..NUM_BINS)).unwrap();
                    steps.push(Step {
                        obs: state.observation().to_vec(),
                        action: action.bin() as u16,
                    });
                    state = env.step(&state, action, &noise, &mut rng).unwrap();
                }
                Trajectory {
                    style_id: z,
                    steps,
                    provenance: Provenance { seed: 10, episode: e },
                }
            })
            .collect();
        let set = RolloutSet {
            trajectories,
            intended_style: z,
            policy_tag: "uniform".into(),
            seed: 10,
        };
        total += calibration(&set, &labeler);
    }
    let mean = total / specs.len() as f64;
    assert!((mean - 0.25).abs() < 0.06, "mean calibration {mean}");
}
