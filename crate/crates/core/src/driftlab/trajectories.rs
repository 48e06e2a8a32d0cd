use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::rng::{self, StreamRng};

/// How a user's latent state evolves between sessions. `step_std` and
/// `spread` are relative to the scale of the starting state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StateProcess {
    /// `s_{t+1} = s_t + step`, so order carries information.
    RandomWalk { step_std: f64 },
    /// `s_t = m_u + jitter`, so the best forecast is the user mean.
    Iid { spread: f64 },
}

impl Default for StateProcess {
    fn default() -> Self {
        StateProcess::RandomWalk { step_std: 0.25 }
    }
}

/// `coord_std` is the per-coordinate deviation of the starting state.
pub(crate) fn latent_states(process: StateProcess, dim: usize, len: usize, coord_std: f64, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let per = |x: f64| x * coord_std;
    let origin = rng::gaussian_vec(rng, dim, coord_std);
    match process {
        StateProcess::RandomWalk { step_std } => {
            let mut s = origin;
            (0..len)
                .map(|t| {
                    if t > 0 {
                        linalg::axpy(&mut s, 1.0, &rng::gaussian_vec(rng, dim, per(step_std)));
                    }
                    s.clone()
                })
                .collect()
        }
        StateProcess::Iid { spread } => (0..len).map(|_| linalg::add(&origin, &rng::gaussian_vec(rng, dim, per(spread)))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub dim: usize,
    pub users: usize,
    pub length: usize,
    pub process: StateProcess,
    /// Norm scale of the observation noise added before normalization.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { dim: 16, users: 400, length: 16, process: StateProcess::default(), noise_std: 0.5, seed: 0 }
    }
}

/// Unit-norm observed state trajectories, one per user.
pub fn gen_state_trajectories(config: &TrajectoryConfig) -> Vec<Vec<Vec<f64>>> {
    (0..config.users as u64)
        .map(|u| {
            let mut r = rng::labeled(config.seed, b"state-trajectory", u);
            let latent = latent_states(config.process, config.dim, config.length, 1.0 / (config.dim as f64).sqrt(), &mut r);
            latent
                .iter()
                .map(|s| {
                    let noise = rng::gaussian_vec(&mut r, config.dim, config.noise_std / (config.dim as f64).sqrt());
                    let x = linalg::add(s, &noise);
                    linalg::normalized(&x, 1e-12).unwrap_or_else(|| {
                        let mut e = vec![0.0; config.dim];
                        e[0] = 1.0;
                        e
                    })
                })
                .collect()
        })
        .collect()
}
