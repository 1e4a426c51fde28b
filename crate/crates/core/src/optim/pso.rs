//! Global-best particle swarm with velocity clamping and boundary reflection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bounds, OptResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsoConfig {
    pub particles: usize,
    pub iters: usize,
    pub inertia: f64,
    pub c1: f64,
    pub c2: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            particles: 24,
            iters: 60,
            inertia: 0.72,
            c1: 1.49,
            c2: 1.49,
            seed: 0,
        }
    }
}

/// Velocities are clamped to this fraction of each dimension's range.
const V_CLAMP_FRACTION: f64 = 0.2;

pub fn pso_minimize(
    cost: &mut dyn FnMut(&[f64]) -> f64,
    bounds: &Bounds,
    cfg: &PsoConfig,
) -> OptResult {
    assert!(cfg.particles > 0 && cfg.iters > 0);
    let dim = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut evals = 0u64;

    let mut pos: Vec<Vec<f64>> = (0..cfg.particles)
        .map(|_| {
            (0..dim)
                .map(|i| rng.gen_range(bounds.lo[i]..=bounds.hi[i]))
                .collect()
        })
        .collect();
    let vmax: Vec<f64> = (0..dim).map(|i| V_CLAMP_FRACTION * bounds.range(i)).collect();
    let mut vel: Vec<Vec<f64>> = (0..cfg.particles)
        .map(|_| (0..dim).map(|i| rng.gen_range(-vmax[i]..=vmax[i])).collect())
        .collect();

    let mut pbest = pos.clone();
    let mut pbest_cost: Vec<f64> = pos
        .iter()
        .map(|x| {
            evals += 1;
            cost(x)
        })
        .collect();
    let (mut gbest_idx, _) = pbest_cost
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let mut gbest = pbest[gbest_idx].clone();
    let mut gbest_cost = pbest_cost[gbest_idx];

    let mut history = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        for p in 0..cfg.particles {
            for i in 0..dim {
                let r1: f64 = rng.gen();
                let r2: f64 = rng.gen();
                let v = cfg.inertia * vel[p][i]
                    + cfg.c1 * r1 * (pbest[p][i] - pos[p][i])
                    + cfg.c2 * r2 * (gbest[i] - pos[p][i]);
                vel[p][i] = v.clamp(-vmax[i], vmax[i]);
                pos[p][i] = bounds.reflect(i, pos[p][i] + vel[p][i]);
            }
            evals += 1;
            let c = cost(&pos[p]);
            if c < pbest_cost[p] {
                pbest_cost[p] = c;
                pbest[p] = pos[p].clone();
                if c < gbest_cost {
                    gbest_cost = c;
                    gbest = pos[p].clone();
                    gbest_idx = p;
                }
            }
        }
        history.push(gbest_cost);
    }
    let _ = gbest_idx;

    OptResult {
        best_x: gbest,
        best_cost: gbest_cost,
        history,
        evals,
        seed: cfg.seed,
    }
}
