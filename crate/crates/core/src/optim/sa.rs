//! Simulated annealing with geometric cooling, Metropolis acceptance, and
//! temperature-scaled Gaussian steps reflected at the bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bounds, OptResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaConfig {
    /// Initial temperature in cost units; zero degenerates to greedy descent.
    pub t0: f64,
    /// Geometric cooling factor per step.
    pub cooling: f64,
    pub steps: usize,
    /// Step scale as a fraction of each dimension's range.
    pub step_scale: f64,
    pub seed: u64,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            t0: 1000.0,
            cooling: 0.995,
            steps: 4000,
            step_scale: 0.1,
            seed: 0,
        }
    }
}

pub fn sa_minimize(
    cost: &mut dyn FnMut(&[f64]) -> f64,
    bounds: &Bounds,
    cfg: &SaConfig,
) -> OptResult {
    assert!(cfg.steps > 0 && cfg.step_scale > 0.0);
    let dim = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut evals = 0u64;

    let mut x: Vec<f64> = (0..dim)
        .map(|i| rng.gen_range(bounds.lo[i]..=bounds.hi[i]))
        .collect();
    evals += 1;
    let mut fx = cost(&x);
    let mut best = x.clone();
    let mut best_cost = fx;

    let mut t = cfg.t0;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // Shrink the wander as the run cools so late steps refine locally.
        let progress = step as f64 / cfg.steps as f64;
        let scale = cfg.step_scale * (1.0 - 0.95 * progress);
        let mut cand = x.clone();
        for i in 0..dim {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            let gauss =
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            cand[i] = bounds.reflect(i, cand[i] + gauss * scale * bounds.range(i));
        }
        evals += 1;
        let fc = cost(&cand);
        let accept = if fc <= fx {
            true
        } else if t > 0.0 {
            let p = ((fx - fc) / t).exp();
            rng.gen::<f64>() < p
        } else {
            false
        };
        if accept {
            x = cand;
            fx = fc;
            if fx < best_cost {
                best_cost = fx;
                best = x.clone();
            }
        }
        t *= cfg.cooling;
        history.push(best_cost);
    }

    OptResult {
        best_x: best,
        best_cost,
        history,
        evals,
        seed: cfg.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::sphere;

    fn bounds(dim: usize) -> Bounds {
        let dims: Vec<(f64, f64, &str)> = (0..dim).map(|_| (-5.0, 5.0, "x")).collect();
        Bounds::new(&dims)
    }

    #[test]
    fn converges_on_sphere() {
        let b = bounds(4);
        let cfg = SaConfig {
            steps: 5000,
            seed: 5,
            ..SaConfig::default()
        };
        let r = sa_minimize(&mut |x| sphere(x), &b, &cfg);
        assert!(r.best_cost < 1e-2, "best = {}", r.best_cost);
        assert!(b.contains(&r.best_x));
        assert_eq!(r.evals, 5001);
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let b = bounds(3);
        let cfg = SaConfig {
            t0: 0.0,
            steps: 500,
            seed: 2,
            ..SaConfig::default()
        };
        let r = sa_minimize(&mut |x| sphere(x), &b, &cfg);
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn same_seed_is_reproducible() {
        let b = bounds(4);
        let cfg = SaConfig {
            steps: 300,
            seed: 7,
            ..SaConfig::default()
        };
        let a = sa_minimize(&mut |x| sphere(x), &b, &cfg);
        let c = sa_minimize(&mut |x| sphere(x), &b, &cfg);
        assert_eq!(a, c);
    }
}
