//! Genetic algorithm: tournament selection, uniform crossover, Gaussian
//! mutation with clamping, single-slot elitism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bounds, OptResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_p: f64,
    pub mutation_p: f64,
    /// Mutation sigma as a fraction of each dimension's range.
    pub mutation_sigma: f64,
    pub tournament: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 40,
            generations: 100,
            crossover_p: 0.8,
            mutation_p: 0.1,
            mutation_sigma: 0.05,
            tournament: 3,
            seed: 0,
        }
    }
}

pub fn ga_minimize(
    cost: &mut dyn FnMut(&[f64]) -> f64,
    bounds: &Bounds,
    cfg: &GaConfig,
) -> OptResult {
    assert!(cfg.population >= 2 && cfg.generations > 0 && cfg.tournament >= 1);
    let dim = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut evals = 0u64;

    let mut pop: Vec<Vec<f64>> = (0..cfg.population)
        .map(|_| {
            (0..dim)
                .map(|i| rng.gen_range(bounds.lo[i]..=bounds.hi[i]))
                .collect()
        })
        .collect();
    let mut fitness: Vec<f64> = pop
        .iter()
        .map(|x| {
            evals += 1;
            cost(x)
        })
        .collect();

    let best_of = |fitness: &[f64]| -> usize {
        fitness
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    };
    let mut best_idx = best_of(&fitness);
    let mut best = pop[best_idx].clone();
    let mut best_cost = fitness[best_idx];

    let mut history = Vec::with_capacity(cfg.generations);
    for _ in 0..cfg.generations {
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(cfg.population);
        next.push(best.clone()); // elitism

        while next.len() < cfg.population {
            let tournament = |rng: &mut ChaCha8Rng| -> usize {
                let mut winner = rng.gen_range(0..cfg.population);
                for _ in 1..cfg.tournament {
                    let challenger = rng.gen_range(0..cfg.population);
                    if fitness[challenger] < fitness[winner] {
                        winner = challenger;
                    }
                }
                winner
            };
            let a = tournament(&mut rng);
            let b = tournament(&mut rng);

            let mut child = pop[a].clone();
            if rng.gen::<f64>() < cfg.crossover_p {
                for i in 0..dim {
                    if rng.gen::<bool>() {
                        child[i] = pop[b][i];
                    }
                }
            }
            for i in 0..dim {
                if rng.gen::<f64>() < cfg.mutation_p {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen();
                    let gauss =
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    child[i] += gauss * cfg.mutation_sigma * bounds.range(i);
                }
            }
            bounds.clamp(&mut child);
            next.push(child);
        }

        pop = next;
        fitness = pop
            .iter()
            .map(|x| {
                evals += 1;
                cost(x)
            })
            .collect();
        best_idx = best_of(&fitness);
        if fitness[best_idx] < best_cost {
            best_cost = fitness[best_idx];
            best = pop[best_idx].clone();
        }
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
        let b = bounds(8);
        let cfg = GaConfig {
            seed: 13,
            ..GaConfig::default()
        };
        let r = ga_minimize(&mut |x| sphere(x), &b, &cfg);
        assert!(r.best_cost < 1e-2, "best = {}", r.best_cost);
        assert!(b.contains(&r.best_x));
    }

    #[test]
    fn eval_accounting_is_exact() {
        let b = bounds(2);
        let cfg = GaConfig {
            population: 10,
            generations: 5,
            seed: 1,
            ..GaConfig::default()
        };
        let mut n = 0u64;
        let r = ga_minimize(
            &mut |x| {
                n += 1;
                sphere(x)
            },
            &b,
            &cfg,
        );
        assert_eq!(r.evals, n);
        assert_eq!(r.evals, 10 + 10 * 5);
    }

    #[test]
    fn same_seed_is_reproducible() {
        let b = bounds(3);
        let cfg = GaConfig {
            population: 12,
            generations: 10,
            seed: 4,
            ..GaConfig::default()
        };
        let a = ga_minimize(&mut |x| sphere(x), &b, &cfg);
        let c = ga_minimize(&mut |x| sphere(x), &b, &cfg);
        assert_eq!(a, c);
    }
}
