//! Closed-form minimax facts checked on small discrete distributions.
//!
//! For a fixed generator the adversarial value function is maximized by
//! `d*(x) = p_data(x) / (p_data(x) + p_gen(x))`, and plugging `d*` back in
//! gives a criterion whose global minimum `-log 4` is reached exactly when
//! `p_gen = p_data`. This module evaluates those quantities on finite
//! supports so they can be verified by brute force. Logs are natural.

use std::f64::consts::LN_2;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Clamp applied to `d*` so `log d*` and `log(1 - d*)` stay finite.
pub const OPTIMAL_CLAMP: f64 = 1e-12;

/// `-log 4`, the criterion value at equilibrium.
pub const MINUS_LOG_4: f64 = -2.0 * LN_2;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Contract("empty support".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Contract("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Contract("weights must have positive mass".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    /// Random distribution on `k` points with weights uniform in `[lo, hi)`.
    pub fn random(k: usize, lo: f64, hi: f64, rng: &mut SplitMix64) -> Result<Self> {
        let w: Vec<f64> = (0..k).map(|_| lo + (hi - lo) * rng.uniform()).collect();
        Self::from_weights(&w)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            probs: order.iter().map(|&i| self.probs[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorTable {
    values: Vec<f64>,
}

impl DiscriminatorTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Contract(format!("discriminator value {v} outside (0, 1)")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            values: order.iter().map(|&i| self.values[i]).collect(),
        }
    }
}

fn same_support(p: &DiscreteDist, q: &DiscreteDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!(
            "support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `Σ p_data·log d + p_gen·log(1 − d)`.
pub fn value_function(p_data: &DiscreteDist, p_gen: &DiscreteDist, d: &DiscriminatorTable) -> Result<f64> {
    same_support(p_data, p_gen)?;
    if d.values.len() != p_data.len() {
        return Err(Error::Contract(format!(
            "discriminator has {} entries for a support of {}",
            d.values.len(),
            p_data.len()
        )));
    }
    Ok(p_data
        .probs
        .iter()
        .zip(&p_gen.probs)
        .zip(&d.values)
        .map(|((&p, &q), &dv)| p * dv.ln() + q * (1.0 - dv).ln())
        .sum())
}

pub fn optimal_discriminator(p_data: &DiscreteDist, p_gen: &DiscreteDist) -> Result<DiscriminatorTable> {
    same_support(p_data, p_gen)?;
    let mut values = Vec::with_capacity(p_data.len());
    for (k, (&p, &q)) in p_data.probs.iter().zip(&p_gen.probs).enumerate() {
        if p + q <= 0.0 {
            return Err(Error::Contract(format!("no probability mass at support point {k}")));
        }
        values.push((p / (p + q)).clamp(OPTIMAL_CLAMP, 1.0 - OPTIMAL_CLAMP));
    }
    DiscriminatorTable::new(values)
}

/// Value of the game under the optimal discriminator.
pub fn c_of_g(p_data: &DiscreteDist, p_gen: &DiscreteDist) -> Result<f64> {
    value_function(p_data, p_gen, &optimal_discriminator(p_data, p_gen)?)
}

/// The same criterion through the explicit two-sum formula, with
/// `0 · log 0 = 0`.
pub fn c_of_g_explicit(p_data: &DiscreteDist, p_gen: &DiscreteDist) -> Result<f64> {
    same_support(p_data, p_gen)?;
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * y.ln() };
    Ok(p_data
        .probs
        .iter()
        .zip(&p_gen.probs)
        .map(|(&p, &q)| xlogy(p, p / (p + q)) + xlogy(q, q / (p + q)))
        .sum())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gradient ascent on the value function over logits `θ`, `d = σ(θ)`,
/// starting from `d ≡ 1/2`. Returns the table after every step
/// (`steps` entries).
pub fn gradient_ascent_trajectory(
    p_data: &DiscreteDist,
    p_gen: &DiscreteDist,
    steps: usize,
    lr: f64,
) -> Result<Vec<DiscriminatorTable>> {
    same_support(p_data, p_gen)?;
    if steps == 0 {
        return Err(Error::Contract("gradient ascent needs at least one step".into()));
    }
    let mut logits = vec![0.0f64; p_data.len()];
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        for ((theta, &p), &q) in logits.iter_mut().zip(&p_data.probs).zip(&p_gen.probs) {
            let d = sigmoid(*theta);
            // ∂/∂θ [p log σ(θ) + q log(1 − σ(θ))]
            *theta += lr * (p * (1.0 - d) - q * d);
        }
        let values = logits
            .iter()
            .map(|&t| sigmoid(t).clamp(OPTIMAL_CLAMP, 1.0 - OPTIMAL_CLAMP))
            .collect();
        out.push(DiscriminatorTable::new(values)?);
    }
    Ok(out)
}

pub fn gradient_ascent_d(p_data: &DiscreteDist, p_gen: &DiscreteDist, steps: usize, lr: f64) -> Result<DiscriminatorTable> {
    let mut traj = gradient_ascent_trajectory(p_data, p_gen, steps, lr)?;
    Ok(traj.pop().expect("steps >= 1"))
}

/// Max-norm distance between two tables.
pub fn linf(a: &DiscriminatorTable, b: &DiscriminatorTable) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Function computing a candidate optimal discriminator; swapped out by the
/// mutation tests.
pub type OptimalFn<'a> = &'a dyn Fn(&DiscreteDist, &DiscreteDist) -> Result<DiscriminatorTable>;

#[derive(Debug, Clone, Copy)]
pub struct TheoryCheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Random discriminators each candidate must beat per trial.
    pub perturbations: usize,
    pub max_support: usize,
    pub ascent_steps: usize,
    pub ascent_lr: f64,
    pub ascent_tolerance: f64,
}

impl Default for TheoryCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            perturbations: 100,
            max_support: 16,
            ascent_steps: 2000,
            ascent_lr: 0.1,
            ascent_tolerance: 0.01,
        }
    }
}

/// One CSV row: the criterion for a random pair and its gap to `-log 4`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub c_of_g: f64,
    pub gap_to_minus_log4: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub rows: Vec<TrialRow>,
    pub checks: Vec<CheckOutcome>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the equilibrium, optimality and learned-vs-analytic checks over
/// `trials` random distribution pairs using `optimal` as the candidate
/// closed form.
///
/// Pairs for the gradient-ascent check use weights in `[0.5, 1.5)` so every
/// support point carries enough mass for plain ascent to converge within the
/// step budget; the other checks use weights in `(0, 1]`.
pub fn run_checks(cfg: &TheoryCheckConfig, optimal: OptimalFn<'_>) -> Result<TheoryReport> {
    let mut rng = SplitMix64::new(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.trials);
    let (mut worst_gap, mut worst_eq, mut worst_ascent) = (f64::INFINITY, 0.0f64, 0.0f64);
    let mut beaten = 0usize;
    let mut first_beaten = None;

    for trial in 0..cfg.trials {
        let k = 2 + rng.below(cfg.max_support.max(2) - 1);
        let p = DiscreteDist::random(k, 1e-3, 1.0, &mut rng)?;
        let q = DiscreteDist::random(k, 1e-3, 1.0, &mut rng)?;

        let d_star = optimal(&p, &q)?;
        let c = value_function(&p, &q, &d_star)?;
        let gap = c - MINUS_LOG_4;
        worst_gap = worst_gap.min(gap);
        rows.push(TrialRow {
            trial,
            c_of_g: c,
            gap_to_minus_log4: gap,
        });

        let at_equilibrium = value_function(&p, &p, &optimal(&p, &p)?)?;
        worst_eq = worst_eq.max((at_equilibrium - MINUS_LOG_4).abs());

        for _ in 0..cfg.perturbations {
            let values = d_star
                .values()
                .iter()
                .map(|&v| {
                    let logit = (v / (1.0 - v)).ln() + (rng.uniform() - 0.5) * 4.0;
                    sigmoid(logit).clamp(OPTIMAL_CLAMP, 1.0 - OPTIMAL_CLAMP)
                })
                .collect();
            let d = DiscriminatorTable::new(values)?;
            if value_function(&p, &q, &d)? > c + 1e-12 {
                beaten += 1;
                first_beaten.get_or_insert(trial);
            }
        }

        let pa = DiscreteDist::random(k.min(8).max(2), 0.5, 1.5, &mut rng)?;
        let qa = DiscreteDist::random(pa.len(), 0.5, 1.5, &mut rng)?;
        let learned = gradient_ascent_d(&pa, &qa, cfg.ascent_steps, cfg.ascent_lr)?;
        worst_ascent = worst_ascent.max(linf(&learned, &optimal(&pa, &qa)?));
    }

    let none = cfg.trials == 0;
    let checks = vec![
        CheckOutcome {
            name: "criterion bounded below by -log 4",
            passed: none || worst_gap >= -1e-12,
            detail: format!("smallest gap {worst_gap:.3e}"),
        },
        CheckOutcome {
            name: "criterion equals -log 4 at p_gen = p_data",
            passed: none || worst_eq <= 1e-9,
            detail: format!("largest deviation {worst_eq:.3e}"),
        },
        CheckOutcome {
            name: "closed-form discriminator beats perturbations",
            passed: beaten == 0,
            detail: match first_beaten {
                None => format!("{} perturbations per trial, none better", cfg.perturbations),
                Some(t) => format!("{beaten} better perturbations (first in trial {t})"),
            },
        },
        CheckOutcome {
            name: "gradient ascent matches closed form",
            passed: none || worst_ascent <= cfg.ascent_tolerance,
            detail: format!("largest L-inf distance {worst_ascent:.3e}"),
        },
    ];
    Ok(TheoryReport { rows, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> DiscreteDist {
        DiscreteDist::new(p.to_vec()).unwrap()
    }

    #[test]
    fn constant_half_discriminator() {
        let d = DiscriminatorTable::new(vec![0.5; 3]).unwrap();
        let v = value_function(&dist(&[0.2, 0.3, 0.5]), &dist(&[0.6, 0.3, 0.1]), &d).unwrap();
        assert!((v - 0.25f64.ln()).abs() < 1e-15);
        assert!((v + 1.386_294_4).abs() < 1e-7);
    }

    #[test]
    fn single_point_value() {
        let d = DiscriminatorTable::new(vec![0.9]).unwrap();
        let v = value_function(&dist(&[1.0]), &dist(&[1.0]), &d).unwrap();
        assert!((v - (0.9f64.ln() + 0.1f64.ln())).abs() < 1e-15);
        assert!((v + 2.4079).abs() < 1e-4);
    }

    #[test]
    fn value_permutation_invariant() {
        let p = dist(&[0.1, 0.2, 0.7]);
        let q = dist(&[0.5, 0.25, 0.25]);
        let d = DiscriminatorTable::new(vec![0.3, 0.6, 0.8]).unwrap();
        let order = [2, 0, 1];
        let a = value_function(&p, &q, &d).unwrap();
        let b = value_function(&p.permuted(&order), &q.permuted(&order), &d.permuted(&order)).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn optimal_values() {
        let p = dist(&[0.25, 0.75]);
        assert!(optimal_discriminator(&p, &p).unwrap().values().iter().all(|&v| v == 0.5));
        let d = optimal_discriminator(&dist(&[0.8, 0.2]), &dist(&[0.4, 0.6])).unwrap();
        assert!((d.values()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.values()[1] - 0.25).abs() < 1e-15);
        assert!(optimal_discriminator(&dist(&[1.0, 0.0]), &dist(&[1.0, 0.0])).is_err());
        assert!(optimal_discriminator(&dist(&[1.0]), &dist(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn criterion_at_equilibrium_and_symmetry() {
        let p = dist(&[0.1, 0.6, 0.3]);
        assert!((c_of_g(&p, &p).unwrap() - MINUS_LOG_4).abs() < 1e-12);
        assert!((MINUS_LOG_4 + 1.386_294_4).abs() < 1e-7);
        let q = dist(&[0.3, 0.3, 0.4]);
        let explicit = c_of_g_explicit(&p, &q).unwrap();
        assert!((c_of_g(&p, &q).unwrap() - explicit).abs() < 1e-12);
        assert!((explicit - c_of_g_explicit(&q, &p).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn criterion_sweep() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..10_000 {
            let k = 2 + rng.below(15);
            let p = DiscreteDist::random(k, 0.0, 1.0, &mut rng).unwrap();
            let q = DiscreteDist::random(k, 0.0, 1.0, &mut rng).unwrap();
            let c = c_of_g_explicit(&p, &q).unwrap();
            assert!(c >= MINUS_LOG_4 - 1e-12);
            if (c - MINUS_LOG_4).abs() < 1e-9 {
                let diff = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-3, "equality without coincidence");
            }
        }
    }

    #[test]
    fn ascent_converges_and_is_monotone() {
        let mut rng = SplitMix64::new(2);
        let p = DiscreteDist::random(8, 0.5, 1.5, &mut rng).unwrap();
        let q = DiscreteDist::random(8, 0.5, 1.5, &mut rng).unwrap();
        let learned = gradient_ascent_d(&p, &q, 2000, 0.1).unwrap();
        assert!(linf(&learned, &optimal_discriminator(&p, &q).unwrap()) < 0.01);

        let same = gradient_ascent_d(&p, &p, 500, 0.1).unwrap();
        assert!(same.values().iter().all(|&v| (v - 0.5).abs() < 1e-12));

        let traj = gradient_ascent_trajectory(&p, &q, 300, 0.01).unwrap();
        let values: Vec<f64> = traj.iter().map(|d| value_function(&p, &q, d).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[1] >= w[0] - 1e-15));
        assert!(gradient_ascent_d(&p, &q, 0, 0.1).is_err());
    }

    #[test]
    fn checks_pass_and_catch_negated_optimum() {
        let cfg = TheoryCheckConfig {
            trials: 20,
            seed: 3,
            ..TheoryCheckConfig::default()
        };
        let good = run_checks(&cfg, &optimal_discriminator).unwrap();
        assert!(good.passed(), "{:?}", good.checks);
        assert_eq!(good.rows.len(), 20);

        let negated = |p: &DiscreteDist, q: &DiscreteDist| {
            let d = optimal_discriminator(p, q)?;
            DiscriminatorTable::new(d.values().iter().map(|v| 1.0 - v).collect())
        };
        let bad = run_checks(&cfg, &negated).unwrap();
        assert!(!bad.passed());

        let empty = run_checks(&TheoryCheckConfig { trials: 0, ..cfg }, &optimal_discriminator).unwrap();
        assert!(empty.passed() && empty.rows.is_empty());
    }
}
