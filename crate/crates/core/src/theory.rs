//! Closed-form robustness bounds and their Monte-Carlo checks.
//!
//! For `n x n` inputs, `k x k` crops and shifts of at most `delta` per axis,
//! with `L = n - k + 1` crop positions per axis:
//!
//! * adversarial robustness is at least `((L - 2 delta) / (L + 2 delta))^2`,
//! * consistency is at least `((L - delta) / (L + delta))^2`,
//!
//! with numerators clamped at zero. Both are evaluated in exact rational
//! arithmetic.

use std::fmt::Write as _;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::evaluation::{derive_seed, run_pool};
use crate::image::{LumaPlane, Mode};
use crate::scoring::{Engine, ScoreFnSpec};
use crate::selection::{RicsConfig, RicsSelector, ViewGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundParams {
    pub n: u64,
    pub k: u64,
    pub delta: u64,
}

impl BoundParams {
    pub fn new(n: u64, k: u64, delta: u64) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::InvalidConfig(format!("need 1 <= k <= n, got k={k} n={n}")));
        }
        if n >= 1 << 30 || delta >= 1 << 30 {
            return Err(Error::InvalidConfig("bound parameters too large".into()));
        }
        Ok(BoundParams { n, k, delta })
    }

    fn positions(&self) -> u64 {
        self.n - self.k + 1
    }
}

fn squared_ratio(positions: u64, spread: u64) -> Ratio<u64> {
    let num = positions.saturating_sub(spread);
    let r = Ratio::new(num, positions + spread);
    r * r
}

pub fn adv_robustness_bound_exact(p: &BoundParams) -> Ratio<u64> {
    squared_ratio(p.positions(), 2 * p.delta)
}

pub fn consistency_bound_exact(p: &BoundParams) -> Ratio<u64> {
    squared_ratio(p.positions(), p.delta)
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Guaranteed adversarial robustness.
pub fn adv_robustness_bound(p: &BoundParams) -> f64 {
    to_f64(adv_robustness_bound_exact(p))
}

/// Guaranteed consistency under a random shift.
pub fn consistency_bound(p: &BoundParams) -> f64 {
    to_f64(consistency_bound_exact(p))
}

/// Plot-ready CSV: one row per `(k, delta)` with both bounds.
pub fn bound_curve_csv(n: u64, ks: impl IntoIterator<Item = u64>, deltas: &[u64]) -> Result<String> {
    let mut out = String::from("n,k,delta,adv_robustness_bound,consistency_bound\n");
    for k in ks {
        for &d in deltas {
            let p = BoundParams::new(n, k, d)?;
            writeln!(out, "{n},{k},{d},{:.6},{:.6}", adv_robustness_bound(&p), consistency_bound(&p)).unwrap();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgreementScorer {
    /// The argmax falls uniformly on the union grid of all views.
    IdealUniform,
    /// RandHash selection on uniform noise.
    RandHash { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub successes: u64,
    pub trials: u64,
    pub rate: f64,
}

impl Estimate {
    fn new(successes: u64, trials: u64) -> Self {
        Estimate {
            successes,
            trials,
            rate: successes as f64 / trials as f64,
        }
    }

    /// Binomial standard error at probability `p`.
    pub fn standard_error(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Fraction of trials in which every view within the shift ball selects the
/// same crop.
pub fn simulate_crop_agreement(p: &BoundParams, trials: u64, scorer: AgreementScorer, seed: u64, workers: usize) -> Result<Estimate> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let (n, k, d) = (p.n as usize, p.k as usize, p.delta as usize);
    let hits: Vec<bool> = match scorer {
        AgreementScorer::IdealUniform => {
            let union = p.positions() + 2 * p.delta;
            let lo = 2 * p.delta;
            run_pool(workers, trials as usize, |t| {
                let mut rng = Pcg64::seed_from_u64(derive_seed(seed, t as u64));
                let (y, x) = (rng.gen_range(0..union), rng.gen_range(0..union));
                Ok(y >= lo && x >= lo && y + lo < union && x + lo < union)
            })?
        }
        AgreementScorer::RandHash { seed: filter_seed } => {
            let cfg = RicsConfig::new(k, ScoreFnSpec::rand_hash(filter_seed), Mode::Realistic).with_engine(Engine::Auto);
            cfg.validate(n, n)?;
            let selector = RicsSelector::new(cfg)?;
            let side = n + 2 * d;
            let rows = n - k + 1;
            run_pool(workers, trials as usize, |t| {
                let mut rng = Pcg64::seed_from_u64(derive_seed(seed, t as u64));
                let src = LumaPlane::from_fn(side, side, |_, _| rng.gen())?;
                let mut maps = selector.source(&src, None);
                let mut chosen = None;
                for dy in 0..=2 * d {
                    for dx in 0..=2 * d {
                        let geom = ViewGeom::Realistic { top: dy, left: dx, rows, cols: rows };
                        let w = maps.select(&geom)?.source_window;
                        match chosen {
                            None => chosen = Some(w),
                            Some(c) if c != w => return Ok(false),
                            _ => {}
                        }
                    }
                }
                Ok(true)
            })?
        }
    };
    Ok(Estimate::new(hits.iter().filter(|&&h| h).count() as u64, trials))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UniformityScorer {
    RandHash { seed: u64 },
    /// Every crop scores the same; the argmax is always the first position.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub cells: usize,
    pub trials: u64,
}

/// Pearson chi-square test of the global-argmax position of the score map
/// over IID uniform noise against the uniform distribution on positions.
pub fn argmax_uniformity(n: usize, k: usize, trials: u64, seed: u64, scorer: UniformityScorer, workers: usize) -> Result<ChiSquareResult> {
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("need 1 <= k <= n, got k={k} n={n}")));
    }
    let side = n - k + 1;
    let cells = side * side;
    let needed = 20 * cells;
    if (trials as usize) < needed {
        return Err(Error::InsufficientTrials {
            needed,
            got: trials as usize,
        });
    }
    let positions: Vec<usize> = match scorer {
        UniformityScorer::Constant => vec![0; trials as usize],
        UniformityScorer::RandHash { seed: filter_seed } => {
            let spec = ScoreFnSpec::rand_hash(filter_seed);
            let scorer = crate::scoring::Scorer::new(spec.scales()[0], k)?;
            run_pool(workers, trials as usize, |t| {
                let mut rng = Pcg64::seed_from_u64(derive_seed(seed, t as u64));
                let src = LumaPlane::from_fn(n, n, |_, _| rng.gen())?;
                let map = scorer.score_map(&src, Mode::Realistic, Engine::Auto)?;
                // First maximal cell in row-major order.
                let best = map
                    .scores()
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                Ok(best.0)
            })?
        }
    };
    let mut counts = vec![0u64; cells];
    for p in positions {
        counts[p] += 1;
    }
    if cells == 1 {
        return Ok(ChiSquareResult {
            statistic: 0.0,
            dof: 0,
            p_value: 1.0,
            cells,
            trials,
        });
    }
    let expected = trials as f64 / cells as f64;
    let statistic: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let dof = cells - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value: dist.sf(statistic),
        cells,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r4(x: f64) -> f64 {
        (x * 1e4).round() / 1e4
    }

    #[test]
    fn worked_values() {
        let p = BoundParams::new(224, 140, 1).unwrap();
        assert_eq!(adv_robustness_bound_exact(&p), Ratio::new(83 * 83, 87 * 87));
        assert_eq!(r4(adv_robustness_bound(&p)), 0.9102);
        assert_eq!(r4(consistency_bound(&p)), 0.9540);
        assert_eq!(r4(consistency_bound(&BoundParams::new(224, 140, 9).unwrap())), 0.6537);
        let worked = BoundParams::new(256, 150, 1).unwrap();
        assert_eq!(adv_robustness_bound_exact(&worked), Ratio::new(105 * 105, 109 * 109));
        assert!((adv_robustness_bound(&worked) - 0.9279).abs() < 1e-4);
        assert_eq!(adv_robustness_bound(&BoundParams::new(224, 140, 0).unwrap()), 1.0);
        assert_eq!(consistency_bound(&BoundParams::new(50, 50, 1).unwrap()), 0.0);
        assert_eq!(adv_robustness_bound(&BoundParams::new(100, 90, 20).unwrap()), 0.0);
        assert!(BoundParams::new(10, 11, 1).is_err());
        assert!(BoundParams::new(10, 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn bounds_are_monotone(n in 1u64..400, kf in 0.0f64..1.0, d in 0u64..30) {
            let k = 1 + ((n - 1) as f64 * kf) as u64;
            let p = BoundParams::new(n, k, d).unwrap();
            let adv = adv_robustness_bound_exact(&p);
            let con = consistency_bound_exact(&p);
            prop_assert!(adv <= con);
            prop_assert!(con <= Ratio::from_integer(1));
            let more_shift = BoundParams::new(n, k, d + 1).unwrap();
            prop_assert!(adv_robustness_bound_exact(&more_shift) <= adv);
            prop_assert!(consistency_bound_exact(&more_shift) <= con);
            if k < n {
                let bigger_crop = BoundParams::new(n, k + 1, d).unwrap();
                prop_assert!(adv_robustness_bound_exact(&bigger_crop) <= adv);
                prop_assert!(consistency_bound_exact(&bigger_crop) <= con);
            }
            let bigger_image = BoundParams::new(n + 1, k, d).unwrap();
            prop_assert!(adv_robustness_bound_exact(&bigger_image) >= adv);
            prop_assert!(consistency_bound_exact(&bigger_image) >= con);
        }
    }

    #[test]
    fn curve_csv_shape() {
        let csv = bound_curve_csv(224, [139, 140], &[0, 1]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "n,k,delta,adv_robustness_bound,consistency_bound");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[3], "224,140,0,1.000000,1.000000");
        assert!(lines[4].starts_with("224,140,1,0.910"));
    }

    #[test]
    fn ideal_uniform_converges_to_the_closed_form() {
        let p = BoundParams::new(64, 40, 2).unwrap();
        let est = simulate_crop_agreement(&p, 20_000, AgreementScorer::IdealUniform, 1, 2).unwrap();
        let exact = adv_robustness_bound(&p);
        assert!((est.rate - exact).abs() <= 3.0 * est.standard_error(exact), "{} vs {exact}", est.rate);
        let zero = BoundParams::new(64, 40, 0).unwrap();
        assert_eq!(simulate_crop_agreement(&zero, 100, AgreementScorer::IdealUniform, 1, 1).unwrap().rate, 1.0);
        assert!(simulate_crop_agreement(&p, 0, AgreementScorer::IdealUniform, 1, 1).is_err());
    }

    #[test]
    fn simulation_is_seeded_and_worker_independent() {
        let p = BoundParams::new(24, 12, 1).unwrap();
        let s = AgreementScorer::RandHash { seed: 3 };
        let a = simulate_crop_agreement(&p, 200, s, 9, 1).unwrap();
        assert_eq!(a, simulate_crop_agreement(&p, 200, s, 9, 3).unwrap());
        assert!(a.rate > 0.3 && a.rate < 1.0, "{}", a.rate);
    }

    #[test]
    fn uniformity_requires_enough_trials_and_rejects_constant() {
        assert!(matches!(
            argmax_uniformity(10, 5, 100, 1, UniformityScorer::RandHash { seed: 1 }, 1),
            Err(Error::InsufficientTrials { needed: 720, got: 100 })
        ));
        let c = argmax_uniformity(10, 5, 720, 1, UniformityScorer::Constant, 1).unwrap();
        assert!(c.p_value < 1e-12);
        let single = argmax_uniformity(8, 8, 20, 1, UniformityScorer::RandHash { seed: 1 }, 1).unwrap();
        assert_eq!((single.statistic, single.p_value), (0.0, 1.0));
    }

    #[test]
    fn randhash_argmax_looks_uniform_on_small_grids() {
        let r = argmax_uniformity(12, 8, 2_000, 4, UniformityScorer::RandHash { seed: 2 }, 2).unwrap();
        assert_eq!(r.cells, 25);
        assert!(r.p_value > 0.001, "{r:?}");
    }
}
