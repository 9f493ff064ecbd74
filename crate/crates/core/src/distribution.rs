//! Trip distribution: doubly-constrained gravity balancing, the
//! most-probable (entropy) distribution program, and the exponential modal
//! split.

use crate::error::{Error, Result};
use crate::programs::build_most_probable;
use crate::scalar::Real;
use crate::solver::{solve_calibration, SolverConfig};
use crate::table::Table2;

/// Balanced gravity distribution with its balancing factors.
#[derive(Debug, Clone)]
pub struct GravityResult<R> {
    pub trips: Table2<R>,
    pub a: Vec<R>,
    pub b: Vec<R>,
    pub iterations: usize,
}

fn check_margins<R: Real>(productions: &[R], attractions: &[R]) -> Result<()> {
    let o: R = productions.iter().copied().sum();
    let d: R = attractions.iter().copied().sum();
    if (o - d).abs() > R::of(1e-9) * o.abs().max(d.abs()).max(R::one()) {
        return Err(Error::UnbalancedMargins {
            production: o.to_f64().unwrap_or(f64::NAN),
            attraction: d.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// Iterative proportional fitting of `T_ij = A_i B_j O_i D_j exp(-beta c_ij)`
/// until both margins reproduce within `1e-10` relative.
pub fn gravity_balance<R: Real>(
    productions: &[R],
    attractions: &[R],
    costs: &Table2<R>,
    beta: R,
) -> Result<GravityResult<R>> {
    let n_i = productions.len();
    let n_j = attractions.len();
    if costs.n_rows() != n_i || costs.n_cols() != n_j {
        return Err(Error::InvalidParameter(
            "cost matrix does not match the margins".into(),
        ));
    }
    if beta < R::zero() {
        return Err(Error::InvalidParameter("beta must be nonnegative".into()));
    }
    check_margins(productions, attractions)?;
    let f = Table2::from_fn(n_i, n_j, |i, j| (-beta * costs.get(i, j)).exp());
    let mut a = vec![R::one(); n_i];
    let mut b = vec![R::one(); n_j];
    let tol = R::of(1e-10);
    let max_iter = 100_000;
    let mut iterations = 0;
    loop {
        iterations += 1;
        for i in 0..n_i {
            if productions[i] == R::zero() {
                a[i] = R::zero();
                continue;
            }
            let denom: R = (0..n_j)
                .map(|j| b[j] * attractions[j] * f.get(i, j))
                .sum();
            if !(denom > R::zero()) {
                return Err(Error::InfeasibleMargins(format!(
                    "origin row {i} has no reachable attraction mass"
                )));
            }
            a[i] = R::one() / denom;
        }
        for j in 0..n_j {
            if attractions[j] == R::zero() {
                b[j] = R::zero();
                continue;
            }
            let denom: R = (0..n_i)
                .map(|i| a[i] * productions[i] * f.get(i, j))
                .sum();
            if !(denom > R::zero()) {
                return Err(Error::InfeasibleMargins(format!(
                    "destination column {j} has no reachable production mass"
                )));
            }
            b[j] = R::one() / denom;
        }
        let trips = Table2::from_fn(n_i, n_j, |i, j| {
            a[i] * b[j] * productions[i] * attractions[j] * f.get(i, j)
        });
        let mut worst = R::zero();
        for i in 0..n_i {
            let err = (trips.row_sum(i) - productions[i]).abs()
                / productions[i].abs().max(R::one());
            worst = worst.max(err);
        }
        for j in 0..n_j {
            let err = (trips.col_sum(j) - attractions[j]).abs()
                / attractions[j].abs().max(R::one());
            worst = worst.max(err);
        }
        if worst < tol {
            return Ok(GravityResult {
                trips,
                a,
                b,
                iterations,
            });
        }
        if iterations >= max_iter {
            return Err(Error::NonConvergent {
                what: "gravity balancing".into(),
                residual: worst.to_f64().unwrap_or(f64::NAN),
                iterations,
            });
        }
    }
}

/// How the deterrence coefficient of the entropy program is pinned down.
#[derive(Debug, Clone, Copy)]
pub enum Deterrence<R> {
    /// The coefficient is known.
    BetaGiven(R),
    /// A total-cost budget is known; the coefficient is recovered as its
    /// dual by bisection (total cost is monotone decreasing in beta).
    Budget(R),
}

/// Most-probable trip distribution.
#[derive(Debug, Clone)]
pub struct MostProbable<R> {
    pub trips: Table2<R>,
    pub beta: R,
    /// Column-balance duals `mu_j`.
    pub column_duals: Vec<R>,
    pub objective: R,
    pub converged: bool,
}

fn solve_at_beta<R: Real>(
    productions: &[R],
    attractions: &[R],
    costs: &Table2<R>,
    beta: R,
    config: &SolverConfig<R>,
) -> Result<MostProbable<R>> {
    let program = build_most_probable(productions, attractions, costs, beta)?;
    let (sol, duals) = solve_calibration(&program, config)?;
    let n_j = attractions.len();
    let trips = Table2::from_fn(productions.len(), n_j, |i, j| sol.x[i * n_j + j]);
    Ok(MostProbable {
        trips,
        beta,
        column_duals: duals.column_duals,
        objective: sol.objective,
        converged: sol.converged,
    })
}

/// Solves the entropy-maximizing distribution by actual optimization (the
/// gravity/IPF closed form is kept separate as its oracle).
pub fn solve_most_probable<R: Real>(
    productions: &[R],
    attractions: &[R],
    costs: &Table2<R>,
    deterrence: Deterrence<R>,
    config: &SolverConfig<R>,
) -> Result<MostProbable<R>> {
    check_margins(productions, attractions)?;
    match deterrence {
        Deterrence::BetaGiven(beta) => {
            solve_at_beta(productions, attractions, costs, beta, config)
        }
        Deterrence::Budget(budget) => {
            let total_cost = |r: &MostProbable<R>| -> R {
                r.trips
                    .iter()
                    .map(|(i, j, t)| t * costs.get(i, j))
                    .sum()
            };
            let beta_max = R::of(1e3);
            let lo_sol = solve_at_beta(productions, attractions, costs, R::zero(), config)?;
            let hi_sol = solve_at_beta(productions, attractions, costs, beta_max, config)?;
            let c_max = total_cost(&lo_sol);
            let c_min = total_cost(&hi_sol);
            let tol = R::of(1e-6) * budget.abs().max(R::one());
            if budget > c_max + tol || budget < c_min - tol {
                return Err(Error::InfeasibleBudget {
                    budget: budget.to_f64().unwrap_or(f64::NAN),
                    min: c_min.to_f64().unwrap_or(f64::NAN),
                    max: c_max.to_f64().unwrap_or(f64::NAN),
                });
            }
            let (mut lo, mut hi) = (R::zero(), beta_max);
            let mut best = lo_sol;
            for _ in 0..200 {
                let mid = (lo + hi) / R::of(2.0);
                let sol = solve_at_beta(productions, attractions, costs, mid, config)?;
                let c = total_cost(&sol);
                best = sol;
                if (c - budget).abs() <= tol || (hi - lo) < R::of(1e-12) {
                    break;
                }
                if c > budget {
                    lo = mid; // spend too high: increase deterrence
                } else {
                    hi = mid;
                }
            }
            Ok(best)
        }
    }
}

/// Exponential modal split: `share_m = exp(-beta c_m) / sum exp(-beta c)`.
/// `beta = 0` splits uniformly.
pub fn multi_mode_split<R: Real>(costs: &[R], beta: R) -> Result<Vec<R>> {
    if costs.is_empty() {
        return Err(Error::EmptyChoiceSet);
    }
    if beta < R::zero() {
        return Err(Error::InvalidParameter("beta must be nonnegative".into()));
    }
    let lo = costs.iter().fold(R::infinity(), |a, &c| a.min(c));
    let terms: Vec<R> = costs.iter().map(|&c| (-beta * (c - lo)).exp()).collect();
    let total: R = terms.iter().copied().sum();
    Ok(terms.into_iter().map(|t| t / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::mnl_prob;
    use approx::assert_relative_eq;

    #[test]
    fn gravity_beta_zero_is_uniform() {
        let costs = Table2::from_rows(vec![vec![3.0, 9.0], vec![1.0, 2.0]]);
        let g = gravity_balance(&[1.0, 1.0], &[1.0, 1.0], &costs, 0.0).unwrap();
        for (_, _, t) in g.trips.iter() {
            assert_relative_eq!(t, 0.5, max_relative = 1e-10);
        }
    }

    #[test]
    fn gravity_two_by_two_frozen_values() {
        // independent IPF run at beta=1, c=[[1,2],[2,1]], unit margins
        let costs = Table2::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        let g = gravity_balance(&[1.0, 1.0], &[1.0, 1.0], &costs, 1.0).unwrap();
        assert_relative_eq!(g.trips.get(0, 0), 0.7310585786300049, max_relative = 1e-9);
        assert_relative_eq!(g.trips.get(0, 1), 0.26894142136999516, max_relative = 1e-9);
        assert_relative_eq!(g.trips.get(1, 0), 0.26894142136999516, max_relative = 1e-9);
        assert_relative_eq!(g.trips.get(1, 1), 0.7310585786300049, max_relative = 1e-9);
        for i in 0..2 {
            assert_relative_eq!(g.trips.row_sum(i), 1.0, epsilon = 1e-10);
            assert_relative_eq!(g.trips.col_sum(i), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn gravity_single_destination_forces_margin() {
        let costs = Table2::from_rows(vec![vec![2.0], vec![5.0]]);
        let g = gravity_balance(&[3.0, 4.0], &[7.0], &costs, 1.3).unwrap();
        assert_relative_eq!(g.trips.get(0, 0), 3.0, max_relative = 1e-10);
        assert_relative_eq!(g.trips.get(1, 0), 4.0, max_relative = 1e-10);
    }

    #[test]
    fn gravity_rejects_unbalanced_margins() {
        let costs = Table2::from_rows(vec![vec![1.0]]);
        assert!(matches!(
            gravity_balance(&[2.0], &[1.0], &costs, 0.5),
            Err(Error::UnbalancedMargins { .. })
        ));
    }

    #[test]
    fn most_probable_without_cost_constraint_is_equal_share() {
        // beta = 0: T_ij = O_i D_j / T
        let costs = Table2::from_rows(vec![vec![1.0, 4.0], vec![3.0, 2.0]]);
        let config = SolverConfig::default();
        let mp = solve_most_probable(
            &[6.0, 4.0],
            &[3.0, 7.0],
            &costs,
            Deterrence::BetaGiven(0.0),
            &config,
        )
        .unwrap();
        assert!(mp.converged);
        let total = 10.0;
        for (i, o) in [6.0, 4.0].iter().enumerate() {
            for (j, d) in [3.0, 7.0].iter().enumerate() {
                assert_relative_eq!(mp.trips.get(i, j), o * d / total, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn most_probable_matches_gravity_oracle() {
        let costs = Table2::from_rows(vec![
            vec![1.0, 2.0, 0.5],
            vec![2.0, 1.0, 1.5],
            vec![0.7, 1.2, 0.9],
        ]);
        let o = [5.0, 3.0, 2.0];
        let d = [4.0, 4.0, 2.0];
        let config = SolverConfig::default();
        let mp =
            solve_most_probable(&o, &d, &costs, Deterrence::BetaGiven(0.8), &config).unwrap();
        let g = gravity_balance(&o, &d, &costs, 0.8).unwrap();
        for (i, j, t) in mp.trips.iter() {
            assert_relative_eq!(t, g.trips.get(i, j), max_relative = 1e-6);
        }
    }

    #[test]
    fn budget_mode_recovers_dual_beta() {
        let costs = Table2::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        let o = [1.0, 1.0];
        let d = [1.0, 1.0];
        let config = SolverConfig::default();
        // target the spending realized at beta = 1
        let reference = gravity_balance(&o, &d, &costs, 1.0).unwrap();
        let budget: f64 = reference
            .trips
            .iter()
            .map(|(i, j, t)| t * costs.get(i, j))
            .sum();
        let mp =
            solve_most_probable(&o, &d, &costs, Deterrence::Budget(budget), &config).unwrap();
        let spent: f64 = mp
            .trips
            .iter()
            .map(|(i, j, t)| t * costs.get(i, j))
            .sum();
        assert!((spent - budget).abs() <= 1e-6 * budget.max(1.0));
        assert_relative_eq!(mp.beta, 1.0, max_relative = 1e-2);
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        let costs = Table2::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        let config = SolverConfig::default();
        let err = solve_most_probable(
            &[1.0, 1.0],
            &[1.0, 1.0],
            &costs,
            Deterrence::Budget(0.5), // below the minimum achievable spend of 2.0
            &config,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { .. }));
    }

    #[test]
    fn modal_split_examples() {
        let equal = multi_mode_split(&[2.0, 2.0, 2.0], 1.5).unwrap();
        for &s in &equal {
            assert_relative_eq!(s, 1.0 / 3.0, max_relative = 1e-14);
        }
        let split = multi_mode_split(&[1.0, 2.0], 1.0).unwrap();
        let oracle = mnl_prob(&[-1.0, -2.0], 1.0).unwrap();
        assert_relative_eq!(split[0], oracle[0], max_relative = 1e-14);
        assert_relative_eq!(split[0], 0.7310585786300049, max_relative = 1e-12);
        let uniform = multi_mode_split(&[1.0, 2.0], 0.0).unwrap();
        assert_relative_eq!(uniform[0], 0.5, max_relative = 1e-14);
    }
}
