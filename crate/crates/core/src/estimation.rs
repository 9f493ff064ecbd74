//! Independent oracles and the synthetic-data harness: fixed-point
//! equilibrium evaluation, likelihood cross-checks, and generate-and-recover
//! pipelines.

use crate::choice::{assemble_trips, hier_extended_prob, Hierarchy, HierProbs, ModeTree, TripTables, UtilitySpec};
use crate::error::{Error, Result};
use crate::network::{LinkFlowVector, ModalNetwork, ZonalSystem};
use crate::programs::ObservationBundle;
use crate::routes::{self, RouteSet};
use crate::scalar::Real;
use crate::solver::{FlowAveraging, SolverConfig};

/// A complete model instance: activity system, networks, choice structure,
/// utilities, and the route enumeration depth.
///
/// When the utility coefficients and scales are generator values, this is a
/// synthetic scenario for generate-and-recover runs.
#[derive(Debug, Clone)]
pub struct Scenario<R> {
    pub zones: ZonalSystem<R>,
    pub network: ModalNetwork<R>,
    pub tree: ModeTree<R>,
    pub utilities: UtilitySpec<R>,
    pub k_routes: usize,
}

impl<R: Real> Scenario<R> {
    /// Enumerates the frozen route set: K shortest simple paths per
    /// `(origin, destination, mode)` with positive production/attraction.
    pub fn route_set(&self) -> Result<RouteSet<R>> {
        let mut entries = Vec::new();
        for &zi in &self.zones.origins() {
            for &zj in &self.zones.destinations() {
                if zj == zi {
                    continue;
                }
                let src = self.network.node(self.zones.id(zi))?;
                let dst = self.network.node(self.zones.id(zj))?;
                for m in 0..self.network.n_modes() {
                    entries.push(routes::enumerate_routes(
                        &self.network,
                        zi,
                        zj,
                        m,
                        src,
                        dst,
                        self.k_routes,
                    )?);
                }
            }
        }
        Ok(RouteSet::from_entries(entries))
    }

    pub fn hierarchy(&self, route_set: &RouteSet<R>) -> Result<Hierarchy> {
        Hierarchy::build(&self.zones, &self.tree, route_set)
    }
}

/// Equilibrium returned by [`fixed_point_oracle`].
#[derive(Debug, Clone)]
pub struct Equilibrium<R> {
    pub flows: LinkFlowVector<R>,
    pub probs: HierProbs<R>,
    pub trips: TripTables<R>,
    /// Max relative gap between the returned flows and one more full
    /// evaluation of the choice-and-assignment map at those flows.
    pub residual: R,
    pub iterations: usize,
    pub converged: bool,
}

/// Self-consistent equilibrium of the hierarchical choice model: iterates
/// cost -> probabilities -> trips -> flows with averaged updates until the
/// flow map reaches a fixed point.
///
/// This evaluator uses only the closed-form probability expressions, never
/// the optimization machinery, so it serves as an independent oracle for the
/// equivalent convex programs.
pub fn fixed_point_oracle<R: Real>(
    scenario: &Scenario<R>,
    route_set: &RouteSet<R>,
    hierarchy: &Hierarchy,
    config: &SolverConfig<R>,
) -> Result<Equilibrium<R>> {
    let mut flows = LinkFlowVector::zeros(&scenario.network);
    let mut damping_counter: usize = 1;
    let mut prev_gap = R::infinity();
    let mut iterations = 0;
    let mut converged = false;
    for k in 1..=config.max_fixed_point {
        iterations = k;
        let probs = hier_extended_prob(
            hierarchy,
            &scenario.tree,
            &scenario.utilities,
            route_set,
            &scenario.network,
            &flows,
        )?;
        let trips = assemble_trips(&scenario.zones, hierarchy, &probs, route_set, &scenario.network);
        let gap = flows.max_rel_diff(&trips.flows);
        if gap < config.tol_fixed_point {
            flows = trips.flows;
            converged = true;
            break;
        }
        let step = match config.flow_averaging {
            FlowAveraging::Msa => R::one() / R::count(k),
            FlowAveraging::Plain => R::one(),
            FlowAveraging::SelfRegulated => {
                if gap >= prev_gap {
                    damping_counter += 1;
                }
                R::one() / R::count(damping_counter)
            }
        };
        prev_gap = gap;
        // flows + step * (target - flows)
        let mut blended = LinkFlowVector::zeros(&scenario.network);
        for (m, a, f) in flows.iter() {
            blended.add(m, a, f + step * (trips.flows.get(m, a) - f));
        }
        flows = blended;
    }
    // evaluate once more at the returned flows for the self-consistency report
    let probs = hier_extended_prob(
        hierarchy,
        &scenario.tree,
        &scenario.utilities,
        route_set,
        &scenario.network,
        &flows,
    )?;
    let trips = assemble_trips(&scenario.zones, hierarchy, &probs, route_set, &scenario.network);
    let residual = flows.max_rel_diff(&trips.flows);
    if !converged {
        return Err(Error::NonConvergent {
            what: "fixed-point equilibrium".into(),
            residual: residual.to_f64().unwrap_or(f64::NAN),
            iterations,
        });
    }
    Ok(Equilibrium {
        flows,
        probs,
        trips,
        residual,
        iterations,
        converged,
    })
}

/// Runs the oracle at the scenario's (generator) parameters and packages the
/// equilibrium as observed data with exact hierarchy sums.
pub fn generate_observations<R: Real>(
    scenario: &Scenario<R>,
    route_set: &RouteSet<R>,
    hierarchy: &Hierarchy,
    config: &SolverConfig<R>,
) -> Result<ObservationBundle<R>> {
    let eq = fixed_point_oracle(scenario, route_set, hierarchy, config)?;
    let flows: Vec<R> = eq.flows.iter().map(|(_, _, f)| f).collect();
    ObservationBundle::new(
        hierarchy,
        &scenario.zones,
        eq.trips.t_dest.clone(),
        eq.trips.t_nest.clone(),
        eq.trips.t_mode.clone(),
        Some(flows),
        R::zero(),
    )
}

/// Closed-form two-level (destination, mode) logit: the independent oracle
/// for the destination/mode calibration program. Returns `p_{j/i}` and
/// `p_{m/ij}` as dense zone tables (zero where a pair is not in the choice
/// structure).
pub fn hier_mnl_closed_form<R: Real>(
    zones: &ZonalSystem<R>,
    v_dest: &crate::table::Table2<R>,
    v_mode: &crate::table::Table3<R>,
    theta_dest: R,
    theta_mode: R,
) -> Result<(crate::table::Table2<R>, crate::table::Table3<R>)> {
    use crate::scalar::weighted_logsumexp;
    let n = zones.len();
    let n_modes = v_mode.dims().2;
    let mut p_dest = crate::table::Table2::zeros(n, n);
    let mut p_mode = crate::table::Table3::zeros(n, n, n_modes);
    for &zi in &zones.origins() {
        let dests: Vec<usize> = zones
            .destinations()
            .into_iter()
            .filter(|&zj| zj != zi)
            .collect();
        if dests.is_empty() {
            return Err(Error::EmptyChoiceSet);
        }
        let mut s = vec![R::zero(); dests.len()];
        for (pos, &zj) in dests.iter().enumerate() {
            let lse = weighted_logsumexp(
                (0..n_modes).map(|m| (R::one(), theta_mode * v_mode.get(zi, zj, m))),
            );
            s[pos] = lse / theta_mode;
            for m in 0..n_modes {
                p_mode.set(
                    zi,
                    zj,
                    m,
                    (theta_mode * v_mode.get(zi, zj, m) - lse).exp(),
                );
            }
        }
        let lse = weighted_logsumexp(
            dests
                .iter()
                .enumerate()
                .map(|(pos, &zj)| (R::one(), theta_dest * (v_dest.get(zi, zj) + s[pos]))),
        );
        for (pos, &zj) in dests.iter().enumerate() {
            p_dest.set(
                zi,
                zj,
                (theta_dest * (v_dest.get(zi, zj) + s[pos]) - lse).exp(),
            );
        }
    }
    Ok((p_dest, p_mode))
}

/// Log-likelihood of an MNL sample at coefficients `beta` and constants
/// `asc`, with utilities `theta (asc_m + sum_k beta_k X)`.
pub fn log_likelihood_mnl<R: Real>(
    sample: &crate::programs::ChoiceSample<R>,
    beta: &[R],
    asc: &[R],
    theta: R,
) -> R {
    ll_and_grad(sample, beta, asc, theta, None)
}

/// Likelihood gradient with respect to `[asc..., beta...]`.
pub fn log_likelihood_grad<R: Real>(
    sample: &crate::programs::ChoiceSample<R>,
    beta: &[R],
    asc: &[R],
    theta: R,
) -> Vec<R> {
    let mut grad = vec![R::zero(); asc.len() + beta.len()];
    ll_and_grad(sample, beta, asc, theta, Some(&mut grad));
    grad
}

fn ll_and_grad<R: Real>(
    sample: &crate::programs::ChoiceSample<R>,
    beta: &[R],
    asc: &[R],
    theta: R,
    mut grad: Option<&mut [R]>,
) -> R {
    use crate::scalar::weighted_logsumexp;
    let n_m = sample.n_alternatives;
    let n_k = sample.attrs.len();
    let mut ll = R::zero();
    if let Some(g) = grad.as_deref_mut() {
        for v in g.iter_mut() {
            *v = R::zero();
        }
    }
    for (h, &chosen) in sample.chosen.iter().enumerate() {
        let v = |m: usize| -> R {
            let mut u = asc[m];
            for k in 0..n_k {
                u = u + beta[k] * sample.attrs[k].get(h, m);
            }
            u
        };
        let lse = weighted_logsumexp((0..n_m).map(|m| (R::one(), theta * v(m))));
        ll = ll + theta * v(chosen) - lse;
        if let Some(g) = grad.as_deref_mut() {
            for m in 0..n_m {
                let p = (theta * v(m) - lse).exp();
                let y = if m == chosen { R::one() } else { R::zero() };
                g[m] = g[m] + theta * (y - p);
                for k in 0..n_k {
                    g[n_m + k] = g[n_m + k] + theta * (y - p) * sample.attrs[k].get(h, m);
                }
            }
        }
    }
    ll
}

/// Maximum-likelihood fit of an MNL sample (`asc[0]` normalized to zero).
#[derive(Debug, Clone)]
pub struct MleFit<R> {
    pub asc: Vec<R>,
    pub beta: Vec<R>,
    pub log_likelihood: R,
}

pub fn mle_fit<R: Real>(
    sample: &crate::programs::ChoiceSample<R>,
    theta: R,
    tol: R,
) -> Result<MleFit<R>> {
    let n_m = sample.n_alternatives;
    let n_k = sample.attrs.len();
    let dim = (n_m - 1) + n_k;
    let unpack = |p: &[R]| -> (Vec<R>, Vec<R>) {
        let mut asc = vec![R::zero(); n_m];
        asc[1..n_m].copy_from_slice(&p[..n_m - 1]);
        (asc, p[n_m - 1..].to_vec())
    };
    let objective = |p: &[R], grad: Option<&mut [R]>| -> R {
        let (asc, beta) = unpack(p);
        match grad {
            None => -log_likelihood_mnl(sample, &beta, &asc, theta),
            Some(g) => {
                let full = log_likelihood_grad(sample, &beta, &asc, theta);
                for (i, gi) in g.iter_mut().enumerate() {
                    let src = if i < n_m - 1 { i + 1 } else { n_m + (i - (n_m - 1)) };
                    *gi = -full[src];
                }
                -log_likelihood_mnl(sample, &beta, &asc, theta)
            }
        }
    };
    let p = minimize_bfgs(&objective, vec![R::zero(); dim], tol, 500)?;
    let (asc, beta) = unpack(&p);
    let ll = log_likelihood_mnl(sample, &beta, &asc, theta);
    Ok(MleFit {
        asc,
        beta,
        log_likelihood: ll,
    })
}

/// Dense BFGS minimization with Armijo backtracking (small dimensions).
fn minimize_bfgs<R: Real>(
    f: &dyn Fn(&[R], Option<&mut [R]>) -> R,
    mut x: Vec<R>,
    tol: R,
    max_iter: usize,
) -> Result<Vec<R>> {
    let n = x.len();
    let mut grad = vec![R::zero(); n];
    let mut value = f(&x, Some(&mut grad));
    let mut h: Vec<Vec<R>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { R::one() } else { R::zero() }).collect())
        .collect();
    for _ in 0..max_iter {
        let gnorm = grad.iter().fold(R::zero(), |a, &g| a.max(g.abs()));
        if gnorm < tol {
            return Ok(x);
        }
        let mut d = vec![R::zero(); n];
        for i in 0..n {
            for j in 0..n {
                d[i] = d[i] - h[i][j] * grad[j];
            }
        }
        let mut slope: R = grad.iter().zip(&d).map(|(&g, &v)| g * v).sum();
        if slope >= R::zero() {
            for i in 0..n {
                d[i] = -grad[i];
            }
            slope = -grad.iter().map(|&g| g * g).sum::<R>();
        }
        let mut alpha = R::one();
        let mut moved = false;
        while alpha > R::of(1e-16) {
            let xn: Vec<R> = x.iter().zip(&d).map(|(&a, &b)| a + alpha * b).collect();
            let mut gn = vec![R::zero(); n];
            let vn = f(&xn, Some(&mut gn));
            if vn <= value + R::of(1e-4) * alpha * slope {
                let s: Vec<R> = xn.iter().zip(&x).map(|(&a, &b)| a - b).collect();
                let y: Vec<R> = gn.iter().zip(&grad).map(|(&a, &b)| a - b).collect();
                let sy: R = s.iter().zip(&y).map(|(&a, &b)| a * b).sum();
                let sn: R = s.iter().map(|&v| v * v).sum::<R>().sqrt();
                let yn: R = y.iter().map(|&v| v * v).sum::<R>().sqrt();
                if sy > R::of(1e-12) * sn * yn {
                    bfgs_update_dense(&mut h, &s, &y, sy);
                }
                x = xn;
                value = vn;
                grad = gn;
                moved = true;
                break;
            }
            alpha = alpha * R::of(0.5);
        }
        if !moved {
            break;
        }
    }
    let gnorm = grad.iter().fold(R::zero(), |a, &g| a.max(g.abs()));
    if gnorm < tol {
        Ok(x)
    } else {
        Err(Error::NonConvergent {
            what: "likelihood maximization".into(),
            residual: gnorm.to_f64().unwrap_or(f64::NAN),
            iterations: max_iter,
        })
    }
}

fn bfgs_update_dense<R: Real>(h: &mut [Vec<R>], s: &[R], y: &[R], sy: R) {
    let n = s.len();
    let rho = R::one() / sy;
    let mut hy = vec![R::zero(); n];
    for i in 0..n {
        for j in 0..n {
            hy[i] = hy[i] + h[i][j] * y[j];
        }
    }
    let yhy: R = y.iter().zip(&hy).map(|(&a, &b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            let term = rho * (s[i] * hy[j] + hy[i] * s[j]);
            let add = rho * s[i] * s[j] * (R::one() + rho * yhy);
            h[i][j] = h[i][j] - term + add;
        }
    }
}

/// Relative errors of recovered parameters against the scenario generators.
#[derive(Debug, Clone)]
pub struct RecoveryReport<R> {
    pub theta_dest_err: R,
    pub theta_mode_err: R,
    pub tau_err: Vec<R>,
    pub beta_dest_err: Vec<R>,
    pub beta_mode_err: Vec<R>,
    pub duals: crate::solver::DualSolution<R>,
    pub solution: crate::solver::SolutionState<R>,
}

impl<R: Real> RecoveryReport<R> {
    pub fn max_err(&self) -> R {
        let mut worst = self.theta_dest_err.max(self.theta_mode_err);
        for &e in self.tau_err.iter().chain(&self.beta_dest_err).chain(&self.beta_mode_err) {
            worst = worst.max(e);
        }
        worst
    }
}

fn rel_err<R: Real>(got: R, want: R) -> R {
    (got - want).abs() / want.abs().max(R::of(1e-6))
}

/// Generates observations from the scenario's parameters, calibrates the
/// full hierarchy on them, and reports recovery errors.
pub fn recover_and_compare<R: Real>(
    scenario: &Scenario<R>,
    config: &SolverConfig<R>,
) -> Result<RecoveryReport<R>> {
    let route_set = scenario.route_set()?;
    let hierarchy = scenario.hierarchy(&route_set)?;
    let bundle = generate_observations(scenario, &route_set, &hierarchy, config)?;
    let program = crate::programs::build_first_stage(
        &scenario.network,
        &route_set,
        &hierarchy,
        &scenario.zones,
        &scenario.tree,
        &scenario.utilities,
        &bundle,
        scenario.tree.theta_route,
    )?;
    let (solution, duals) = crate::solver::solve_calibration(&program, config)?;
    let theta_dest_err = duals
        .theta_dest
        .map(|t| rel_err(t, scenario.tree.theta_dest))
        .unwrap_or(R::infinity());
    let theta_mode_err = duals
        .theta_mode
        .map(|t| rel_err(t, scenario.tree.theta_mode))
        .unwrap_or(R::infinity());
    let tau_err = scenario
        .tree
        .nests()
        .iter()
        .map(|nest| {
            duals
                .tau
                .iter()
                .find(|(name, _)| *name == nest.name)
                .map(|&(_, t)| rel_err(t, nest.tau))
                .unwrap_or(R::infinity())
        })
        .collect();
    let beta_dest_err = scenario
        .utilities
        .beta_dest
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            duals
                .beta_dest
                .get(k)
                .map(|&(_, v)| rel_err(v, b))
                .unwrap_or(R::infinity())
        })
        .collect();
    let beta_mode_err = scenario
        .utilities
        .beta_mode
        .iter()
        .enumerate()
        .map(|(q, &b)| {
            duals
                .beta_mode
                .get(q)
                .map(|&(_, v)| rel_err(v, b))
                .unwrap_or(R::infinity())
        })
        .collect();
    Ok(RecoveryReport {
        theta_dest_err,
        theta_mode_err,
        tau_err,
        beta_dest_err,
        beta_mode_err,
        duals,
        solution,
    })
}

/// Multiplies mode-level observed cells by `1 + noise` (seeded, uniform in
/// `[-rel, rel]`), then restores hierarchy consistency by resumming upward.
/// Returns the adjusted productions alongside the perturbed bundle.
pub fn perturb_observations<R: Real>(
    zones: &ZonalSystem<R>,
    hierarchy: &Hierarchy,
    bundle: &ObservationBundle<R>,
    rel: R,
    seed: u64,
) -> Result<(ZonalSystem<R>, ObservationBundle<R>)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = hierarchy;
    let rel = rel.to_f64().unwrap_or(0.0);
    let t_mode: Vec<R> = bundle
        .t_mode
        .iter()
        .map(|&t| t * R::of(1.0 + rng.gen_range(-rel..rel)))
        .collect();
    let mut t_nest = vec![R::zero(); h.nest_id.len()];
    for (mn, &p) in h.mode_parent.iter().enumerate() {
        t_nest[p as usize] = t_nest[p as usize] + t_mode[mn];
    }
    let mut t_dest = vec![R::zero(); h.dest_zone.len()];
    for (nn, &p) in h.nest_parent.iter().enumerate() {
        t_dest[p as usize] = t_dest[p as usize] + t_nest[nn];
    }
    let mut o = vec![R::zero(); h.n_origins()];
    for (d, &p) in h.dest_parent.iter().enumerate() {
        o[p as usize] = o[p as usize] + t_dest[d];
    }
    let rows: Vec<(String, R, R)> = (0..zones.len())
        .map(|z| {
            let production = h
                .origins
                .iter()
                .position(|&zz| zz == z)
                .map(|oi| o[oi])
                .unwrap_or(R::zero());
            (zones.id(z).to_string(), production, zones.attraction(z))
        })
        .collect();
    let zones = ZonalSystem::new(rows)?;
    let bundle = ObservationBundle::new(
        h,
        &zones,
        t_dest,
        t_nest,
        t_mode,
        bundle.link_flows.clone(),
        bundle.sigma,
    )?;
    Ok((zones, bundle))
}

pub mod harness {
    //! Deterministic toy scenarios and samplers for tests and acceptance
    //! fixtures.

    use super::*;
    use crate::choice::Nest;
    use crate::table::{Table2, Table3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Index of the first `tail -> head` link of a mode, by node names.
    pub fn link_index<R: Real>(
        network: &ModalNetwork<R>,
        mode: usize,
        tail: &str,
        head: &str,
    ) -> Result<usize> {
        let t = network.node(tail)?;
        let h = network.node(head)?;
        network
            .mode_links(mode)
            .iter()
            .position(|l| l.tail == t && l.head == h)
            .ok_or_else(|| Error::MissingLink {
                mode: network.mode_name(mode).to_string(),
                tail: tail.to_string(),
                head: head.to_string(),
            })
    }

    /// One origin, two destinations, car/bus in a single nest, two routes
    /// per mode and OD, with overlapping bus routes to the first
    /// destination. Frozen reference values for this fixture live in the
    /// choice tests.
    pub fn two_dest_toy() -> Scenario<f64> {
        let zones = ZonalSystem::new(vec![
            ("o".into(), 10.0, 0.0),
            ("d1".into(), 0.0, 1.0),
            ("d2".into(), 0.0, 1.0),
        ])
        .unwrap();
        let mut net = ModalNetwork::new(0.5).unwrap();
        // car
        net.add_link("car", "o", "d1", 2.0, 10.0, 500.0, 0.15, 4.0, 1.0).unwrap();
        net.add_link("car", "o", "x", 1.0, 4.0, 600.0, 0.15, 4.0, 0.5).unwrap();
        net.add_link("car", "x", "d1", 1.2, 5.0, 600.0, 0.15, 4.0, 0.5).unwrap();
        net.add_link("car", "o", "d2", 3.0, 12.0, 500.0, 0.15, 4.0, 1.2).unwrap();
        net.add_link("car", "x", "d2", 1.5, 6.0, 600.0, 0.15, 4.0, 0.7).unwrap();
        // bus: the two d1 routes share o->x
        net.add_link("bus", "o", "x", 1.0, 6.0, 400.0, 0.15, 4.0, 0.4).unwrap();
        net.add_link("bus", "x", "d1", 1.3, 7.0, 400.0, 0.15, 4.0, 0.3).unwrap();
        net.add_link("bus", "x", "d1", 1.1, 8.0, 400.0, 0.15, 4.0, 0.2).unwrap();
        net.add_link("bus", "x", "d2", 1.6, 9.0, 400.0, 0.15, 4.0, 0.4).unwrap();
        net.add_link("bus", "o", "d2", 3.2, 15.0, 400.0, 0.15, 4.0, 0.6).unwrap();
        let car = net.mode("car").unwrap();
        let bus = net.mode("bus").unwrap();
        let tree = ModeTree::new(
            2,
            vec![Nest {
                name: "all".into(),
                members: vec![car, bus],
                tau: 0.8,
            }],
            0.9,
            1.1,
            1.3,
        )
        .unwrap();
        let n = zones.len();
        let mut size = Table2::zeros(n, n);
        size.set(0, 1, 1.0);
        size.set(0, 2, 1.4);
        let mut access = Table3::zeros(n, n, 2);
        access.set(0, 1, car, 0.3);
        access.set(0, 1, bus, 0.6);
        access.set(0, 2, car, 0.2);
        access.set(0, 2, bus, 0.5);
        let utilities = UtilitySpec {
            dest_attr_names: vec!["size".into()],
            dest_attrs: vec![size],
            beta_dest: vec![0.8],
            mode_attr_names: vec!["access".into()],
            mode_attrs: vec![access],
            beta_mode: vec![-0.9],
        };
        Scenario {
            zones,
            network: net,
            tree,
            utilities,
            k_routes: 2,
        }
    }

    /// Fully symmetric instance: every conditional distribution is uniform.
    pub fn symmetric_toy() -> Scenario<f64> {
        let zones = ZonalSystem::new(vec![
            ("o".into(), 8.0, 0.0),
            ("d1".into(), 0.0, 1.0),
            ("d2".into(), 0.0, 1.0),
        ])
        .unwrap();
        let mut net = ModalNetwork::new(0.5).unwrap();
        for mode in ["car", "bus"] {
            for dest in ["d1", "d2"] {
                // two identical parallel links per OD and mode
                net.add_link(mode, "o", dest, 1.0, 5.0, 300.0, 0.15, 4.0, 0.5).unwrap();
                net.add_link(mode, "o", dest, 1.0, 5.0, 300.0, 0.15, 4.0, 0.5).unwrap();
            }
        }
        let tree = ModeTree::new(
            2,
            vec![Nest {
                name: "all".into(),
                members: vec![0, 1],
                tau: 0.7,
            }],
            1.0,
            1.0,
            1.0,
        )
        .unwrap();
        let n = zones.len();
        let utilities = UtilitySpec {
            dest_attr_names: vec!["size".into()],
            dest_attrs: vec![Table2::zeros(n, n)],
            beta_dest: vec![0.5],
            mode_attr_names: vec!["access".into()],
            mode_attrs: vec![Table3::zeros(n, n, 2)],
            beta_mode: vec![0.5],
        };
        Scenario {
            zones,
            network: net,
            tree,
            utilities,
            k_routes: 2,
        }
    }

    /// Three zones, three modes in two nests (car and carpool share one),
    /// two routes per OD and mode via a hub node. Parameters:
    /// `theta_j = 0.8`, `theta_m = 1.2`, `theta_r = 1.0`, `tau_auto = 0.6`,
    /// `beta_size = 0.5`, `beta_access = -0.7`, `vot = 0.4`.
    /// `congested = false` zeroes every volume-delay slope.
    pub fn three_zone_scenario(congested: bool) -> Scenario<f64> {
        let zones = ZonalSystem::new(vec![
            ("a".into(), 120.0, 1.0),
            ("b".into(), 90.0, 1.0),
            ("c".into(), 60.0, 1.0),
        ])
        .unwrap();
        let alpha = if congested { 0.15 } else { 0.0 };
        let mut net = ModalNetwork::new(0.4).unwrap();
        let pairs = [("a", "b"), ("b", "a"), ("a", "c"), ("c", "a"), ("b", "c"), ("c", "b")];
        // direct links, per mode with distinct times/capacities
        for (k, (s, t)) in pairs.iter().enumerate() {
            let base = 8.0 + k as f64;
            net.add_link("car", s, t, 4.0 + 0.3 * k as f64, base, 150.0, alpha, 4.0, 1.0)
                .unwrap();
            net.add_link("carpool", s, t, 4.0 + 0.3 * k as f64, base + 1.5, 120.0, alpha, 4.0, 0.7)
                .unwrap();
            net.add_link("bus", s, t, 4.2 + 0.3 * k as f64, base + 6.0, 200.0, 0.0, 0.0, 0.5)
                .unwrap();
        }
        // hub links for second routes
        for (k, z) in ["a", "b", "c"].iter().enumerate() {
            let base = 5.0 + 0.7 * k as f64;
            for mode in ["car", "carpool", "bus"] {
                let (t_extra, cap, money, a) = match mode {
                    "car" => (0.0, 180.0, 0.5, alpha),
                    "carpool" => (0.8, 150.0, 0.4, alpha),
                    _ => (3.5, 240.0, 0.3, 0.0),
                };
                let b_exp = if mode == "bus" { 0.0 } else { 4.0 };
                net.add_link(mode, z, "h", 2.4, base + t_extra, cap, a, b_exp, money)
                    .unwrap();
                net.add_link(mode, "h", z, 2.5, base + 0.4 + t_extra, cap, a, b_exp, money)
                    .unwrap();
            }
        }
        let car = net.mode("car").unwrap();
        let carpool = net.mode("carpool").unwrap();
        let bus = net.mode("bus").unwrap();
        let tree = ModeTree::new(
            3,
            vec![
                Nest {
                    name: "auto".into(),
                    members: vec![car, carpool],
                    tau: 0.6,
                },
                Nest {
                    name: "transit".into(),
                    members: vec![bus],
                    tau: 1.0,
                },
            ],
            0.8,
            1.2,
            1.0,
        )
        .unwrap();
        let n = zones.len();
        let mut size = Table2::zeros(n, n);
        let mut access = Table3::zeros(n, n, 3);
        for i in 0..n {
            for j in 0..n {
                size.set(i, j, 0.4 + 0.3 * j as f64 + 0.1 * i as f64);
                for m in 0..3 {
                    access.set(
                        i,
                        j,
                        m,
                        0.2 + 0.25 * m as f64 + 0.07 * j as f64 - 0.05 * i as f64,
                    );
                }
            }
        }
        let utilities = UtilitySpec {
            dest_attr_names: vec!["size".into()],
            dest_attrs: vec![size],
            beta_dest: vec![0.5],
            mode_attr_names: vec!["access".into()],
            mode_attrs: vec![access],
            beta_mode: vec![-0.7],
        };
        Scenario {
            zones,
            network: net,
            tree,
            utilities,
            k_routes: 2,
        }
    }

    /// Destination/mode instance with closed-form observations for dual
    /// recovery tests (no network, no routes).
    #[derive(Debug, Clone)]
    pub struct HierMnlInstance {
        pub zones: ZonalSystem<f64>,
        pub utilities: UtilitySpec<f64>,
        pub theta_dest: f64,
        pub theta_mode: f64,
    }

    impl HierMnlInstance {
        /// Observed tables assembled from the closed-form probabilities at
        /// the generating parameters.
        pub fn observations(&self) -> (Table2<f64>, Table3<f64>) {
            let n = self.zones.len();
            let n_modes = self.utilities.mode_attrs[0].dims().2;
            let v_dest = Table2::from_fn(n, n, |i, j| self.utilities.v_dest(i, j));
            let mut v_mode = Table3::zeros(n, n, n_modes);
            for i in 0..n {
                for j in 0..n {
                    for m in 0..n_modes {
                        v_mode.set(i, j, m, self.utilities.v_mode(i, j, m));
                    }
                }
            }
            let (p_dest, p_mode) = super::hier_mnl_closed_form(
                &self.zones,
                &v_dest,
                &v_mode,
                self.theta_dest,
                self.theta_mode,
            )
            .unwrap();
            let mut t_ij = Table2::zeros(n, n);
            let mut t_ijm = Table3::zeros(n, n, n_modes);
            for &zi in &self.zones.origins() {
                for zj in 0..n {
                    let t = self.zones.production(zi) * p_dest.get(zi, zj);
                    t_ij.set(zi, zj, t);
                    for m in 0..n_modes {
                        t_ijm.set(zi, zj, m, t * p_mode.get(zi, zj, m));
                    }
                }
            }
            (t_ij, t_ijm)
        }
    }

    /// Seeded random destination/mode instance: up to 4 zones, 3 modes, 2
    /// attributes per level.
    pub fn hier_mnl_instance(seed: u64) -> HierMnlInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_zones = rng.gen_range(3..=4usize);
        let n_modes = 3usize;
        let rows: Vec<(String, f64, f64)> = (0..n_zones)
            .map(|z| (format!("z{z}"), rng.gen_range(40.0..140.0), 1.0))
            .collect();
        let zones = ZonalSystem::new(rows).unwrap();
        let (dest_attrs, mode_attrs) = random_tables(seed ^ 0x5eed, n_zones, n_modes, 2, 2);
        let utilities = UtilitySpec {
            dest_attr_names: vec!["x1".into(), "x2".into()],
            dest_attrs,
            beta_dest: vec![rng.gen_range(0.2..0.9), rng.gen_range(-0.9..-0.2)],
            mode_attr_names: vec!["q1".into(), "q2".into()],
            mode_attrs,
            beta_mode: vec![rng.gen_range(-0.8..-0.2), rng.gen_range(0.2..0.8)],
        };
        HierMnlInstance {
            zones,
            utilities,
            theta_dest: rng.gen_range(0.5..1.1),
            theta_mode: rng.gen_range(0.9..1.6),
        }
    }

    /// Seeded MNL sample: utilities `theta (asc_m + sum beta_k X)` with
    /// uniform attributes; choices drawn from the implied probabilities.
    pub fn mnl_sample(
        seed: u64,
        n_individuals: usize,
        asc: &[f64],
        beta: &[f64],
        theta: f64,
    ) -> crate::programs::ChoiceSample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_m = asc.len();
        let n_k = beta.len();
        let mut attrs = vec![Table2::zeros(n_individuals, n_m); n_k];
        for table in &mut attrs {
            for h in 0..n_individuals {
                for m in 0..n_m {
                    table.set(h, m, rng.gen_range(-1.0..1.0));
                }
            }
        }
        let mut chosen = Vec::with_capacity(n_individuals);
        for h in 0..n_individuals {
            let v: Vec<f64> = (0..n_m)
                .map(|m| {
                    asc[m]
                        + (0..n_k).map(|k| beta[k] * attrs[k].get(h, m)).sum::<f64>()
                })
                .collect();
            let p = crate::choice::mnl_prob(&v, theta).unwrap();
            let draw: f64 = rng.gen_range(0.0..1.0);
            let mut acc = 0.0;
            let mut pick = n_m - 1;
            for (m, &pm) in p.iter().enumerate() {
                acc += pm;
                if draw < acc {
                    pick = m;
                    break;
                }
            }
            chosen.push(pick);
        }
        crate::programs::ChoiceSample {
            n_alternatives: n_m,
            chosen,
            attrs,
            attr_names: (0..n_k).map(|k| format!("x{k}")).collect(),
        }
    }

    /// Seeded nested-logit case: up to 3 nests over up to 6 alternatives,
    /// dissimilarities in `[0.2, 1.0]`.
    pub fn random_nl_case(seed: u64) -> (Vec<f64>, ModeTree<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_alts = rng.gen_range(2..=6usize);
        let n_nests = rng.gen_range(1..=3usize.min(n_alts));
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_nests];
        for (m, member) in (0..n_alts).enumerate() {
            let target = if m < n_nests { m } else { rng.gen_range(0..n_nests) };
            members[target].push(member);
        }
        let nests = members
            .into_iter()
            .enumerate()
            .map(|(k, members)| Nest {
                name: format!("n{k}"),
                members,
                tau: rng.gen_range(0.2..=1.0),
            })
            .collect();
        let theta = rng.gen_range(0.4..2.0);
        let tree = ModeTree::new(n_alts, nests, 1.0, theta, 1.0).unwrap();
        let v: Vec<f64> = (0..n_alts).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (v, tree)
    }

    /// Deterministic pseudo-random utility tables over a zone/mode grid.
    pub fn random_tables(
        seed: u64,
        n_zones: usize,
        n_modes: usize,
        n_dest_attrs: usize,
        n_mode_attrs: usize,
    ) -> (Vec<Table2<f64>>, Vec<Table3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dest = (0..n_dest_attrs)
            .map(|_| Table2::from_fn(n_zones, n_zones, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let mode = (0..n_mode_attrs)
            .map(|_| {
                let mut t = Table3::zeros(n_zones, n_zones, n_modes);
                for i in 0..n_zones {
                    for j in 0..n_zones {
                        for m in 0..n_modes {
                            t.set(i, j, m, rng.gen_range(-1.0..1.0));
                        }
                    }
                }
                t
            })
            .collect();
        (dest, mode)
    }
}
