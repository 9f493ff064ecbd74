//! Deterministic first-order solver for the convex programs.
//!
//! Inner problems (simplex constraints only) are solved by multiplicative
//! mirror ascent with Armijo backtracking: the update
//! `x <- b * x exp(s g) / sum` respects each group budget exactly, stays in
//! the interior, and increases the objective monotonically. Calibration
//! programs add equality matches; those are dualized and the multiplier
//! vector is driven to feasibility by a BFGS search on the (convex) dual
//! function, whose gradient is exactly the vector of constraint residuals.

use std::io::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::programs::{ConvexProgram, DualRole, InnerProblem, MatchKind};
use crate::scalar::Real;

/// Flow-averaging rule for fixed-point equilibrium iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowAveraging {
    /// Full steps while the gap shrinks, harmonic damping once it grows.
    SelfRegulated,
    /// Classic step `1/k`.
    Msa,
    /// Undamped substitution.
    Plain,
}

/// Solver tolerances and step-rule parameters.
#[derive(Debug, Clone)]
pub struct SolverConfig<R> {
    /// Stationarity target of the inner ascent.
    pub tol_inner: R,
    /// Scaled match-residual target of the outer dual search.
    pub tol_outer: R,
    pub max_inner: usize,
    pub max_outer: usize,
    pub armijo_c1: R,
    pub backtrack: R,
    pub step_grow: R,
    pub step_init: R,
    /// Interior clipping floor for probabilities (relative to the budget).
    pub prob_floor: R,
    /// Floor applied before logarithms in entropy terms.
    pub log_floor: R,
    /// Huber half-width for flow-deviation penalties.
    pub huber_width: R,
    pub flow_averaging: FlowAveraging,
    /// Fixed-point stopping rule: max relative flow change.
    pub tol_fixed_point: R,
    pub max_fixed_point: usize,
    /// Optional CSV iteration log: `iter objective kkt_residual step_size`.
    pub iteration_log: Option<PathBuf>,
}

impl<R: Real> Default for SolverConfig<R> {
    fn default() -> Self {
        Self {
            tol_inner: R::of(1e-8),
            tol_outer: R::of(1e-6),
            max_inner: 10_000,
            max_outer: 200,
            armijo_c1: R::of(1e-4),
            backtrack: R::of(0.5),
            step_grow: R::of(2.0),
            step_init: R::one(),
            prob_floor: R::of(1e-12),
            log_floor: R::of(1e-300),
            huber_width: R::of(1e-3),
            flow_averaging: FlowAveraging::SelfRegulated,
            tol_fixed_point: R::of(1e-10),
            max_fixed_point: 200_000,
            iteration_log: None,
        }
    }
}

/// Primal solution of one program.
#[derive(Debug, Clone)]
pub struct SolutionState<R> {
    /// Leaf trip values.
    pub x: Vec<R>,
    pub objective: R,
    pub converged: bool,
    pub iterations: usize,
    /// Final scaled stationarity residual.
    pub kkt_residual: R,
    /// Link flows (mode-major slots) when the program couples a network.
    pub flows: Option<Vec<R>>,
}

/// Calibrated parameters read off the optimal multipliers, plus raw duals.
#[derive(Debug, Clone)]
pub struct DualSolution<R> {
    pub theta_dest: Option<R>,
    pub theta_mode: Option<R>,
    /// Per nest: name and recovered dissimilarity factor.
    pub tau: Vec<(String, R)>,
    pub beta_dest: Vec<(String, R)>,
    pub beta_mode: Vec<(String, R)>,
    /// Choice-count duals of entropy estimation, per alternative.
    pub gamma: Vec<R>,
    /// Attribute duals of entropy estimation.
    pub alpha: Vec<R>,
    /// Column-balance duals of trip distribution.
    pub column_duals: Vec<R>,
    /// Every multiplier by constraint label.
    pub multipliers: Vec<(String, R)>,
    /// Per-group normalization duals (`lambda_i`).
    pub group_duals: Vec<R>,
    pub warnings: Vec<String>,
}

impl<R: Real> DualSolution<R> {
    fn empty() -> Self {
        Self {
            theta_dest: None,
            theta_mode: None,
            tau: Vec::new(),
            beta_dest: Vec::new(),
            beta_mode: Vec::new(),
            gamma: Vec::new(),
            alpha: Vec::new(),
            column_duals: Vec::new(),
            multipliers: Vec::new(),
            group_duals: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

struct InnerResult<R> {
    x: Vec<R>,
    objective: R,
    kkt: R,
    iterations: usize,
    converged: bool,
    group_duals: Vec<R>,
}

/// Budget-weighted stationarity residual and group duals.
fn stationarity<R: Real>(
    program: &ConvexProgram<R>,
    x: &[R],
    grad: &[R],
) -> (R, Vec<R>) {
    let n_groups = program.index.n_groups;
    let mut lambda = vec![R::zero(); n_groups];
    for (l, &g) in program.index.group_of_leaf.iter().enumerate() {
        lambda[g as usize] = lambda[g as usize] + x[l] * grad[l] / program.budgets[g as usize];
    }
    let mut worst = R::zero();
    for (l, &g) in program.index.group_of_leaf.iter().enumerate() {
        let r = (x[l] / program.budgets[g as usize]) * (grad[l] - lambda[g as usize]).abs();
        if r > worst {
            worst = r;
        }
    }
    (worst, lambda)
}

fn mirror_step<R: Real>(
    program: &ConvexProgram<R>,
    x: &[R],
    grad: &[R],
    step: R,
    prob_floor: R,
) -> Vec<R> {
    let n_groups = program.index.n_groups;
    let mut hi = vec![R::neg_infinity(); n_groups];
    for (l, &g) in program.index.group_of_leaf.iter().enumerate() {
        if grad[l] > hi[g as usize] {
            hi[g as usize] = grad[l];
        }
    }
    let mut y: Vec<R> = x
        .iter()
        .zip(grad)
        .zip(&program.index.group_of_leaf)
        .map(|((&xl, &gl), &g)| {
            let v = xl * (step * (gl - hi[g as usize])).exp();
            v.max(R::min_positive_value())
        })
        .collect();
    // renormalize to the group budgets, then clip to the interior floor
    for pass in 0..2 {
        let mut sums = vec![R::zero(); n_groups];
        for (l, &g) in program.index.group_of_leaf.iter().enumerate() {
            sums[g as usize] = sums[g as usize] + y[l];
        }
        for (l, &g) in program.index.group_of_leaf.iter().enumerate() {
            y[l] = y[l] * program.budgets[g as usize] / sums[g as usize];
            if pass == 0 {
                let floor = prob_floor * program.budgets[g as usize];
                if y[l] < floor {
                    y[l] = floor;
                }
            }
        }
    }
    y
}

fn solve_inner<R: Real>(
    inner: &InnerProblem<'_, R>,
    x0: Vec<R>,
    config: &SolverConfig<R>,
    log_name: &str,
) -> InnerResult<R> {
    let program = inner.program;
    let n = program.n_leaves();
    let mut x = x0;
    let mut grad = vec![R::zero(); n];
    let mut value = inner.eval(&x, Some(&mut grad));
    let mut step = config.step_init;
    let mut log_file = config.iteration_log.as_ref().and_then(|p| {
        std::fs::File::create(p.with_file_name(format!(
            "{}_{}.csv",
            p.file_stem().and_then(|s| s.to_str()).unwrap_or("solver"),
            log_name
        )))
        .ok()
        .map(|mut f| {
            let _ = writeln!(f, "iter,objective,kkt_residual,step_size");
            f
        })
    });
    let (mut kkt, mut duals) = stationarity(program, &x, &grad);
    let mut iterations = 0;
    let mut converged = kkt < config.tol_inner;
    while !converged && iterations < config.max_inner {
        iterations += 1;
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(
                f,
                "{},{:.12e},{:.6e},{:.6e}",
                iterations,
                value.to_f64().unwrap_or(f64::NAN),
                kkt.to_f64().unwrap_or(f64::NAN),
                step.to_f64().unwrap_or(f64::NAN)
            );
        }
        log::debug!(
            "{log_name}: iter {iterations} objective {value} kkt {kkt} step {step}"
        );
        let mut accepted = false;
        let mut trial_grad = vec![R::zero(); n];
        while step > R::of(1e-18) {
            let xn = mirror_step(program, &x, &grad, step, config.prob_floor);
            let vn = inner.eval(&xn, Some(&mut trial_grad));
            let gain: R = grad
                .iter()
                .zip(xn.iter().zip(&x))
                .map(|(&g, (&a, &b))| g * (a - b))
                .sum();
            if vn >= value + config.armijo_c1 * gain {
                x = xn;
                value = vn;
                grad.copy_from_slice(&trial_grad);
                accepted = true;
                step = step * config.step_grow;
                break;
            }
            step = step * config.backtrack;
        }
        if !accepted {
            break; // step underflow: no further progress possible
        }
        let (k, d) = stationarity(program, &x, &grad);
        kkt = k;
        duals = d;
        converged = kkt < config.tol_inner;
    }
    InnerResult {
        x,
        objective: value,
        kkt,
        iterations,
        converged,
        group_duals: duals,
    }
}

/// Solves a program with simplex constraints only (no match constraints),
/// by mirror ascent from the uniform interior start.
pub fn solve_simplex_program<R: Real>(
    program: &ConvexProgram<R>,
    config: &SolverConfig<R>,
) -> Result<(SolutionState<R>, DualSolution<R>)> {
    solve_simplex_program_from(program, config, None)
}

/// Same as [`solve_simplex_program`] with an explicit positive start (it is
/// projected onto the group budgets first).
pub fn solve_simplex_program_from<R: Real>(
    program: &ConvexProgram<R>,
    config: &SolverConfig<R>,
    start: Option<&[R]>,
) -> Result<(SolutionState<R>, DualSolution<R>)> {
    if !program.matches.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "program `{}` has match constraints; use solve_calibration",
            program.name
        )));
    }
    let inner = program.instantiate(&[], config.log_floor);
    let x0 = match start {
        Some(raw) => program.normalized_start(raw),
        None => program.uniform_start(),
    };
    let result = solve_inner(&inner, x0, config, &program.name);
    if !result.converged {
        log::warn!(
            "{}: inner iteration cap reached (kkt {})",
            program.name,
            result.kkt
        );
    }
    let mut duals = DualSolution::empty();
    duals.group_duals = result.group_duals;
    Ok((
        SolutionState {
            flows: program.flows(&result.x),
            x: result.x,
            objective: result.objective,
            converged: result.converged,
            iterations: result.iterations,
            kkt_residual: result.kkt,
        },
        duals,
    ))
}

/// Solves a calibration program (match constraints present): BFGS on the
/// dual function of the dualized matches, one inner solve per trial point.
///
/// Returns the primal solution at the final multipliers together with the
/// parameter labeling of the duals. Hitting the outer iteration cap returns
/// the best iterate flagged `converged = false`; a residual norm that grows
/// ten accepted steps in a row is reported as divergence.
pub fn solve_calibration<R: Real>(
    program: &ConvexProgram<R>,
    config: &SolverConfig<R>,
) -> Result<(SolutionState<R>, DualSolution<R>)> {
    let n_c = program.matches.len();
    if n_c == 0 {
        return solve_simplex_program(program, config);
    }
    let inner_config = SolverConfig {
        tol_inner: (config.tol_outer * R::of(1e-3)).min(config.tol_inner),
        iteration_log: None,
        ..config.clone()
    };
    let scales: Vec<R> = program
        .matches
        .iter()
        .map(|m| m.rhs.abs().max(R::one()))
        .collect();
    let psi_init: Vec<R> = program.matches.iter().map(|m| m.init).collect();
    // t-coordinates: psi * scale, so residuals and steps are O(1)
    let mut t: Vec<R> = psi_init.iter().zip(&scales).map(|(&p, &s)| p * s).collect();
    let psi_of = |t: &[R]| -> Vec<R> { t.iter().zip(&scales).map(|(&v, &s)| v / s).collect() };

    let coef_floor = R::of(1e-9);
    let touched: Vec<bool> = {
        let mut t = vec![false; program.levels.len()];
        for m in &program.matches {
            if let MatchKind::LevelEntropy { level, .. } = &m.kind {
                t[*level] = true;
            }
        }
        t
    };
    // levels raised by entropy multipliers must keep positive coefficients,
    // otherwise the inner problem stops being concave
    let coef_ok = |psi: &[R]| -> bool {
        let inner = program.instantiate(psi, config.log_floor);
        inner
            .levels
            .iter()
            .enumerate()
            .all(|(ell, lvl)| !touched[ell] || lvl.coef.iter().all(|&c| c >= coef_floor))
    };
    if !coef_ok(&psi_of(&t)) {
        return Err(Error::InvalidParameter(
            "initial multipliers give a non-concave inner problem".into(),
        ));
    }

    let mut warm = program.uniform_start();
    let evaluate = |t: &[R], warm: &mut Vec<R>| -> (R, Vec<R>, InnerResult<R>) {
        let psi = psi_of(t);
        let inner = program.instantiate(&psi, config.log_floor);
        let result = solve_inner(&inner, warm.clone(), &inner_config, &program.name);
        *warm = result.x.clone();
        let lhs = program.match_values(&result.x, config.log_floor);
        let q = result.objective
            - psi
                .iter()
                .zip(&program.matches)
                .map(|(&p, m)| p * m.rhs)
                .sum::<R>();
        let grad_t: Vec<R> = lhs
            .iter()
            .zip(&program.matches)
            .zip(&scales)
            .map(|((&l, m), &s)| (l - m.rhs) / s)
            .collect();
        (q, grad_t, result)
    };

    let (mut q, mut grad, mut inner_res) = evaluate(&t, &mut warm);
    let mut h: Vec<Vec<R>> = (0..n_c)
        .map(|i| {
            (0..n_c)
                .map(|j| if i == j { R::one() } else { R::zero() })
                .collect()
        })
        .collect();
    let res_norm = |g: &[R]| -> R {
        g.iter().fold(R::zero(), |a, &v| a.max(v.abs()))
    };
    let mut norm = res_norm(&grad);
    let mut trace = vec![norm.to_f64().unwrap_or(f64::NAN)];
    let mut increases = 0usize;
    let mut outer = 0usize;
    let mut converged = norm < config.tol_outer;

    while !converged && outer < config.max_outer {
        outer += 1;
        // d = -H grad
        let mut d = vec![R::zero(); n_c];
        for i in 0..n_c {
            for j in 0..n_c {
                d[i] = d[i] - h[i][j] * grad[j];
            }
        }
        let slope: R = grad.iter().zip(&d).map(|(&g, &x)| g * x).sum();
        if slope >= R::zero() {
            // not a descent direction: reset to damped gradient
            for i in 0..n_c {
                for j in 0..n_c {
                    h[i][j] = if i == j { R::one() } else { R::zero() };
                }
                d[i] = -grad[i];
            }
        }
        let slope: R = grad.iter().zip(&d).map(|(&g, &x)| g * x).sum();
        let mut alpha = R::one();
        let mut accepted = false;
        while alpha > R::of(1e-14) {
            let t_new: Vec<R> = t.iter().zip(&d).map(|(&a, &b)| a + alpha * b).collect();
            if !coef_ok(&psi_of(&t_new)) {
                alpha = alpha * config.backtrack;
                continue;
            }
            let mut warm_trial = warm.clone();
            let (q_new, grad_new, res_new) = evaluate(&t_new, &mut warm_trial);
            if q_new <= q + config.armijo_c1 * alpha * slope {
                let s_vec: Vec<R> = t_new.iter().zip(&t).map(|(&a, &b)| a - b).collect();
                let y_vec: Vec<R> = grad_new.iter().zip(&grad).map(|(&a, &b)| a - b).collect();
                let sy: R = s_vec.iter().zip(&y_vec).map(|(&a, &b)| a * b).sum();
                let s_norm: R = s_vec.iter().map(|&v| v * v).sum::<R>().sqrt();
                let y_norm: R = y_vec.iter().map(|&v| v * v).sum::<R>().sqrt();
                if sy > R::of(1e-12) * s_norm * y_norm {
                    bfgs_update(&mut h, &s_vec, &y_vec, sy);
                }
                t = t_new;
                q = q_new;
                grad = grad_new;
                inner_res = res_new;
                warm = warm_trial;
                accepted = true;
                break;
            }
            alpha = alpha * config.backtrack;
        }
        if !accepted {
            log::warn!("{}: outer line search stalled", program.name);
            break;
        }
        let new_norm = res_norm(&grad);
        trace.push(new_norm.to_f64().unwrap_or(f64::NAN));
        if new_norm >= norm {
            increases += 1;
            if increases >= 10 {
                return Err(Error::Divergence { trace });
            }
        } else {
            increases = 0;
        }
        norm = new_norm;
        converged = norm < config.tol_outer;
        log::debug!(
            "{}: outer {outer} scaled residual {norm}",
            program.name
        );
    }

    let psi = psi_of(&t);
    let duals = label_duals(program, &psi, &grad, &inner_res.group_duals, converged);
    if !converged {
        log::warn!(
            "{}: outer iteration cap reached (scaled residual {norm})",
            program.name
        );
    }
    Ok((
        SolutionState {
            flows: program.flows(&inner_res.x),
            x: inner_res.x,
            objective: inner_res.objective,
            converged: converged && inner_res.converged,
            iterations: outer,
            kkt_residual: norm.max(inner_res.kkt),
        },
        duals,
    ))
}

fn bfgs_update<R: Real>(h: &mut [Vec<R>], s: &[R], y: &[R], sy: R) {
    let n = s.len();
    let rho = R::one() / sy;
    // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
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

fn label_duals<R: Real>(
    program: &ConvexProgram<R>,
    psi: &[R],
    scaled_residuals: &[R],
    group_duals: &[R],
    converged: bool,
) -> DualSolution<R> {
    let mut duals = DualSolution::empty();
    duals.group_duals = group_duals.to_vec();
    let inner = program.instantiate(psi, R::of(1e-300));
    let level_coef = |level: usize| -> R { inner.levels[level].coef[0] };
    let mut nest_scale = None;
    for (m, &p) in program.matches.iter().zip(psi) {
        duals.multipliers.push((m.label.clone(), p));
        match m.role {
            DualRole::ThetaDest => {
                if let MatchKind::LevelEntropy { level, .. } = &m.kind {
                    duals.theta_dest = Some(R::one() / level_coef(*level));
                }
            }
            DualRole::ThetaMode => {
                if let MatchKind::LevelEntropy { level, .. } = &m.kind {
                    let coef = level_coef(*level);
                    duals.theta_mode = Some(R::one() / coef);
                    nest_scale = Some(coef);
                }
            }
            _ => {}
        }
    }
    for (m, &p) in program.matches.iter().zip(psi) {
        match m.role {
            DualRole::TauNest(_) => {
                if let MatchKind::LevelEntropy { level, nodes } = &m.kind {
                    let node = nodes
                        .as_ref()
                        .and_then(|list| list.first().copied())
                        .unwrap_or(0) as usize;
                    let coef = inner.levels[*level].coef[node];
                    let scale = nest_scale.unwrap_or_else(R::one);
                    let tau = coef / scale;
                    let name = m
                        .label
                        .trim_start_matches("tau[")
                        .split(']')
                        .next()
                        .unwrap_or(&m.label)
                        .to_string();
                    if tau > R::one() + R::of(1e-3) {
                        duals
                            .warnings
                            .push(format!("recovered tau[{name}] = {tau} exceeds 1"));
                    }
                    duals.tau.push((name, tau));
                }
            }
            DualRole::BetaDest(_) => duals
                .beta_dest
                .push((strip_label(&m.label), p)),
            DualRole::BetaMode(_) => duals
                .beta_mode
                .push((strip_label(&m.label), p)),
            DualRole::Gamma(_) => duals.gamma.push(p),
            DualRole::Alpha(_) => duals.alpha.push(p),
            DualRole::ColumnBalance(_) => duals.column_duals.push(p),
            _ => {}
        }
    }
    for ((m, &p), &r) in program.matches.iter().zip(psi).zip(scaled_residuals) {
        let degenerate = matches!(
            m.role,
            DualRole::BetaDest(_) | DualRole::BetaMode(_) | DualRole::Alpha(_)
        ) && (p - m.init).abs() < R::of(1e-12)
            && r.abs() < R::of(1e-10);
        if degenerate && converged {
            duals.warnings.push(format!(
                "aggregate constraint [{}] is rank-deficient; multiplier fixed at {}",
                m.label, m.init
            ));
        }
    }
    duals
}

fn strip_label(label: &str) -> String {
    label
        .split('[')
        .nth(1)
        .and_then(|s| s.split(']').next())
        .unwrap_or(label)
        .to_string()
}

/// Residual report of a solution against a program.
#[derive(Debug, Clone)]
pub struct KktReport<R> {
    /// Budget-weighted stationarity residual (max over leaves).
    pub stationarity: R,
    /// Max relative group-budget violation.
    pub group_sum_residual: R,
    /// Per match constraint: label, raw residual, scaled residual.
    pub match_residuals: Vec<(String, R, R)>,
    pub group_duals: Vec<R>,
}

impl<R: Real> KktReport<R> {
    pub fn worst_match_residual(&self) -> R {
        self.match_residuals
            .iter()
            .fold(R::zero(), |a, (_, _, s)| a.max(s.abs()))
    }
}

/// Evaluates first-order optimality of `x` for the program at multipliers
/// `psi` (empty slice for programs without matches).
pub fn check_kkt<R: Real>(
    program: &ConvexProgram<R>,
    psi: &[R],
    x: &[R],
    config: &SolverConfig<R>,
) -> KktReport<R> {
    let inner = program.instantiate(psi, config.log_floor);
    let mut grad = vec![R::zero(); x.len()];
    inner.eval(x, Some(&mut grad));
    let (stat, group_duals) = stationarity(program, x, &grad);
    let mut sums = vec![R::zero(); program.index.n_groups];
    for (l, &g) in program.index.group_of_leaf.iter().enumerate() {
        sums[g as usize] = sums[g as usize] + x[l];
    }
    let group_sum_residual = sums
        .iter()
        .zip(&program.budgets)
        .fold(R::zero(), |a, (&s, &b)| {
            a.max((s - b).abs() / b.abs().max(R::one()))
        });
    let lhs = program.match_values(x, config.log_floor);
    let match_residuals = program
        .matches
        .iter()
        .zip(&lhs)
        .map(|(m, &v)| {
            let raw = v - m.rhs;
            (m.label.clone(), raw, raw / m.rhs.abs().max(R::one()))
        })
        .collect();
    KktReport {
        stationarity: stat,
        group_sum_residual,
        match_residuals,
        group_duals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::{mnl_prob, ModeTree, Nest};
    use crate::programs::{build_max_satis_mnl, build_max_satis_nl};
    use approx::assert_relative_eq;

    #[test]
    fn mnl_program_recovers_closed_form() {
        let v = [1.0f64, 0.0];
        let program = build_max_satis_mnl(&v, 1.0).unwrap();
        let config = SolverConfig::default();
        let (sol, _) = solve_simplex_program(&program, &config).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations < 200, "took {} iterations", sol.iterations);
        let oracle = mnl_prob(&v, 1.0).unwrap();
        for (a, b) in sol.x.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        // optimal objective equals the satisfaction value (choice equation)
        let s = crate::choice::mnl_satisfaction(&v, 1.0).unwrap();
        assert_relative_eq!(sol.objective, s, max_relative = 1e-9);
    }

    #[test]
    fn two_starts_agree() {
        let v = [0.9f64, -0.4, 0.1];
        let program = build_max_satis_mnl(&v, 1.4).unwrap();
        let config = SolverConfig {
            tol_inner: 1e-12,
            ..SolverConfig::default()
        };
        let (a, _) = solve_simplex_program(&program, &config).unwrap();
        let (b, _) =
            solve_simplex_program_from(&program, &config, Some(&[0.7, 0.2, 0.1])).unwrap();
        for (x, y) in a.x.iter().zip(&b.x) {
            assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn iteration_cap_flags_nonconverged() {
        let v = [1.0, 0.0, 2.0];
        let program = build_max_satis_mnl(&v, 1.0).unwrap();
        let config = SolverConfig {
            max_inner: 1,
            tol_inner: 1e-16,
            ..SolverConfig::default()
        };
        let (sol, _) = solve_simplex_program(&program, &config).unwrap();
        assert!(!sol.converged);
    }

    #[test]
    fn determinism_bitwise() {
        let v = [0.3, -0.2, 0.8, 0.0];
        let tree = ModeTree::<f64>::new(
            4,
            vec![
                Nest { name: "a".into(), members: vec![0, 1], tau: 0.5 },
                Nest { name: "b".into(), members: vec![2, 3], tau: 0.8 },
            ],
            1.0,
            1.1,
            1.0,
        )
        .unwrap();
        let program = build_max_satis_nl(&v, &tree).unwrap();
        let config = SolverConfig::default();
        let (s1, _) = solve_simplex_program(&program, &config).unwrap();
        let (s2, _) = solve_simplex_program(&program, &config).unwrap();
        assert_eq!(s1.x, s2.x, "identical runs must be bitwise identical");
        assert_eq!(s1.objective.to_bits(), s2.objective.to_bits());
    }

    #[test]
    fn kkt_detects_perturbation() {
        let v = [1.0, 0.0];
        let program = build_max_satis_mnl(&v, 1.0).unwrap();
        let config = SolverConfig {
            tol_inner: 1e-12,
            ..SolverConfig::default()
        };
        let (sol, _) = solve_simplex_program(&program, &config).unwrap();
        let report = check_kkt(&program, &[], &sol.x, &config);
        assert!(report.stationarity < 1e-8);
        // perturb one coordinate by 1e-3 and renormalize
        let mut bad = sol.x.clone();
        bad[0] += 1e-3;
        let total: f64 = bad.iter().sum();
        for b in &mut bad {
            *b /= total;
        }
        let report = check_kkt(&program, &[], &bad, &config);
        assert!(
            report.stationarity > 1e-4,
            "detector too dull: {}",
            report.stationarity
        );
    }

    #[test]
    fn kkt_symmetric_uniform_is_stationary() {
        let program = build_max_satis_mnl(&[0.5, 0.5, 0.5], 2.0).unwrap();
        let config = SolverConfig::default();
        let x = program.uniform_start();
        let report = check_kkt(&program, &[], &x, &config);
        assert!(report.stationarity < 1e-14);
        assert!(report.group_sum_residual < 1e-14);
    }
}
