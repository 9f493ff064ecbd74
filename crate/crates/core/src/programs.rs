//! Builders for the equivalent convex programs.
//!
//! Every program here maximizes a concave objective over products of scaled
//! simplexes. Decision variables are the finest-level trip counts (leaves);
//! upper-level trips are their partial sums, so normalization constraints at
//! the upper levels hold by construction and link flows are an affine image
//! of the leaves. Entropy terms are written relative to the parent level,
//! `sum_n c_n T_n ln(T_n / (D_n w_n))`, which keeps the objective concave for
//! nonnegative level coefficients.
//!
//! Calibration programs carry *match constraints* (entropy-match and
//! aggregate-match equalities). Dualizing a match folds it into the inner
//! objective: an entropy match raises its level's coefficient by the
//! multiplier, an aggregate match adds `psi * weight` to the leaf utilities.
//! The calibrated behavioral parameters are read off the optimal multipliers.

use crate::choice::Hierarchy;
use crate::error::{Error, Result};
use crate::network::{ModalNetwork, Vdf, ZonalSystem};
use crate::routes::RouteSet;
use crate::scalar::{xlog_ratio, Real};
use crate::table::{Table2, Table3};

/// What the entropy term of a level is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denominator {
    /// The (constant) budget of the node's group.
    Budget,
    /// The running total of the node's parent at the previous level.
    Parent,
    /// Nothing; the term is `c T ln(T / w)`.
    One,
}

/// Node structure of one level.
#[derive(Debug, Clone)]
pub struct LevelIndex {
    /// Node id per leaf.
    pub node_of_leaf: Vec<u32>,
    /// Parent node at the previous level (or group id for the first level).
    pub parent: Vec<u32>,
    pub n_nodes: usize,
}

/// Hierarchical index: groups with budgets, then one or more levels down to
/// the leaves. The last level's nodes are the leaves themselves.
#[derive(Debug, Clone)]
pub struct HierIndex {
    pub n_groups: usize,
    pub group_of_leaf: Vec<u32>,
    pub levels: Vec<LevelIndex>,
}

impl HierIndex {
    pub fn n_leaves(&self) -> usize {
        self.group_of_leaf.len()
    }
}

/// Objective data of one level.
#[derive(Debug, Clone)]
pub struct LevelSpec<R> {
    pub name: String,
    /// Entropy coefficient per node (0 disables the node's term).
    pub coef: Vec<R>,
    /// Reference weight per node (path-size factors at the route level).
    pub weight: Vec<R>,
    pub denom: Denominator,
}

/// Link performance for one flow slot.
#[derive(Debug, Clone)]
pub struct LinkPerf<R> {
    pub vot: R,
    pub vdf: Vdf<R>,
    pub money: R,
}

impl<R: Real> LinkPerf<R> {
    #[inline]
    pub fn cost(&self, flow: R) -> R {
        self.vot * self.vdf.time(flow) + self.money
    }

    #[inline]
    pub fn integral(&self, flow: R) -> R {
        self.vot * self.vdf.time_integral(flow) + self.money * flow
    }
}

/// Smoothed deviation penalty against observed link flows.
#[derive(Debug, Clone)]
pub struct FlowPenalty<R> {
    pub sigma: R,
    pub target: Vec<R>,
    /// Huber half-width; quadratic inside, linear outside.
    pub width: R,
}

impl<R: Real> FlowPenalty<R> {
    #[inline]
    fn rho(&self, z: R) -> R {
        let w = self.width;
        if z.abs() <= w {
            z * z / (w + w)
        } else {
            z.abs() - w / (R::one() + R::one())
        }
    }

    #[inline]
    fn drho(&self, z: R) -> R {
        (z / self.width).max(-R::one()).min(R::one())
    }
}

/// Affine map from leaves to link flows plus the congestion integrand.
#[derive(Debug, Clone)]
pub struct FlowCoupling<R> {
    pub n_slots: usize,
    /// CSR: links used by each leaf.
    pub leaf_offsets: Vec<u32>,
    pub leaf_links: Vec<u32>,
    pub perf: Vec<LinkPerf<R>>,
    pub penalty: Option<FlowPenalty<R>>,
    /// First slot of each mode (mode-major layout).
    pub mode_offsets: Vec<u32>,
}

impl<R: Real> FlowCoupling<R> {
    /// Builds the leaf->link incidence for a hierarchy over a route set.
    pub fn build(
        network: &ModalNetwork<R>,
        route_set: &RouteSet<R>,
        hierarchy: &Hierarchy,
    ) -> Self {
        let mut mode_offsets = Vec::with_capacity(network.n_modes() + 1);
        let mut perf = Vec::new();
        let mut off = 0u32;
        for m in 0..network.n_modes() {
            mode_offsets.push(off);
            for l in network.mode_links(m) {
                perf.push(LinkPerf {
                    vot: network.vot(m),
                    vdf: l.vdf,
                    money: l.money_cost,
                });
                off += 1;
            }
        }
        mode_offsets.push(off);
        let mut leaf_offsets = Vec::with_capacity(hierarchy.n_leaves() + 1);
        let mut leaf_links = Vec::new();
        leaf_offsets.push(0);
        for rn in 0..hierarchy.n_leaves() {
            let entry = &route_set.entries()[hierarchy.route_entry[rn] as usize];
            let route = &entry.routes[hierarchy.route_idx[rn] as usize];
            for &a in &route.links {
                leaf_links.push(mode_offsets[entry.mode] + a as u32);
            }
            leaf_offsets.push(leaf_links.len() as u32);
        }
        Self {
            n_slots: perf.len(),
            leaf_offsets,
            leaf_links,
            perf,
            penalty: None,
            mode_offsets,
        }
    }

    pub fn flows(&self, x: &[R]) -> Vec<R> {
        let mut f = vec![R::zero(); self.n_slots];
        for (l, &xl) in x.iter().enumerate() {
            for k in self.leaf_offsets[l]..self.leaf_offsets[l + 1] {
                let a = self.leaf_links[k as usize] as usize;
                f[a] = f[a] + xl;
            }
        }
        f
    }
}

/// Which behavioral parameter a match constraint's multiplier is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualRole {
    ThetaDest,
    ThetaMode,
    TauNest(usize),
    BetaDest(usize),
    BetaMode(usize),
    Gamma(usize),
    Alpha(usize),
    ColumnBalance(usize),
    Other,
}

/// Left-hand side family of a match constraint.
#[derive(Debug, Clone)]
pub enum MatchKind<R> {
    /// `-sum_{n in nodes} T_n ln(T_n / (D_n w_n))` at one level.
    LevelEntropy {
        level: usize,
        /// `None` means every node of the level.
        nodes: Option<Vec<u32>>,
    },
    /// `sum_l weight_l x_l` over leaves.
    Aggregate { weights: Vec<R> },
}

/// One dualizable equality constraint of a calibration program.
#[derive(Debug, Clone)]
pub struct MatchConstraint<R> {
    pub kind: MatchKind<R>,
    pub rhs: R,
    pub label: String,
    pub role: DualRole,
    pub init: R,
}

/// A maximization program over products of scaled simplexes.
#[derive(Debug, Clone)]
pub struct ConvexProgram<R> {
    pub name: String,
    pub index: HierIndex,
    pub budgets: Vec<R>,
    pub group_names: Vec<String>,
    pub levels: Vec<LevelSpec<R>>,
    pub utilities: Vec<R>,
    pub coupling: Option<FlowCoupling<R>>,
    pub matches: Vec<MatchConstraint<R>>,
    /// Warnings produced while building (degenerate data, derived inputs).
    pub build_warnings: Vec<String>,
}

impl<R: Real> ConvexProgram<R> {
    pub fn n_leaves(&self) -> usize {
        self.index.n_leaves()
    }

    /// Feasible interior start: each group's budget spread uniformly.
    pub fn uniform_start(&self) -> Vec<R> {
        let mut counts = vec![R::zero(); self.index.n_groups];
        for &g in &self.index.group_of_leaf {
            counts[g as usize] = counts[g as usize] + R::one();
        }
        self.index
            .group_of_leaf
            .iter()
            .map(|&g| self.budgets[g as usize] / counts[g as usize])
            .collect()
    }

    /// Projects an arbitrary positive start onto the group budgets.
    pub fn normalized_start(&self, raw: &[R]) -> Vec<R> {
        let mut sums = vec![R::zero(); self.index.n_groups];
        for (l, &v) in raw.iter().enumerate() {
            assert!(v > R::zero(), "start must be strictly positive");
            sums[self.index.group_of_leaf[l] as usize] =
                sums[self.index.group_of_leaf[l] as usize] + v;
        }
        raw.iter()
            .enumerate()
            .map(|(l, &v)| {
                let g = self.index.group_of_leaf[l] as usize;
                v * self.budgets[g] / sums[g]
            })
            .collect()
    }

    /// Node totals per level implied by the leaves.
    pub fn level_totals(&self, x: &[R]) -> Vec<Vec<R>> {
        self.index
            .levels
            .iter()
            .map(|level| {
                let mut t = vec![R::zero(); level.n_nodes];
                for (l, &n) in level.node_of_leaf.iter().enumerate() {
                    t[n as usize] = t[n as usize] + x[l];
                }
                t
            })
            .collect()
    }

    /// Denominator value per node of one level.
    fn denominators(&self, level: usize, totals: &[Vec<R>]) -> Vec<R> {
        let spec = &self.levels[level];
        let idx = &self.index.levels[level];
        (0..idx.n_nodes)
            .map(|n| match spec.denom {
                Denominator::Budget => self.budgets[idx.parent[n] as usize],
                Denominator::Parent => totals[level - 1][idx.parent[n] as usize],
                Denominator::One => R::one(),
            })
            .collect()
    }

    /// Conditional shares `T_n / D_n` per level (with `One`-referenced levels
    /// reported against their group budget).
    pub fn conditionals(&self, x: &[R]) -> Vec<Vec<R>> {
        let totals = self.level_totals(x);
        (0..self.levels.len())
            .map(|ell| {
                let idx = &self.index.levels[ell];
                let denom: Vec<R> = match self.levels[ell].denom {
                    Denominator::One => (0..idx.n_nodes)
                        .map(|n| self.group_budget_of_node(ell, n))
                        .collect(),
                    _ => self.denominators(ell, &totals),
                };
                totals[ell]
                    .iter()
                    .zip(&denom)
                    .map(|(&t, &d)| t / d)
                    .collect()
            })
            .collect()
    }

    fn group_budget_of_node(&self, level: usize, mut node: usize) -> R {
        let mut ell = level;
        while ell > 0 {
            node = self.index.levels[ell].parent[node] as usize;
            ell -= 1;
        }
        self.budgets[self.index.levels[0].parent[node] as usize]
    }

    /// Link flows implied by the leaves (when the program has a network).
    pub fn flows(&self, x: &[R]) -> Option<Vec<R>> {
        self.coupling.as_ref().map(|c| c.flows(x))
    }

    /// Left-hand side of every match constraint at `x`.
    pub fn match_values(&self, x: &[R], log_floor: R) -> Vec<R> {
        let totals = self.level_totals(x);
        self.matches
            .iter()
            .map(|m| match &m.kind {
                MatchKind::Aggregate { weights } => {
                    weights.iter().zip(x).map(|(&w, &v)| w * v).sum()
                }
                MatchKind::LevelEntropy { level, nodes } => {
                    let denom = self.denominators(*level, &totals);
                    let spec = &self.levels[*level];
                    let sum_nodes: Box<dyn Iterator<Item = usize>> = match nodes {
                        None => Box::new(0..self.index.levels[*level].n_nodes),
                        Some(list) => Box::new(list.iter().map(|&n| n as usize)),
                    };
                    let mut acc = R::zero();
                    for n in sum_nodes {
                        acc = acc
                            + xlog_ratio(totals[*level][n], denom[n] * spec.weight[n], log_floor);
                    }
                    -acc
                }
            })
            .collect()
    }

    /// Scaled residuals `(LHS - rhs) / max(1, |rhs|)` of every match.
    pub fn match_residuals(&self, x: &[R], log_floor: R) -> Vec<R> {
        self.match_values(x, log_floor)
            .iter()
            .zip(&self.matches)
            .map(|(&lhs, m)| (lhs - m.rhs) / m.rhs.abs().max(R::one()))
            .collect()
    }

    /// Bakes multipliers into effective level coefficients and utilities.
    pub fn instantiate(&self, psi: &[R], log_floor: R) -> InnerProblem<'_, R> {
        assert_eq!(psi.len(), self.matches.len());
        let mut levels: Vec<InnerLevel<R>> = self
            .levels
            .iter()
            .map(|spec| InnerLevel {
                coef: spec.coef.clone(),
                log_weight: spec.weight.iter().map(|&w| w.ln()).collect(),
                denom: spec.denom,
            })
            .collect();
        let mut utilities = self.utilities.clone();
        for (m, &p) in self.matches.iter().zip(psi) {
            match &m.kind {
                MatchKind::LevelEntropy { level, nodes } => match nodes {
                    None => {
                        for c in &mut levels[*level].coef {
                            *c = *c + p;
                        }
                    }
                    Some(list) => {
                        for &n in list {
                            levels[*level].coef[n as usize] =
                                levels[*level].coef[n as usize] + p;
                        }
                    }
                },
                MatchKind::Aggregate { weights } => {
                    for (u, &w) in utilities.iter_mut().zip(weights) {
                        *u = *u + p * w;
                    }
                }
            }
        }
        InnerProblem {
            program: self,
            levels,
            utilities,
            log_floor,
        }
    }

    /// Human-readable listing of blocks, constraints, and dual labels.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "program {}", self.name);
        let _ = writeln!(
            s,
            "groups: {} (duals lambda_i), budgets {}",
            self.index.n_groups,
            summary(&self.budgets)
        );
        for (ell, spec) in self.levels.iter().enumerate() {
            let _ = writeln!(
                s,
                "level {ell} `{}`: {} nodes, denom {:?}, coef {}",
                spec.name,
                self.index.levels[ell].n_nodes,
                spec.denom,
                summary(&spec.coef)
            );
        }
        let _ = writeln!(s, "leaf utilities: {}", summary(&self.utilities));
        if let Some(c) = &self.coupling {
            let _ = writeln!(
                s,
                "congestion: {} link slots{}",
                c.n_slots,
                match &c.penalty {
                    Some(p) => format!(
                        ", flow deviation penalty sigma={} width={}",
                        p.sigma, p.width
                    ),
                    None => String::new(),
                }
            );
        }
        for m in &self.matches {
            let kind = match &m.kind {
                MatchKind::LevelEntropy { level, nodes } => format!(
                    "entropy-match level {level}{}",
                    match nodes {
                        None => String::new(),
                        Some(list) => format!(" ({} nodes)", list.len()),
                    }
                ),
                MatchKind::Aggregate { .. } => "aggregate-match".to_string(),
            };
            let _ = writeln!(s, "constraint {kind} rhs={} dual [{}]", m.rhs, m.label);
        }
        s
    }
}

fn summary<R: Real>(v: &[R]) -> String {
    if v.len() <= 6 {
        format!("{v:?}")
    } else {
        format!(
            "[{}, {}, ... ({} entries, sum {})]",
            v[0],
            v[1],
            v.len(),
            v.iter().copied().sum::<R>()
        )
    }
}

/// Level data with multipliers folded in.
#[derive(Debug, Clone)]
pub struct InnerLevel<R> {
    pub coef: Vec<R>,
    pub log_weight: Vec<R>,
    pub denom: Denominator,
}

/// A program instantiated at fixed multipliers: a smooth concave objective
/// over the group simplexes, ready for the first-order solver.
pub struct InnerProblem<'a, R> {
    pub program: &'a ConvexProgram<R>,
    pub levels: Vec<InnerLevel<R>>,
    pub utilities: Vec<R>,
    pub log_floor: R,
}

impl<R: Real> InnerProblem<'_, R> {
    pub fn n_leaves(&self) -> usize {
        self.program.n_leaves()
    }

    /// Objective value and (optionally) its gradient at `x`.
    pub fn eval(&self, x: &[R], mut grad: Option<&mut [R]>) -> R {
        let index = &self.program.index;
        let totals = self.program.level_totals(x);
        let mut value = R::zero();
        for (l, &xl) in x.iter().enumerate() {
            value = value + self.utilities[l] * xl;
        }
        if let Some(g) = grad.as_deref_mut() {
            g.copy_from_slice(&self.utilities);
        }

        for (ell, level) in self.levels.iter().enumerate() {
            let idx = &index.levels[ell];
            let denom = self.program.denominators(ell, &totals);
            for n in 0..idx.n_nodes {
                let c = level.coef[n];
                if c != R::zero() {
                    let t = totals[ell][n];
                    if t > self.log_floor {
                        value = value
                            - c * t * ((t / denom[n].max(self.log_floor)).ln()
                                - level.log_weight[n]);
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                // parent-referenced levels need the coefficient-weighted
                // child share for the quotient-rule term
                let cbar: Option<Vec<R>> = if level.denom == Denominator::Parent {
                    let prev_nodes = index.levels[ell - 1].n_nodes;
                    let mut acc = vec![R::zero(); prev_nodes];
                    for n in 0..idx.n_nodes {
                        let p = idx.parent[n] as usize;
                        acc[p] = acc[p] + level.coef[n] * totals[ell][n];
                    }
                    for (p, a) in acc.iter_mut().enumerate() {
                        let tp = totals[ell - 1][p];
                        *a = if tp > self.log_floor { *a / tp } else { R::zero() };
                    }
                    Some(acc)
                } else {
                    None
                };
                for (l, &n_raw) in idx.node_of_leaf.iter().enumerate() {
                    let n = n_raw as usize;
                    let c = level.coef[n];
                    let mut term = R::zero();
                    if c != R::zero() {
                        let t = totals[ell][n].max(self.log_floor);
                        let d = denom[n].max(self.log_floor);
                        term = c * ((t / d).ln() - level.log_weight[n] + R::one());
                    }
                    if let Some(cb) = &cbar {
                        term = term - cb[idx.parent[n] as usize];
                    }
                    g[l] = g[l] - term;
                }
            }
        }

        if let Some(c) = &self.program.coupling {
            let flows = c.flows(x);
            let mut marginal = vec![R::zero(); c.n_slots];
            for (a, &f) in flows.iter().enumerate() {
                value = value - c.perf[a].integral(f);
                marginal[a] = c.perf[a].cost(f);
            }
            if let Some(p) = &c.penalty {
                if p.sigma > R::zero() {
                    for (a, &f) in flows.iter().enumerate() {
                        let z = f - p.target[a];
                        value = value - p.sigma * p.rho(z);
                        marginal[a] = marginal[a] + p.sigma * p.drho(z);
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for l in 0..x.len() {
                    let mut acc = R::zero();
                    for k in c.leaf_offsets[l]..c.leaf_offsets[l + 1] {
                        acc = acc + marginal[c.leaf_links[k as usize] as usize];
                    }
                    g[l] = g[l] - acc;
                }
            }
        }
        value
    }
}

/// Observed trip tables aligned with a [`Hierarchy`], plus optional link
/// counts. Hierarchy consistency is validated on construction.
#[derive(Debug, Clone)]
pub struct ObservationBundle<R> {
    pub t_dest: Vec<R>,
    pub t_nest: Vec<R>,
    pub t_mode: Vec<R>,
    /// Observed link flows in mode-major slot order.
    pub link_flows: Option<Vec<R>>,
    pub sigma: R,
    /// True when the nest level was derived by summing mode-level trips.
    pub nest_level_derived: bool,
}

impl<R: Real> ObservationBundle<R> {
    pub fn new(
        hierarchy: &Hierarchy,
        zones: &ZonalSystem<R>,
        t_dest: Vec<R>,
        t_nest: Vec<R>,
        t_mode: Vec<R>,
        link_flows: Option<Vec<R>>,
        sigma: R,
    ) -> Result<Self> {
        let bundle = Self {
            t_dest,
            t_nest,
            t_mode,
            link_flows,
            sigma,
            nest_level_derived: false,
        };
        bundle.validate(hierarchy, zones)?;
        Ok(bundle)
    }

    /// Builds a bundle from mode-level observations only; the nest level is
    /// summed up with a warning since it is normally a separate input.
    pub fn from_mode_level(
        hierarchy: &Hierarchy,
        zones: &ZonalSystem<R>,
        t_dest: Vec<R>,
        t_mode: Vec<R>,
        link_flows: Option<Vec<R>>,
        sigma: R,
    ) -> Result<Self> {
        log::warn!("nest-level observations missing; deriving them by summing mode-level trips");
        let mut t_nest = vec![R::zero(); hierarchy.nest_id.len()];
        for (mn, &p) in hierarchy.mode_parent.iter().enumerate() {
            t_nest[p as usize] = t_nest[p as usize] + t_mode[mn];
        }
        let mut bundle = Self::new(hierarchy, zones, t_dest, t_nest, t_mode, link_flows, sigma)?;
        bundle.nest_level_derived = true;
        Ok(bundle)
    }

    fn validate(&self, h: &Hierarchy, zones: &ZonalSystem<R>) -> Result<()> {
        let tol = R::of(1e-9);
        let check = |name: &str, lhs: R, rhs: R| -> Result<()> {
            if (lhs - rhs).abs() > tol * rhs.abs().max(R::one()) {
                return Err(Error::HierarchyViolation {
                    constraint: name.to_string(),
                    lhs: lhs.to_f64().unwrap_or(f64::NAN),
                    rhs: rhs.to_f64().unwrap_or(f64::NAN),
                });
            }
            Ok(())
        };
        if self.t_dest.len() != h.dest_zone.len()
            || self.t_nest.len() != h.nest_id.len()
            || self.t_mode.len() != h.mode_id.len()
        {
            return Err(Error::InvalidParameter(
                "observation tables do not match the hierarchy".into(),
            ));
        }
        for (tag, t) in [("T_ij", &self.t_dest), ("T_ijM", &self.t_nest), ("T_ijm", &self.t_mode)]
        {
            if t.iter().any(|&v| !(v > R::zero())) {
                return Err(Error::InvalidParameter(format!(
                    "observed {tag} cells must be strictly positive"
                )));
            }
        }
        for oi in 0..h.n_origins() {
            let lhs: R = (0..h.dest_zone.len())
                .filter(|&d| h.dest_parent[d] as usize == oi)
                .map(|d| self.t_dest[d])
                .sum();
            check("sum_j T_ij = O_i", lhs, zones.production(h.origins[oi]))?;
        }
        for d in 0..h.dest_zone.len() {
            let lhs: R = (0..h.nest_id.len())
                .filter(|&nn| h.nest_parent[nn] as usize == d)
                .map(|nn| self.t_nest[nn])
                .sum();
            check("sum_M T_ijM = T_ij", lhs, self.t_dest[d])?;
        }
        for nn in 0..h.nest_id.len() {
            let lhs: R = (0..h.mode_id.len())
                .filter(|&mn| h.mode_parent[mn] as usize == nn)
                .map(|mn| self.t_mode[mn])
                .sum();
            check("sum_m T_ijm = T_ijM", lhs, self.t_nest[nn])?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

fn single_group_index(n_leaves: usize, node_of_leaf: Vec<Vec<u32>>, parents: Vec<Vec<u32>>, sizes: Vec<usize>) -> HierIndex {
    HierIndex {
        n_groups: 1,
        group_of_leaf: vec![0; n_leaves],
        levels: node_of_leaf
            .into_iter()
            .zip(parents)
            .zip(sizes)
            .map(|((node_of_leaf, parent), n_nodes)| LevelIndex {
                node_of_leaf,
                parent,
                n_nodes,
            })
            .collect(),
    }
}

/// Satisfaction-maximization substitute for the MNL: maximize
/// `sum v p - (1/theta) sum p ln p` on the simplex.
pub fn build_max_satis_mnl<R: Real>(v: &[R], theta: R) -> Result<ConvexProgram<R>> {
    if v.is_empty() {
        return Err(Error::EmptyChoiceSet);
    }
    if !(theta > R::zero()) {
        return Err(Error::InvalidParameter("theta must be positive".into()));
    }
    let n = v.len();
    let index = single_group_index(
        n,
        vec![(0..n as u32).collect()],
        vec![vec![0; n]],
        vec![n],
    );
    Ok(ConvexProgram {
        name: "max-satisfaction-mnl".into(),
        index,
        budgets: vec![R::one()],
        group_names: vec!["choice".into()],
        levels: vec![LevelSpec {
            name: "alternative".into(),
            coef: vec![R::one() / theta; n],
            weight: vec![R::one(); n],
            denom: Denominator::Budget,
        }],
        utilities: v.to_vec(),
        coupling: None,
        matches: Vec::new(),
        build_warnings: Vec::new(),
    })
}

/// Satisfaction-maximization substitute for the nested logit. Admits
/// `tau = 0` (perfectly correlated alternatives), unlike the closed form.
pub fn build_max_satis_nl<R: Real>(
    v: &[R],
    tree: &crate::choice::ModeTree<R>,
) -> Result<ConvexProgram<R>> {
    if v.is_empty() {
        return Err(Error::EmptyChoiceSet);
    }
    if v.len() != tree.n_modes() {
        return Err(Error::InvalidParameter(
            "utility vector length must match the tree".into(),
        ));
    }
    let n = v.len();
    let theta = tree.theta_mode;
    let nest_of: Vec<u32> = (0..n).map(|m| tree.nest_of(m) as u32).collect();
    let index = single_group_index(
        n,
        vec![nest_of.clone(), (0..n as u32).collect()],
        vec![vec![0; tree.nests().len()], nest_of.clone()],
        vec![tree.nests().len(), n],
    );
    let alt_coef: Vec<R> = (0..n)
        .map(|m| tree.nests()[tree.nest_of(m)].tau / theta)
        .collect();
    Ok(ConvexProgram {
        name: "max-satisfaction-nl".into(),
        index,
        budgets: vec![R::one()],
        group_names: vec!["choice".into()],
        levels: vec![
            LevelSpec {
                name: "nest".into(),
                coef: vec![R::one() / theta; tree.nests().len()],
                weight: vec![R::one(); tree.nests().len()],
                denom: Denominator::Budget,
            },
            LevelSpec {
                name: "alternative".into(),
                coef: alt_coef,
                weight: vec![R::one(); n],
                denom: Denominator::Parent,
            },
        ],
        utilities: v.to_vec(),
        coupling: None,
        matches: Vec::new(),
        build_warnings: Vec::new(),
    })
}

/// Individual-level choice observations for entropy-based estimation.
#[derive(Debug, Clone)]
pub struct ChoiceSample<R> {
    pub n_alternatives: usize,
    /// Chosen alternative per individual.
    pub chosen: Vec<usize>,
    /// Attribute tables, one `(individual, alternative)` table per attribute.
    pub attrs: Vec<Table2<R>>,
    pub attr_names: Vec<String>,
}

/// Entropy-maximization estimator for the MNL: most random predictions that
/// reproduce observed choice counts (duals `gamma`) and observed aggregate
/// attributes (duals `alpha`).
pub fn build_max_entropy_mnl<R: Real>(sample: &ChoiceSample<R>, theta: R) -> Result<ConvexProgram<R>> {
    let n_h = sample.chosen.len();
    let n_m = sample.n_alternatives;
    if n_h == 0 || n_m == 0 {
        return Err(Error::EmptyChoiceSet);
    }
    if !(theta > R::zero()) {
        return Err(Error::InvalidParameter("theta must be positive".into()));
    }
    let n = n_h * n_m;
    let index = HierIndex {
        n_groups: n_h,
        group_of_leaf: (0..n).map(|l| (l / n_m) as u32).collect(),
        levels: vec![LevelIndex {
            node_of_leaf: (0..n as u32).collect(),
            parent: (0..n).map(|l| (l / n_m) as u32).collect(),
            n_nodes: n,
        }],
    };
    let mut matches = Vec::new();
    for m in 0..n_m {
        let weights: Vec<R> = (0..n)
            .map(|l| if l % n_m == m { R::one() } else { R::zero() })
            .collect();
        let count = sample.chosen.iter().filter(|&&c| c == m).count();
        matches.push(MatchConstraint {
            kind: MatchKind::Aggregate { weights },
            rhs: R::count(count),
            label: format!("gamma[{m}]"),
            role: DualRole::Gamma(m),
            init: R::zero(),
        });
    }
    for (k, table) in sample.attrs.iter().enumerate() {
        let weights: Vec<R> = (0..n).map(|l| table.get(l / n_m, l % n_m)).collect();
        let rhs: R = sample
            .chosen
            .iter()
            .enumerate()
            .map(|(h, &c)| table.get(h, c))
            .sum();
        matches.push(MatchConstraint {
            kind: MatchKind::Aggregate { weights },
            rhs,
            label: format!(
                "alpha[{}]",
                sample
                    .attr_names
                    .get(k)
                    .cloned()
                    .unwrap_or_else(|| k.to_string())
            ),
            role: DualRole::Alpha(k),
            init: R::zero(),
        });
    }
    Ok(ConvexProgram {
        name: "max-entropy-mnl".into(),
        index,
        budgets: vec![R::one(); n_h],
        group_names: (0..n_h).map(|h| format!("individual {h}")).collect(),
        levels: vec![LevelSpec {
            name: "alternative".into(),
            coef: vec![R::one() / theta; n],
            weight: vec![R::one(); n],
            denom: Denominator::Budget,
        }],
        utilities: vec![R::zero(); n],
        coupling: None,
        matches,
        build_warnings: Vec::new(),
    })
}

/// Two-level destination/mode index over zones (no nests, no routes).
/// Leaves ordered origin-major, then destination, then mode.
pub struct DestModeIndex {
    pub origins: Vec<usize>,
    pub dest_zone: Vec<usize>,
    pub dest_parent: Vec<u32>,
    pub n_modes: usize,
}

impl DestModeIndex {
    pub fn build<R: Real>(zones: &ZonalSystem<R>, n_modes: usize) -> Result<Self> {
        let origins = zones.origins();
        if origins.is_empty() {
            return Err(Error::InvalidParameter(
                "no origin has positive production".into(),
            ));
        }
        let mut dest_zone = Vec::new();
        let mut dest_parent = Vec::new();
        for (oi, &zi) in origins.iter().enumerate() {
            for &zj in &zones.destinations() {
                if zj != zi {
                    dest_parent.push(oi as u32);
                    dest_zone.push(zj);
                }
            }
        }
        if dest_zone.is_empty() {
            return Err(Error::InvalidParameter("no destinations".into()));
        }
        Ok(Self {
            origins,
            dest_zone,
            dest_parent,
            n_modes,
        })
    }

    fn hier_index(&self) -> HierIndex {
        let n_dest = self.dest_zone.len();
        let n = n_dest * self.n_modes;
        HierIndex {
            n_groups: self.origins.len(),
            group_of_leaf: (0..n)
                .map(|l| self.dest_parent[l / self.n_modes])
                .collect(),
            levels: vec![
                LevelIndex {
                    node_of_leaf: (0..n).map(|l| (l / self.n_modes) as u32).collect(),
                    parent: self.dest_parent.clone(),
                    n_nodes: n_dest,
                },
                LevelIndex {
                    node_of_leaf: (0..n as u32).collect(),
                    parent: (0..n).map(|l| (l / self.n_modes) as u32).collect(),
                    n_nodes: n,
                },
            ],
        }
    }
}

/// Hierarchical destination/mode calibration: entropy objective with
/// entropy-match and aggregate-match constraints whose duals are the level
/// scales and utility coefficients.
pub fn build_hier_mnl<R: Real>(
    zones: &ZonalSystem<R>,
    utilities: &crate::choice::UtilitySpec<R>,
    t_ij: &Table2<R>,
    t_ijm: &Table3<R>,
) -> Result<ConvexProgram<R>> {
    let idx = DestModeIndex::build(zones, utilities.mode_attrs.first().map_or(1, |t| t.dims().2))?;
    let n_modes = idx.n_modes;
    let n_dest = idx.dest_zone.len();
    let n = n_dest * n_modes;
    for d in 0..n_dest {
        let (zi, zj) = (idx.origins[idx.dest_parent[d] as usize], idx.dest_zone[d]);
        if !(t_ij.get(zi, zj) > R::zero()) {
            return Err(Error::InvalidParameter(format!(
                "observed T[{zi},{zj}] must be positive"
            )));
        }
        for m in 0..n_modes {
            if !(t_ijm.get(zi, zj, m) > R::zero()) {
                return Err(Error::InvalidParameter(format!(
                    "observed T[{zi},{zj},{m}] must be positive"
                )));
            }
        }
    }

    let mut rhs_dest = R::zero();
    let mut rhs_mode = R::zero();
    for d in 0..n_dest {
        let (zi, zj) = (idx.origins[idx.dest_parent[d] as usize], idx.dest_zone[d]);
        let o = zones.production(zi);
        rhs_dest = rhs_dest - t_ij.get(zi, zj) * (t_ij.get(zi, zj) / o).ln();
        for m in 0..n_modes {
            rhs_mode =
                rhs_mode - t_ijm.get(zi, zj, m) * (t_ijm.get(zi, zj, m) / t_ij.get(zi, zj)).ln();
        }
    }
    let mut matches = vec![
        MatchConstraint {
            kind: MatchKind::LevelEntropy { level: 0, nodes: None },
            rhs: rhs_dest,
            label: "1/theta_j".into(),
            role: DualRole::ThetaDest,
            init: R::zero(),
        },
        MatchConstraint {
            kind: MatchKind::LevelEntropy { level: 1, nodes: None },
            rhs: rhs_mode,
            label: "1/theta_m".into(),
            role: DualRole::ThetaMode,
            init: R::zero(),
        },
    ];
    for (k, table) in utilities.dest_attrs.iter().enumerate() {
        let weights: Vec<R> = (0..n)
            .map(|l| {
                let d = l / n_modes;
                table.get(idx.origins[idx.dest_parent[d] as usize], idx.dest_zone[d])
            })
            .collect();
        let rhs: R = (0..n_dest)
            .map(|d| {
                let (zi, zj) = (idx.origins[idx.dest_parent[d] as usize], idx.dest_zone[d]);
                t_ij.get(zi, zj) * table.get(zi, zj)
            })
            .sum();
        matches.push(MatchConstraint {
            kind: MatchKind::Aggregate { weights },
            rhs,
            label: format!("beta_k[{}]", utilities.dest_attr_names[k]),
            role: DualRole::BetaDest(k),
            init: R::zero(),
        });
    }
    for (q, table) in utilities.mode_attrs.iter().enumerate() {
        let weights: Vec<R> = (0..n)
            .map(|l| {
                let d = l / n_modes;
                table.get(
                    idx.origins[idx.dest_parent[d] as usize],
                    idx.dest_zone[d],
                    l % n_modes,
                )
            })
            .collect();
        let rhs: R = (0..n_dest)
            .flat_map(|d| (0..n_modes).map(move |m| (d, m)))
            .map(|(d, m)| {
                let (zi, zj) = (idx.origins[idx.dest_parent[d] as usize], idx.dest_zone[d]);
                t_ijm.get(zi, zj, m) * table.get(zi, zj, m)
            })
            .sum();
        matches.push(MatchConstraint {
            kind: MatchKind::Aggregate { weights },
            rhs,
            label: format!("beta_q[{}]", utilities.mode_attr_names[q]),
            role: DualRole::BetaMode(q),
            init: R::zero(),
        });
    }
    Ok(ConvexProgram {
        name: "hier-mnl".into(),
        index: idx.hier_index(),
        budgets: idx.origins.iter().map(|&z| zones.production(z)).collect(),
        group_names: idx.origins.iter().map(|&z| zones.id(z).to_string()).collect(),
        levels: vec![
            LevelSpec {
                name: "destination".into(),
                coef: vec![R::one(); n_dest],
                weight: vec![R::one(); n_dest],
                denom: Denominator::Budget,
            },
            LevelSpec {
                name: "mode".into(),
                coef: vec![R::one(); n],
                weight: vec![R::one(); n],
                denom: Denominator::Parent,
            },
        ],
        utilities: vec![R::zero(); n],
        coupling: None,
        matches,
        build_warnings: Vec::new(),
    })
}

/// Destination/mode program with given scales and utilities; its optimum is
/// the closed-form two-level logit.
pub fn build_hier_mnl_variant<R: Real>(
    zones: &ZonalSystem<R>,
    v_dest: &Table2<R>,
    v_mode: &Table3<R>,
    theta_dest: R,
    theta_mode: R,
) -> Result<ConvexProgram<R>> {
    if !(theta_dest > R::zero()) || !(theta_mode > R::zero()) {
        return Err(Error::InvalidParameter("scales must be positive".into()));
    }
    let n_modes = v_mode.dims().2;
    let idx = DestModeIndex::build(zones, n_modes)?;
    let n_dest = idx.dest_zone.len();
    let n = n_dest * n_modes;
    let utilities: Vec<R> = (0..n)
        .map(|l| {
            let d = l / n_modes;
            let (zi, zj) = (idx.origins[idx.dest_parent[d] as usize], idx.dest_zone[d]);
            v_dest.get(zi, zj) + v_mode.get(zi, zj, l % n_modes)
        })
        .collect();
    Ok(ConvexProgram {
        name: "hier-mnl-given-parameters".into(),
        index: idx.hier_index(),
        budgets: idx.origins.iter().map(|&z| zones.production(z)).collect(),
        group_names: idx.origins.iter().map(|&z| zones.id(z).to_string()).collect(),
        levels: vec![
            LevelSpec {
                name: "destination".into(),
                coef: vec![R::one() / theta_dest; n_dest],
                weight: vec![R::one(); n_dest],
                denom: Denominator::Budget,
            },
            LevelSpec {
                name: "mode".into(),
                coef: vec![R::one() / theta_mode; n],
                weight: vec![R::one(); n],
                denom: Denominator::Parent,
            },
        ],
        utilities,
        coupling: None,
        matches: Vec::new(),
        build_warnings: Vec::new(),
    })
}

/// Same model in trip-count variables with absolute entropies: coefficients
/// `1/theta_j' = 1/theta_j - 1/theta_m` on `T_ij ln T_ij` and `1/theta_m`
/// on `T_ijm ln T_ijm`. The destination coefficient may legitimately be
/// negative; the program stays concave because the two terms combine into a
/// parent-relative entropy. A warning is recorded in that case.
pub fn build_hier_mnl_variant2<R: Real>(
    zones: &ZonalSystem<R>,
    v_dest: &Table2<R>,
    v_mode: &Table3<R>,
    theta_dest: R,
    theta_mode: R,
) -> Result<ConvexProgram<R>> {
    if !(theta_dest > R::zero()) || !(theta_mode > R::zero()) {
        return Err(Error::InvalidParameter("scales must be positive".into()));
    }
    let mut program = build_hier_mnl_variant(zones, v_dest, v_mode, theta_dest, theta_mode)?;
    program.name = "hier-mnl-trip-variables".into();
    let prime = R::one() / theta_dest - R::one() / theta_mode;
    // absolute destination entropy with the reduced coefficient
    program.levels[0] = LevelSpec {
        name: "destination".into(),
        coef: vec![prime; program.index.levels[0].n_nodes],
        weight: vec![R::one(); program.index.levels[0].n_nodes],
        denom: Denominator::One,
    };
    program.levels[1].denom = Denominator::One;
    if prime < R::zero() {
        program.build_warnings.push(format!(
            "1/theta_j' = 1/theta_j - 1/theta_m = {prime} is negative; objective remains concave"
        ));
    }
    Ok(program)
}

/// Parameters shared by the two network-coupled builders.
fn hierarchy_index(h: &Hierarchy) -> HierIndex {
    let n_leaves = h.n_leaves();
    let mut group_of_leaf = vec![0u32; n_leaves];
    let mut dest_of_leaf = vec![0u32; n_leaves];
    let mut nest_of_leaf = vec![0u32; n_leaves];
    let mut mode_of_leaf = vec![0u32; n_leaves];
    for rn in 0..n_leaves {
        let mn = h.route_parent[rn] as usize;
        let nn = h.mode_parent[mn] as usize;
        let d = h.nest_parent[nn] as usize;
        mode_of_leaf[rn] = mn as u32;
        nest_of_leaf[rn] = nn as u32;
        dest_of_leaf[rn] = d as u32;
        group_of_leaf[rn] = h.dest_parent[d];
    }
    HierIndex {
        n_groups: h.n_origins(),
        group_of_leaf,
        levels: vec![
            LevelIndex {
                node_of_leaf: dest_of_leaf,
                parent: h.dest_parent.clone(),
                n_nodes: h.dest_zone.len(),
            },
            LevelIndex {
                node_of_leaf: nest_of_leaf,
                parent: h.nest_parent.clone(),
                n_nodes: h.nest_id.len(),
            },
            LevelIndex {
                node_of_leaf: mode_of_leaf,
                parent: h.mode_parent.clone(),
                n_nodes: h.mode_id.len(),
            },
            LevelIndex {
                node_of_leaf: (0..n_leaves as u32).collect(),
                parent: h.route_parent.clone(),
                n_nodes: n_leaves,
            },
        ],
    }
}

fn route_ps_weights<R: Real>(h: &Hierarchy, route_set: &RouteSet<R>) -> Vec<R> {
    (0..h.n_leaves())
        .map(|rn| route_set.entries()[h.route_entry[rn] as usize].ps[h.route_idx[rn] as usize])
        .collect()
}

fn leaf_utilities<R: Real>(h: &Hierarchy, utilities: &crate::choice::UtilitySpec<R>) -> Vec<R> {
    (0..h.n_leaves())
        .map(|rn| {
            let mn = h.route_parent[rn] as usize;
            let nn = h.mode_parent[mn] as usize;
            let d = h.nest_parent[nn] as usize;
            let zi = h.origins[h.dest_parent[d] as usize];
            let zj = h.dest_zone[d];
            utilities.v_dest(zi, zj) + utilities.v_mode(zi, zj, h.mode_id[mn])
        })
        .collect()
}

/// Calibration program for the full hierarchy: route-level entropy plus the
/// congestion integral in the objective; destination, nest, and per-nest
/// mode entropies plus attribute aggregates as match constraints. The duals
/// are `1/theta_j`, `1/theta_m`, `tau_M/theta_m`, `beta_k`, `beta_q`.
#[allow(clippy::too_many_arguments)]
pub fn build_first_stage<R: Real>(
    network: &ModalNetwork<R>,
    route_set: &RouteSet<R>,
    hierarchy: &Hierarchy,
    zones: &ZonalSystem<R>,
    tree: &crate::choice::ModeTree<R>,
    utilities: &crate::choice::UtilitySpec<R>,
    bundle: &ObservationBundle<R>,
    theta_route: R,
) -> Result<ConvexProgram<R>> {
    if !(theta_route > R::zero()) {
        return Err(Error::InvalidParameter("theta_route must be positive".into()));
    }
    let h = hierarchy;
    let index = hierarchy_index(h);
    let n_leaves = h.n_leaves();
    let budgets: Vec<R> = h.origins.iter().map(|&z| zones.production(z)).collect();

    // entropy-match right-hand sides from the observed tables
    let mut rhs_dest = R::zero();
    for d in 0..h.dest_zone.len() {
        let o = zones.production(h.origins[h.dest_parent[d] as usize]);
        rhs_dest = rhs_dest - bundle.t_dest[d] * (bundle.t_dest[d] / o).ln();
    }
    let mut rhs_nest = R::zero();
    for nn in 0..h.nest_id.len() {
        let parent = bundle.t_dest[h.nest_parent[nn] as usize];
        rhs_nest = rhs_nest - bundle.t_nest[nn] * (bundle.t_nest[nn] / parent).ln();
    }
    let mut matches = vec![
        MatchConstraint {
            kind: MatchKind::LevelEntropy { level: 0, nodes: None },
            rhs: rhs_dest,
            label: "1/theta_j".into(),
            role: DualRole::ThetaDest,
            init: R::one(),
        },
        MatchConstraint {
            kind: MatchKind::LevelEntropy { level: 1, nodes: None },
            rhs: rhs_nest,
            label: "1/theta_m".into(),
            role: DualRole::ThetaMode,
            init: R::one(),
        },
    ];
    for (ni, nest) in tree.nests().iter().enumerate() {
        let nodes: Vec<u32> = (0..h.mode_id.len() as u32)
            .filter(|&mn| h.nest_id[h.mode_parent[mn as usize] as usize] == ni)
            .collect();
        let rhs: R = nodes
            .iter()
            .map(|&mn| {
                let parent = bundle.t_nest[h.mode_parent[mn as usize] as usize];
                -bundle.t_mode[mn as usize] * (bundle.t_mode[mn as usize] / parent).ln()
            })
            .sum();
        matches.push(MatchConstraint {
            kind: MatchKind::LevelEntropy { level: 2, nodes: Some(nodes) },
            rhs,
            label: format!("tau[{}]/theta_m", nest.name),
            role: DualRole::TauNest(ni),
            init: R::of(0.75),
        });
    }
    for (k, table) in utilities.dest_attrs.iter().enumerate() {
        let weights: Vec<R> = (0..n_leaves)
            .map(|rn| {
                let d = leaf_dest(h, rn);
                table.get(h.origins[h.dest_parent[d] as usize], h.dest_zone[d])
            })
            .collect();
        let rhs: R = (0..h.dest_zone.len())
            .map(|d| {
                bundle.t_dest[d]
                    * table.get(h.origins[h.dest_parent[d] as usize], h.dest_zone[d])
            })
            .sum();
        matches.push(MatchConstraint {
            kind: MatchKind::Aggregate { weights },
            rhs,
            label: format!("beta_k[{}]", utilities.dest_attr_names[k]),
            role: DualRole::BetaDest(k),
            init: R::zero(),
        });
    }
    for (q, table) in utilities.mode_attrs.iter().enumerate() {
        let weights: Vec<R> = (0..n_leaves)
            .map(|rn| {
                let mn = h.route_parent[rn] as usize;
                let d = leaf_dest(h, rn);
                table.get(
                    h.origins[h.dest_parent[d] as usize],
                    h.dest_zone[d],
                    h.mode_id[mn],
                )
            })
            .collect();
        let rhs: R = (0..h.mode_id.len())
            .map(|mn| {
                let d = h.nest_parent[h.mode_parent[mn] as usize] as usize;
                bundle.t_mode[mn]
                    * table.get(
                        h.origins[h.dest_parent[d] as usize],
                        h.dest_zone[d],
                        h.mode_id[mn],
                    )
            })
            .sum();
        matches.push(MatchConstraint {
            kind: MatchKind::Aggregate { weights },
            rhs,
            label: format!("beta_q[{}]", utilities.mode_attr_names[q]),
            role: DualRole::BetaMode(q),
            init: R::zero(),
        });
    }

    Ok(ConvexProgram {
        name: "first-stage".into(),
        index,
        budgets,
        group_names: h.origins.iter().map(|&z| zones.id(z).to_string()).collect(),
        levels: vec![
            LevelSpec {
                name: "destination".into(),
                coef: vec![R::zero(); h.dest_zone.len()],
                weight: vec![R::one(); h.dest_zone.len()],
                denom: Denominator::Budget,
            },
            LevelSpec {
                name: "nest".into(),
                coef: vec![R::zero(); h.nest_id.len()],
                weight: vec![R::one(); h.nest_id.len()],
                denom: Denominator::Parent,
            },
            LevelSpec {
                name: "mode".into(),
                coef: vec![R::zero(); h.mode_id.len()],
                weight: vec![R::one(); h.mode_id.len()],
                denom: Denominator::Parent,
            },
            LevelSpec {
                name: "route".into(),
                coef: vec![R::one() / theta_route; n_leaves],
                weight: route_ps_weights(h, route_set),
                denom: Denominator::Parent,
            },
        ],
        utilities: vec![R::zero(); n_leaves],
        coupling: Some(FlowCoupling::build(network, route_set, h)),
        matches,
        build_warnings: Vec::new(),
    })
}

fn leaf_dest(h: &Hierarchy, rn: usize) -> usize {
    let mn = h.route_parent[rn] as usize;
    h.nest_parent[h.mode_parent[mn] as usize] as usize
}

/// First-stage variant balancing user equilibrium against observed link
/// counts via a smoothed (Huber) deviation penalty with weight `sigma`.
/// `sigma = 0` reproduces the plain calibration program exactly.
#[allow(clippy::too_many_arguments)]
pub fn build_first_stage_variant<R: Real>(
    network: &ModalNetwork<R>,
    route_set: &RouteSet<R>,
    hierarchy: &Hierarchy,
    zones: &ZonalSystem<R>,
    tree: &crate::choice::ModeTree<R>,
    utilities: &crate::choice::UtilitySpec<R>,
    bundle: &ObservationBundle<R>,
    theta_route: R,
    huber_width: R,
) -> Result<ConvexProgram<R>> {
    if bundle.sigma < R::zero() {
        return Err(Error::InvalidParameter("sigma must be nonnegative".into()));
    }
    let mut program = build_first_stage(
        network, route_set, hierarchy, zones, tree, utilities, bundle, theta_route,
    )?;
    program.name = "first-stage-link-counts".into();
    if bundle.sigma > R::zero() {
        let target = bundle
            .link_flows
            .clone()
            .ok_or_else(|| Error::MissingField("observed link flows".into()))?;
        let coupling = program.coupling.as_mut().expect("network coupling");
        if target.len() != coupling.n_slots {
            return Err(Error::InvalidParameter(
                "observed link flows do not match the network".into(),
            ));
        }
        if target.iter().any(|&f| f < R::zero()) {
            return Err(Error::InvalidParameter(
                "observed link flows must be nonnegative".into(),
            ));
        }
        coupling.penalty = Some(FlowPenalty {
            sigma: bundle.sigma,
            target,
            width: huber_width,
        });
    }
    Ok(program)
}

/// Forecast program: every behavioral parameter fixed, only simplex and flow
/// constraints remain. Its optimum is the hierarchical choice equilibrium on
/// the (possibly new) network.
#[allow(clippy::too_many_arguments)]
pub fn build_second_stage<R: Real>(
    network: &ModalNetwork<R>,
    route_set: &RouteSet<R>,
    hierarchy: &Hierarchy,
    zones: &ZonalSystem<R>,
    tree: &crate::choice::ModeTree<R>,
    utilities: &crate::choice::UtilitySpec<R>,
) -> Result<ConvexProgram<R>> {
    let h = hierarchy;
    for nest in tree.nests() {
        if nest.tau < R::zero() || nest.tau > R::one() {
            return Err(Error::TauOutOfRange(nest.tau.to_f64().unwrap_or(f64::NAN)));
        }
    }
    let index = hierarchy_index(h);
    let n_leaves = h.n_leaves();
    let a_dest = R::one() / tree.theta_dest;
    let a_nest = R::one() / tree.theta_mode;
    let mode_coef: Vec<R> = (0..h.mode_id.len())
        .map(|mn| {
            let nest = &tree.nests()[h.nest_id[h.mode_parent[mn] as usize]];
            nest.tau / tree.theta_mode
        })
        .collect();
    Ok(ConvexProgram {
        name: "second-stage".into(),
        index,
        budgets: h.origins.iter().map(|&z| zones.production(z)).collect(),
        group_names: h.origins.iter().map(|&z| zones.id(z).to_string()).collect(),
        levels: vec![
            LevelSpec {
                name: "destination".into(),
                coef: vec![a_dest; h.dest_zone.len()],
                weight: vec![R::one(); h.dest_zone.len()],
                denom: Denominator::Budget,
            },
            LevelSpec {
                name: "nest".into(),
                coef: vec![a_nest; h.nest_id.len()],
                weight: vec![R::one(); h.nest_id.len()],
                denom: Denominator::Parent,
            },
            LevelSpec {
                name: "mode".into(),
                coef: mode_coef,
                weight: vec![R::one(); h.mode_id.len()],
                denom: Denominator::Parent,
            },
            LevelSpec {
                name: "route".into(),
                coef: vec![R::one() / tree.theta_route; n_leaves],
                weight: route_ps_weights(h, route_set),
                denom: Denominator::Parent,
            },
        ],
        utilities: leaf_utilities(h, utilities),
        coupling: Some(FlowCoupling::build(network, route_set, h)),
        matches: Vec::new(),
        build_warnings: Vec::new(),
    })
}

/// Most-probable trip distribution with a known deterrence coefficient:
/// maximize `-sum T ln T + sum T - beta sum T c` subject to row budgets,
/// with column totals as dualized balance constraints.
pub fn build_most_probable<R: Real>(
    productions: &[R],
    attractions: &[R],
    costs: &Table2<R>,
    beta: R,
) -> Result<ConvexProgram<R>> {
    let n_i = productions.len();
    let n_j = attractions.len();
    if n_i == 0 || n_j == 0 {
        return Err(Error::EmptyChoiceSet);
    }
    if beta < R::zero() {
        return Err(Error::InvalidParameter("beta must be nonnegative".into()));
    }
    let n = n_i * n_j;
    let index = HierIndex {
        n_groups: n_i,
        group_of_leaf: (0..n).map(|l| (l / n_j) as u32).collect(),
        levels: vec![LevelIndex {
            node_of_leaf: (0..n as u32).collect(),
            parent: (0..n).map(|l| (l / n_j) as u32).collect(),
            n_nodes: n,
        }],
    };
    let e = R::one().exp();
    let matches = (0..n_j)
        .map(|j| MatchConstraint {
            kind: MatchKind::Aggregate {
                weights: (0..n)
                    .map(|l| if l % n_j == j { R::one() } else { R::zero() })
                    .collect(),
            },
            rhs: attractions[j],
            label: format!("mu[{j}]"),
            role: DualRole::ColumnBalance(j),
            init: R::zero(),
        })
        .collect();
    Ok(ConvexProgram {
        name: "most-probable-distribution".into(),
        index,
        budgets: productions.to_vec(),
        group_names: (0..n_i).map(|i| format!("origin {i}")).collect(),
        levels: vec![LevelSpec {
            name: "destination".into(),
            coef: vec![R::one(); n],
            // weight e turns T ln(T/w) into T ln T - T
            weight: vec![e; n],
            denom: Denominator::One,
        }],
        utilities: (0..n).map(|l| -beta * costs.get(l / n_j, l % n_j)).collect(),
        coupling: None,
        matches,
        build_warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::{ModeTree, Nest};
    use approx::assert_relative_eq;

    /// Central finite-difference check of `eval`'s analytic gradient.
    pub(crate) fn assert_gradient_matches_fd(
        program: &ConvexProgram<f64>,
        psi: &[f64],
        x: &[f64],
        tol: f64,
    ) {
        let inner = program.instantiate(psi, 1e-300);
        let mut grad = vec![0.0; x.len()];
        inner.eval(x, Some(&mut grad));
        for l in 0..x.len() {
            let h = (x[l].abs() * 1e-6).max(1e-9);
            let mut xp = x.to_vec();
            xp[l] += h;
            let mut xm = x.to_vec();
            xm[l] -= h;
            let fd = (inner.eval(&xp, None) - inner.eval(&xm, None)) / (2.0 * h);
            let scale = grad[l].abs().max(fd.abs()).max(1.0);
            assert!(
                (grad[l] - fd).abs() / scale < tol,
                "gradient mismatch at leaf {l}: analytic {} vs fd {}",
                grad[l],
                fd
            );
        }
    }

    #[test]
    fn mnl_program_objective_matches_formula() {
        let v = [1.0, 0.0, -0.5];
        let theta = 1.3;
        let program = build_max_satis_mnl(&v, theta).unwrap();
        let p = [0.5, 0.3, 0.2];
        let inner = program.instantiate(&[], 1e-300);
        let got = inner.eval(&p, None);
        let expect: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
            - p.iter().map(|&q| q * q.ln()).sum::<f64>() / theta;
        assert_relative_eq!(got, expect, max_relative = 1e-14);
    }

    #[test]
    fn nl_program_objective_matches_formula() {
        // objective written exactly as
        // sum v p - (1/theta) sum [tau_B p ln p + (1 - tau_B) p ln(sum_{B} p)]
        let tree = ModeTree::<f64>::new(
            3,
            vec![
                Nest { name: "car".into(), members: vec![0], tau: 1.0 },
                Nest { name: "bus".into(), members: vec![1, 2], tau: 0.4 },
            ],
            1.0,
            1.7,
            1.0,
        )
        .unwrap();
        let v = [0.2, -0.3, 0.5];
        let program = build_max_satis_nl(&v, &tree).unwrap();
        let p = [0.5, 0.2, 0.3];
        let inner = program.instantiate(&[], 1e-300);
        let got = inner.eval(&p, None);
        let nest_sum = |members: &[usize]| members.iter().map(|&m| p[m]).sum::<f64>();
        let mut expect: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum();
        for (m, tau) in [(0usize, 1.0f64), (1, 0.4), (2, 0.4)] {
            let b = if m == 0 { nest_sum(&[0]) } else { nest_sum(&[1, 2]) };
            expect -= (tau * p[m] * p[m].ln() + (1.0 - tau) * p[m] * b.ln()) / 1.7;
        }
        assert_relative_eq!(got, expect, max_relative = 1e-13);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let v = [1.0, 0.0, -0.5, 0.25];
        let tree = ModeTree::<f64>::new(
            4,
            vec![
                Nest { name: "a".into(), members: vec![0, 1], tau: 0.6 },
                Nest { name: "b".into(), members: vec![2, 3], tau: 0.9 },
            ],
            1.0,
            1.2,
            1.0,
        )
        .unwrap();
        let program = build_max_satis_nl(&v, &tree).unwrap();
        assert_gradient_matches_fd(&program, &[], &[0.3, 0.25, 0.25, 0.2], 1e-6);
        let mnl = build_max_satis_mnl(&v, 0.8).unwrap();
        assert_gradient_matches_fd(&mnl, &[], &[0.3, 0.25, 0.25, 0.2], 1e-6);
    }

    #[test]
    fn most_probable_objective_is_entropy_form() {
        let costs = Table2::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        let program = build_most_probable(&[1.0, 1.0], &[1.0, 1.0], &costs, 0.7).unwrap();
        let x = [0.6, 0.4, 0.3, 0.7];
        let inner = program.instantiate(&[0.0, 0.0], 1e-300);
        let got = inner.eval(&x, None);
        let mut expect = 0.0;
        for (l, &t) in x.iter().enumerate() {
            let c: f64 = costs.get(l / 2, l % 2);
            expect += -t * t.ln() + t - 0.7 * c * t;
        }
        assert_relative_eq!(got, expect, max_relative = 1e-13);
        assert_gradient_matches_fd(&program, &[0.1, -0.2], &x, 1e-6);
    }

    #[test]
    fn dump_names_the_duals() {
        let costs = Table2::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        let program = build_most_probable(&[1.0, 1.0], &[1.0, 1.0], &costs, 0.7).unwrap();
        let dump = program.dump();
        assert!(dump.contains("mu[0]"));
        assert!(dump.contains("lambda_i"));
    }
}
