//! Closed-form evaluators for the logit family: multinomial, nested,
//! path-size, and the full destination/nest/mode/route hierarchy.
//!
//! All exponentials are max-shifted. These evaluators never touch the
//! optimization machinery, so they double as independent oracles for it.

use crate::error::{Error, Result};
use crate::network::{LinkFlowVector, ModalNetwork, ZonalSystem};
use crate::routes::{Route, RouteSet};
use crate::scalar::{weighted_logsumexp, Real};
use crate::table::{Table2, Table3};

/// Probability floor applied before logarithms in entropy computations.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-300;

/// Nest structure over modes with dissimilarity factors and level scales.
#[derive(Debug, Clone)]
pub struct ModeTree<R> {
    nests: Vec<Nest<R>>,
    nest_of: Vec<usize>,
    pub theta_dest: R,
    pub theta_mode: R,
    pub theta_route: R,
}

#[derive(Debug, Clone)]
pub struct Nest<R> {
    pub name: String,
    /// Mode indices belonging to this nest.
    pub members: Vec<usize>,
    /// Dissimilarity factor in `[0, 1]`; 1 reduces the nest to plain MNL.
    pub tau: R,
}

impl<R: Real> ModeTree<R> {
    pub fn new(
        n_modes: usize,
        nests: Vec<Nest<R>>,
        theta_dest: R,
        theta_mode: R,
        theta_route: R,
    ) -> Result<Self> {
        if !(theta_dest > R::zero()) || !(theta_mode > R::zero()) || !(theta_route > R::zero()) {
            return Err(Error::InvalidParameter(
                "scale parameters must be strictly positive".into(),
            ));
        }
        let mut nest_of = vec![usize::MAX; n_modes];
        for (ni, nest) in nests.iter().enumerate() {
            if nest.members.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "nest `{}` is empty",
                    nest.name
                )));
            }
            if nest.tau < R::zero() || nest.tau > R::one() {
                return Err(Error::TauOutOfRange(nest.tau.to_f64().unwrap_or(f64::NAN)));
            }
            for &m in &nest.members {
                if m >= n_modes || nest_of[m] != usize::MAX {
                    return Err(Error::InvalidParameter(format!(
                        "mode #{m} must belong to exactly one nest"
                    )));
                }
                nest_of[m] = ni;
            }
        }
        if nest_of.iter().any(|&n| n == usize::MAX) {
            return Err(Error::InvalidParameter(
                "every mode must belong to a nest".into(),
            ));
        }
        Ok(Self {
            nests,
            nest_of,
            theta_dest,
            theta_mode,
            theta_route,
        })
    }

    /// One nest holding every mode, with `tau = 1` (plain MNL mode choice).
    pub fn single_nest(
        n_modes: usize,
        theta_dest: R,
        theta_mode: R,
        theta_route: R,
    ) -> Result<Self> {
        Self::new(
            n_modes,
            vec![Nest {
                name: "all".into(),
                members: (0..n_modes).collect(),
                tau: R::one(),
            }],
            theta_dest,
            theta_mode,
            theta_route,
        )
    }

    pub fn nests(&self) -> &[Nest<R>] {
        &self.nests
    }

    pub fn nest_of(&self, mode: usize) -> usize {
        self.nest_of[mode]
    }

    pub fn n_modes(&self) -> usize {
        self.nest_of.len()
    }
}

/// Fixed-utility specification: linear-in-attributes destination and mode
/// utilities. Route disutility comes from generalized route costs.
#[derive(Debug, Clone)]
pub struct UtilitySpec<R> {
    pub dest_attr_names: Vec<String>,
    pub dest_attrs: Vec<Table2<R>>,
    pub beta_dest: Vec<R>,
    pub mode_attr_names: Vec<String>,
    pub mode_attrs: Vec<Table3<R>>,
    pub beta_mode: Vec<R>,
}

impl<R: Real> UtilitySpec<R> {
    pub fn v_dest(&self, i: usize, j: usize) -> R {
        self.dest_attrs
            .iter()
            .zip(&self.beta_dest)
            .map(|(x, &b)| b * x.get(i, j))
            .sum()
    }

    pub fn v_mode(&self, i: usize, j: usize, m: usize) -> R {
        self.mode_attrs
            .iter()
            .zip(&self.beta_mode)
            .map(|(x, &b)| b * x.get(i, j, m))
            .sum()
    }

    /// Same attributes with replacement coefficients (forecasting with
    /// calibrated parameters).
    pub fn with_betas(&self, beta_dest: Vec<R>, beta_mode: Vec<R>) -> Result<Self> {
        if beta_dest.len() != self.dest_attrs.len() || beta_mode.len() != self.mode_attrs.len() {
            return Err(Error::InvalidParameter(
                "coefficient count must match attribute count".into(),
            ));
        }
        Ok(Self {
            beta_dest,
            beta_mode,
            ..self.clone()
        })
    }
}

/// Multinomial logit probabilities `p_m = exp(theta v_m) / sum`.
pub fn mnl_prob<R: Real>(v: &[R], theta: R) -> Result<Vec<R>> {
    if v.is_empty() {
        return Err(Error::EmptyChoiceSet);
    }
    if !(theta > R::zero()) {
        return Err(Error::InvalidParameter("theta must be positive".into()));
    }
    let lse = weighted_logsumexp(v.iter().map(|&x| (R::one(), theta * x)));
    Ok(v.iter().map(|&x| (theta * x - lse).exp()).collect())
}

/// Expected maximum utility `(1/theta) ln sum exp(theta v_m)`.
pub fn mnl_satisfaction<R: Real>(v: &[R], theta: R) -> Result<R> {
    if v.is_empty() {
        return Err(Error::EmptyChoiceSet);
    }
    if !(theta > R::zero()) {
        return Err(Error::InvalidParameter("theta must be positive".into()));
    }
    Ok(weighted_logsumexp(v.iter().map(|&x| (R::one(), theta * x))) / theta)
}

/// Nested logit probabilities over all alternatives.
///
/// Requires every `tau > 0`; the closed form is undefined at `tau = 0`
/// (perfectly correlated alternatives are handled by the equivalent
/// optimization formulation instead).
pub fn nl_prob<R: Real>(v: &[R], tree: &ModeTree<R>) -> Result<Vec<R>> {
    if v.is_empty() {
        return Err(Error::EmptyChoiceSet);
    }
    if v.len() != tree.n_modes() {
        return Err(Error::InvalidParameter(
            "utility vector length must match the tree".into(),
        ));
    }
    let theta = tree.theta_mode;
    let mut iv = Vec::with_capacity(tree.nests.len());
    for nest in &tree.nests {
        if !(nest.tau > R::zero()) {
            return Err(Error::TauZeroClosedForm);
        }
        let lse = weighted_logsumexp(
            nest.members
                .iter()
                .map(|&m| (R::one(), theta * v[m] / nest.tau)),
        );
        iv.push(nest.tau * lse);
    }
    let nest_lse = weighted_logsumexp(iv.iter().map(|&x| (R::one(), x)));
    let mut p = vec![R::zero(); v.len()];
    for (ni, nest) in tree.nests.iter().enumerate() {
        let p_nest = (iv[ni] - nest_lse).exp();
        let inner_lse = iv[ni] / nest.tau;
        for &m in &nest.members {
            p[m] = p_nest * (theta * v[m] / nest.tau - inner_lse).exp();
        }
    }
    Ok(p)
}

/// Path-size factors for every route in a choice set.
///
/// `PS_r = sum_{a in r} (l_a / L_r) / (#routes using a)`; 1 when no link is
/// shared. Routes must have positive length (guaranteed for network-built
/// routes).
pub fn ps_factors<R: Real>(routes: &[Route<R>]) -> Vec<R> {
    let count = |link: usize| -> R {
        let c = routes.iter().filter(|r| r.links.contains(&link)).count();
        R::count(c)
    };
    routes
        .iter()
        .map(|r| {
            assert!(r.length > R::zero(), "route length must be positive");
            r.links
                .iter()
                .zip(&r.link_lengths)
                .map(|(&a, &l)| (l / r.length) / count(a))
                .sum()
        })
        .collect()
}

/// Path-size factor of one route in a `(origin, dest, mode)` choice set.
pub fn path_size_factor<R: Real>(
    route_set: &RouteSet<R>,
    origin: usize,
    dest: usize,
    mode: usize,
    route: usize,
) -> Result<R> {
    let entry = route_set
        .get(origin, dest, mode)
        .ok_or(Error::EmptyChoiceSet)?;
    if entry.routes.iter().any(|r| !(r.length > R::zero())) {
        return Err(Error::ZeroLengthRoute);
    }
    entry
        .ps
        .get(route)
        .copied()
        .ok_or(Error::EmptyChoiceSet)
}

/// Path-size logit: `p_r = PS_r exp(theta v_r) / sum PS exp(theta v)`.
pub fn path_size_logit_prob<R: Real>(v: &[R], ps: &[R], theta_route: R) -> Result<Vec<R>> {
    if v.is_empty() || v.len() != ps.len() {
        return Err(Error::EmptyChoiceSet);
    }
    if ps.iter().any(|&w| !(w > R::zero())) {
        return Err(Error::InvalidParameter(
            "path-size factors must be positive".into(),
        ));
    }
    let lse = weighted_logsumexp(v.iter().zip(ps).map(|(&x, &w)| (w, theta_route * x)));
    Ok(v.iter()
        .zip(ps)
        .map(|(&x, &w)| w * (theta_route * x - lse).exp())
        .collect())
}

/// Index of the destination/nest/mode/route hierarchy for one zonal system.
///
/// Children of a node are contiguous. The destination choice set of origin
/// `i` is every zone with positive attraction except `i` itself.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    /// Zone index per origin slot.
    pub origins: Vec<usize>,
    pub dest_parent: Vec<u32>,
    /// Zone index per destination node.
    pub dest_zone: Vec<usize>,
    pub dest_children: Vec<(u32, u32)>,
    pub nest_parent: Vec<u32>,
    /// Nest index per nest node.
    pub nest_id: Vec<usize>,
    pub nest_children: Vec<(u32, u32)>,
    pub mode_parent: Vec<u32>,
    /// Mode index per mode node.
    pub mode_id: Vec<usize>,
    pub mode_children: Vec<(u32, u32)>,
    pub route_parent: Vec<u32>,
    /// Route-set entry index and route position per route node.
    pub route_entry: Vec<u32>,
    pub route_idx: Vec<u32>,
}

impl Hierarchy {
    pub fn build<R: Real>(
        zones: &ZonalSystem<R>,
        tree: &ModeTree<R>,
        route_set: &RouteSet<R>,
    ) -> Result<Self> {
        let mut h = Hierarchy {
            origins: zones.origins(),
            dest_parent: Vec::new(),
            dest_zone: Vec::new(),
            dest_children: Vec::new(),
            nest_parent: Vec::new(),
            nest_id: Vec::new(),
            nest_children: Vec::new(),
            mode_parent: Vec::new(),
            mode_id: Vec::new(),
            mode_children: Vec::new(),
            route_parent: Vec::new(),
            route_entry: Vec::new(),
            route_idx: Vec::new(),
        };
        if h.origins.is_empty() {
            return Err(Error::InvalidParameter(
                "no origin has positive production".into(),
            ));
        }
        let dests = zones.destinations();
        for (oi, &zi) in h.origins.clone().iter().enumerate() {
            for &zj in &dests {
                if zj == zi {
                    continue;
                }
                let d = h.dest_zone.len() as u32;
                h.dest_parent.push(oi as u32);
                h.dest_zone.push(zj);
                let nest_start = h.nest_id.len() as u32;
                for (ni, nest) in tree.nests().iter().enumerate() {
                    let nn = h.nest_id.len() as u32;
                    h.nest_parent.push(d);
                    h.nest_id.push(ni);
                    let mode_start = h.mode_id.len() as u32;
                    for &m in &nest.members {
                        let mn = h.mode_id.len() as u32;
                        h.mode_parent.push(nn);
                        h.mode_id.push(m);
                        let entry_pos = route_set
                            .entries()
                            .iter()
                            .position(|e| e.origin == zi && e.dest == zj && e.mode == m)
                            .ok_or_else(|| Error::Disconnected {
                                origin: zones.id(zi).to_string(),
                                dest: zones.id(zj).to_string(),
                                mode: format!("#{m}"),
                            })?;
                        let n_routes = route_set.entries()[entry_pos].routes.len();
                        if n_routes == 0 {
                            return Err(Error::Disconnected {
                                origin: zones.id(zi).to_string(),
                                dest: zones.id(zj).to_string(),
                                mode: format!("#{m}"),
                            });
                        }
                        let route_start = h.route_idx.len() as u32;
                        for r in 0..n_routes {
                            h.route_parent.push(mn);
                            h.route_entry.push(entry_pos as u32);
                            h.route_idx.push(r as u32);
                        }
                        h.mode_children
                            .push((route_start, h.route_idx.len() as u32));
                    }
                    h.nest_children.push((mode_start, h.mode_id.len() as u32));
                }
                h.dest_children.push((nest_start, h.nest_id.len() as u32));
            }
            if h.dest_children.len() == h.dest_zone.len() && h.dest_zone.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "origin `{}` has no destinations",
                    zones.id(zi)
                )));
            }
        }
        // children ranges of origins over dest nodes
        Ok(h)
    }

    pub fn n_origins(&self) -> usize {
        self.origins.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.route_idx.len()
    }

    /// Destination nodes of one origin slot, as a contiguous range.
    pub fn dest_nodes_of(&self, origin_slot: usize) -> std::ops::Range<usize> {
        let start = self
            .dest_parent
            .iter()
            .position(|&p| p == origin_slot as u32)
            .unwrap_or(0);
        let end = start
            + self
                .dest_parent
                .iter()
                .filter(|&&p| p == origin_slot as u32)
                .count();
        start..end
    }
}

/// All conditional probabilities and aggregate utilities of the hierarchy.
#[derive(Debug, Clone)]
pub struct HierProbs<R> {
    /// `p_{j/i}` per destination node.
    pub p_dest: Vec<R>,
    /// `p_{M/ij}` per nest node.
    pub p_nest: Vec<R>,
    /// `p_{m/M}` per mode node.
    pub p_mode: Vec<R>,
    /// `p_{r/ijm}` per route node.
    pub p_route: Vec<R>,
    /// `S_ij` per destination node.
    pub s_dest: Vec<R>,
    /// Inclusive value per nest node.
    pub iv: Vec<R>,
    /// `S_ijm` per mode node.
    pub s_mode: Vec<R>,
}

/// Bottom-up closed-form evaluation of the full hierarchy at given flows.
pub fn hier_extended_prob<R: Real>(
    hierarchy: &Hierarchy,
    tree: &ModeTree<R>,
    utilities: &UtilitySpec<R>,
    route_set: &RouteSet<R>,
    network: &ModalNetwork<R>,
    flows: &LinkFlowVector<R>,
) -> Result<HierProbs<R>> {
    let h = hierarchy;
    let n_dest = h.dest_zone.len();
    let n_nest = h.nest_id.len();
    let n_mode = h.mode_id.len();
    let n_route = h.route_idx.len();
    let mut probs = HierProbs {
        p_dest: vec![R::zero(); n_dest],
        p_nest: vec![R::zero(); n_nest],
        p_mode: vec![R::zero(); n_mode],
        p_route: vec![R::zero(); n_route],
        s_dest: vec![R::zero(); n_dest],
        iv: vec![R::zero(); n_nest],
        s_mode: vec![R::zero(); n_mode],
    };

    // route level: S_ijm and p_{r/ijm}
    let mut route_v = vec![R::zero(); n_route];
    for mn in 0..n_mode {
        let (lo, hi) = h.mode_children[mn];
        let entry = &route_set.entries()[h.route_entry[lo as usize] as usize];
        for rn in lo..hi {
            let r = h.route_idx[rn as usize] as usize;
            let g = network.route_cost(flows, entry.mode, &entry.routes[r].links)?;
            route_v[rn as usize] = -g;
        }
        let lse = weighted_logsumexp((lo..hi).map(|rn| {
            let r = h.route_idx[rn as usize] as usize;
            (entry.ps[r], tree.theta_route * route_v[rn as usize])
        }));
        probs.s_mode[mn] = lse / tree.theta_route;
        for rn in lo..hi {
            let r = h.route_idx[rn as usize] as usize;
            probs.p_route[rn as usize] =
                entry.ps[r] * (tree.theta_route * route_v[rn as usize] - lse).exp();
        }
    }

    // nest level: IV_M and p_{m/M}
    for nn in 0..n_nest {
        let nest = &tree.nests()[h.nest_id[nn]];
        if !(nest.tau > R::zero()) {
            return Err(Error::TauZeroClosedForm);
        }
        let (lo, hi) = h.nest_children[nn];
        let d = h.nest_parent[nn] as usize;
        let (zi, zj) = (h.origins[h.dest_parent[d] as usize], h.dest_zone[d]);
        let scaled = |mn: u32| {
            let m = h.mode_id[mn as usize];
            tree.theta_mode * (utilities.v_mode(zi, zj, m) + probs.s_mode[mn as usize]) / nest.tau
        };
        let lse = weighted_logsumexp((lo..hi).map(|mn| (R::one(), scaled(mn))));
        probs.iv[nn] = nest.tau * lse;
        for mn in lo..hi {
            probs.p_mode[mn as usize] = (scaled(mn) - lse).exp();
        }
    }

    // destination level: S_ij and p_{M/ij}
    for d in 0..n_dest {
        let (lo, hi) = h.dest_children[d];
        let lse = weighted_logsumexp((lo..hi).map(|nn| (R::one(), probs.iv[nn as usize])));
        probs.s_dest[d] = lse / tree.theta_mode;
        for nn in lo..hi {
            probs.p_nest[nn as usize] = (probs.iv[nn as usize] - lse).exp();
        }
    }

    // origin level: p_{j/i}
    for oi in 0..h.n_origins() {
        let zi = h.origins[oi];
        let dests: Vec<usize> = (0..n_dest)
            .filter(|&d| h.dest_parent[d] as usize == oi)
            .collect();
        let value = |d: usize| {
            tree.theta_dest * (utilities.v_dest(zi, h.dest_zone[d]) + probs.s_dest[d])
        };
        let lse = weighted_logsumexp(dests.iter().map(|&d| (R::one(), value(d))));
        for &d in &dests {
            probs.p_dest[d] = (value(d) - lse).exp();
        }
    }
    Ok(probs)
}

/// Trip tables at every level, plus the implied link flows.
#[derive(Debug, Clone)]
pub struct TripTables<R> {
    pub t_dest: Vec<R>,
    pub t_nest: Vec<R>,
    pub t_mode: Vec<R>,
    pub t_route: Vec<R>,
    pub flows: LinkFlowVector<R>,
}

impl<R: Real> TripTables<R> {
    /// Dense `(zone, zone)` trip matrix over all zones.
    pub fn t_ij(&self, h: &Hierarchy, n_zones: usize) -> Table2<R> {
        let mut t = Table2::zeros(n_zones, n_zones);
        for d in 0..h.dest_zone.len() {
            let zi = h.origins[h.dest_parent[d] as usize];
            t.add(zi, h.dest_zone[d], self.t_dest[d]);
        }
        t
    }

    /// Dense `(zone, zone, mode)` trip table.
    pub fn t_ijm(&self, h: &Hierarchy, n_zones: usize, n_modes: usize) -> Table3<R> {
        let mut t = Table3::zeros(n_zones, n_zones, n_modes);
        for mn in 0..h.mode_id.len() {
            let nn = h.mode_parent[mn] as usize;
            let d = h.nest_parent[nn] as usize;
            let zi = h.origins[h.dest_parent[d] as usize];
            t.add(zi, h.dest_zone[d], h.mode_id[mn], self.t_mode[mn]);
        }
        t
    }
}

/// Multiplies conditional probabilities down the hierarchy into trip tables
/// and accumulates route trips onto links.
pub fn assemble_trips<R: Real>(
    zones: &ZonalSystem<R>,
    hierarchy: &Hierarchy,
    probs: &HierProbs<R>,
    route_set: &RouteSet<R>,
    network: &ModalNetwork<R>,
) -> TripTables<R> {
    let h = hierarchy;
    let mut t = TripTables {
        t_dest: vec![R::zero(); h.dest_zone.len()],
        t_nest: vec![R::zero(); h.nest_id.len()],
        t_mode: vec![R::zero(); h.mode_id.len()],
        t_route: vec![R::zero(); h.route_idx.len()],
        flows: LinkFlowVector::zeros(network),
    };
    for d in 0..h.dest_zone.len() {
        let o = zones.production(h.origins[h.dest_parent[d] as usize]);
        t.t_dest[d] = o * probs.p_dest[d];
    }
    for nn in 0..h.nest_id.len() {
        t.t_nest[nn] = t.t_dest[h.nest_parent[nn] as usize] * probs.p_nest[nn];
    }
    for mn in 0..h.mode_id.len() {
        t.t_mode[mn] = t.t_nest[h.mode_parent[mn] as usize] * probs.p_mode[mn];
    }
    for rn in 0..h.route_idx.len() {
        let trips = t.t_mode[h.route_parent[rn] as usize] * probs.p_route[rn];
        t.t_route[rn] = trips;
        let entry = &route_set.entries()[h.route_entry[rn] as usize];
        for &a in &entry.routes[h.route_idx[rn] as usize].links {
            t.flows.add(entry.mode, a, trips);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::harness;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn mnl_equal_utilities_are_uniform() {
        let p = mnl_prob(&[2.0, 2.0, 2.0, 2.0], 1.7).unwrap();
        for &x in &p {
            assert_relative_eq!(x, 0.25, max_relative = 1e-14);
        }
    }

    #[test]
    fn mnl_two_alternatives_hand_value() {
        let p = mnl_prob(&[1.0, 0.0], 1.0).unwrap();
        assert_relative_eq!(p[0], E / (E + 1.0), max_relative = 1e-14);
        assert_relative_eq!(p[1], 1.0 / (E + 1.0), max_relative = 1e-14);
    }

    #[test]
    fn mnl_satisfaction_hand_values() {
        assert_relative_eq!(
            mnl_satisfaction(&[1.0, 0.0], 1.0).unwrap(),
            (E + 1.0f64).ln(),
            max_relative = 1e-14
        );
        // single alternative: S = V
        assert_relative_eq!(
            mnl_satisfaction(&[3.25], 2.0).unwrap(),
            3.25,
            max_relative = 1e-14
        );
    }

    #[test]
    fn mnl_errors() {
        assert!(mnl_prob::<f64>(&[], 1.0).is_err());
        assert!(mnl_prob(&[1.0], 0.0).is_err());
    }

    #[test]
    fn nl_reduces_to_mnl_for_singleton_nests() {
        let tree = ModeTree::<f64>::new(
            2,
            vec![
                Nest {
                    name: "a".into(),
                    members: vec![0],
                    tau: 0.3,
                },
                Nest {
                    name: "b".into(),
                    members: vec![1],
                    tau: 0.9,
                },
            ],
            1.0,
            1.4,
            1.0,
        )
        .unwrap();
        let v = [0.7, -0.2];
        let nl = nl_prob(&v, &tree).unwrap();
        let mnl = mnl_prob(&v, 1.4).unwrap();
        for (a, b) in nl.iter().zip(&mnl) {
            assert_relative_eq!(a, b, max_relative = 1e-13);
        }
    }

    #[test]
    fn nl_red_blue_bus_small_tau() {
        // car vs {red bus, blue bus}, equal utilities, tau_bus = 0.01:
        // p_car = 1 / (1 + 2^0.01), frozen from direct evaluation.
        let tree = ModeTree::<f64>::new(
            3,
            vec![
                Nest {
                    name: "car".into(),
                    members: vec![0],
                    tau: 1.0,
                },
                Nest {
                    name: "bus".into(),
                    members: vec![1, 2],
                    tau: 0.01,
                },
            ],
            1.0,
            1.0,
            1.0,
        )
        .unwrap();
        let p = nl_prob(&[0.0, 0.0, 0.0], &tree).unwrap();
        assert_relative_eq!(p[0], 0.49826713898658037, max_relative = 1e-12);
        assert_relative_eq!(p[1], 0.2508664305067098, max_relative = 1e-12);
        assert_relative_eq!(p[2], 0.2508664305067098, max_relative = 1e-12);
        assert!((p[0] - 0.5).abs() < 0.01, "total bus share stays near 50%");
    }

    #[test]
    fn nl_tau_zero_is_rejected() {
        let tree = ModeTree::<f64>::new(
            2,
            vec![Nest {
                name: "n".into(),
                members: vec![0, 1],
                tau: 0.0,
            }],
            1.0,
            1.0,
            1.0,
        )
        .unwrap();
        assert!(matches!(
            nl_prob(&[0.0, 0.0], &tree),
            Err(Error::TauZeroClosedForm)
        ));
    }

    #[test]
    fn ps_logit_examples() {
        // two equal-cost routes with PS (1, 0.5) -> (2/3, 1/3)
        let p = path_size_logit_prob(&[-1.0, -1.0], &[1.0, 0.5], 1.0).unwrap();
        assert_relative_eq!(p[0], 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(p[1], 1.0 / 3.0, max_relative = 1e-14);
        // all PS equal reduces to MNL
        let v = [0.3, -0.1, 0.9];
        let a = path_size_logit_prob(&v, &[1.0, 1.0, 1.0], 2.0).unwrap();
        let b = mnl_prob(&v, 2.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, max_relative = 1e-14);
        }
        // single route
        let s = path_size_logit_prob(&[-5.0], &[0.7], 1.3).unwrap();
        assert_relative_eq!(s[0], 1.0, max_relative = 1e-14);
    }

    fn route(links: Vec<usize>, lens: Vec<f64>) -> Route<f64> {
        let length = lens.iter().sum();
        Route {
            nodes: vec![0; links.len() + 1],
            links,
            link_lengths: lens,
            length,
            free_flow_cost: 1.0,
        }
    }

    #[test]
    fn ps_disjoint_routes_are_one() {
        let ps = ps_factors(&[route(vec![0], vec![2.0]), route(vec![1, 2], vec![1.0, 1.0])]);
        assert_relative_eq!(ps[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(ps[1], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn ps_identical_routes_are_half() {
        let ps = ps_factors(&[route(vec![0, 1], vec![1.0, 3.0]), route(vec![0, 1], vec![1.0, 3.0])]);
        assert_relative_eq!(ps[0], 0.5, max_relative = 1e-14);
        assert_relative_eq!(ps[1], 0.5, max_relative = 1e-14);
    }

    #[test]
    fn ps_half_shared_route() {
        // two equal-length links, one shared by 2 routes, one unique:
        // PS = 0.5 * 1/2 + 0.5 * 1 = 0.75
        let ps = ps_factors(&[
            route(vec![0, 1], vec![1.0, 1.0]),
            route(vec![0, 2], vec![1.0, 1.0]),
        ]);
        assert_relative_eq!(ps[0], 0.75, max_relative = 1e-14);
        assert_relative_eq!(ps[1], 0.75, max_relative = 1e-14);
    }

    #[test]
    fn hier_fixture_matches_hand_evaluation() {
        // frozen from a step-by-step independent evaluation of the closed forms
        let toy = harness::two_dest_toy();
        let rs = toy.route_set().unwrap();
        let h = Hierarchy::build(&toy.zones, &toy.tree, &rs).unwrap();
        let flows = LinkFlowVector::zeros(&toy.network);
        let p = hier_extended_prob(&h, &toy.tree, &toy.utilities, &rs, &toy.network, &flows)
            .unwrap();

        // bus routes to d1 share the first link: PS < 1
        let car = toy.network.mode("car").unwrap();
        let bus = toy.network.mode("bus").unwrap();
        let (o, d1, d2) = (0usize, 1usize, 2usize);
        let e_bus_d1 = rs.get(o, d1, bus).unwrap();
        assert_relative_eq!(e_bus_d1.ps[0], 0.7826086956521741, max_relative = 1e-12);
        assert_relative_eq!(e_bus_d1.ps[1], 0.7619047619047619, max_relative = 1e-12);
        let e_car_d1 = rs.get(o, d1, car).unwrap();
        assert_relative_eq!(e_car_d1.ps[0], 1.0, max_relative = 1e-12);

        // destination probabilities (d1 listed first)
        assert_relative_eq!(p.p_dest[0], 0.5923414412971251, max_relative = 1e-10);
        assert_relative_eq!(p.p_dest[1], 0.4076585587028749, max_relative = 1e-10);
        // satisfaction chain
        assert_relative_eq!(p.s_dest[0], -5.409021713685496, max_relative = 1e-10);
        assert_relative_eq!(p.s_dest[1], -6.14419201308358, max_relative = 1e-10);
        assert_relative_eq!(p.iv[0], -5.949923885054046, max_relative = 1e-10);
        assert_relative_eq!(p.iv[1], -6.758611214391938, max_relative = 1e-10);

        // mode conditionals: nodes ordered car then bus inside the single nest
        let mode_order: Vec<usize> = h.mode_id.clone();
        assert_eq!(mode_order, vec![car, bus, car, bus]);
        assert_relative_eq!(p.p_mode[0], 0.9492758518142146, max_relative = 1e-10);
        assert_relative_eq!(p.p_mode[1], 0.05072414818578539, max_relative = 1e-10);
        assert_relative_eq!(p.p_mode[2], 0.9330250829530613, max_relative = 1e-10);
        assert_relative_eq!(p.p_mode[3], 0.06697491704693873, max_relative = 1e-10);

        // route conditionals for car to d1: enumeration orders routes by
        // free-flow cost, so the via-x route (cost 5.5) precedes the direct
        // link (cost 6.0)
        assert_relative_eq!(p.p_route[0], 0.6570104626734988, max_relative = 1e-10);
        assert_relative_eq!(p.p_route[1], 0.3429895373265011, max_relative = 1e-10);

        // trips and link flows from the same hand evaluation
        let t = assemble_trips(&toy.zones, &h, &p, &rs, &toy.network);
        assert_relative_eq!(t.t_route[0], 3.6943397816114234, max_relative = 1e-10);
        assert_relative_eq!(t.t_route[1], 1.928614480910457, max_relative = 1e-10);
        let l2 = harness::link_index(&toy.network, car, "o", "x").unwrap();
        assert_relative_eq!(t.flows.get(car, l2), 6.683307622198091, max_relative = 1e-10);
        let b1 = harness::link_index(&toy.network, bus, "o", "x").unwrap();
        assert_relative_eq!(t.flows.get(bus, b1), 0.4193270602917707, max_relative = 1e-10);
        assert_relative_eq!(d2 as f64, 2.0, max_relative = 1e-15);
    }

    #[test]
    fn hier_symmetric_instance_is_uniform() {
        let toy = harness::symmetric_toy();
        let rs = toy.route_set().unwrap();
        let h = Hierarchy::build(&toy.zones, &toy.tree, &rs).unwrap();
        let flows = LinkFlowVector::zeros(&toy.network);
        let p = hier_extended_prob(&h, &toy.tree, &toy.utilities, &rs, &toy.network, &flows)
            .unwrap();
        for &x in &p.p_dest {
            assert_relative_eq!(x, 0.5, max_relative = 1e-12);
        }
        for &x in &p.p_mode {
            assert_relative_eq!(x, 0.5, max_relative = 1e-12);
        }
        for &x in &p.p_route {
            assert_relative_eq!(x, 0.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn assemble_conserves_margins() {
        let toy = harness::two_dest_toy();
        let rs = toy.route_set().unwrap();
        let h = Hierarchy::build(&toy.zones, &toy.tree, &rs).unwrap();
        let flows = LinkFlowVector::zeros(&toy.network);
        let p = hier_extended_prob(&h, &toy.tree, &toy.utilities, &rs, &toy.network, &flows)
            .unwrap();
        let t = assemble_trips(&toy.zones, &h, &p, &rs, &toy.network);
        let total_dest: f64 = t.t_dest.iter().sum();
        assert_relative_eq!(total_dest, 10.0, max_relative = 1e-12);
        for nn in 0..h.nest_id.len() {
            let d = h.nest_parent[nn] as usize;
            let children: f64 = (0..h.mode_id.len())
                .filter(|&mn| h.mode_parent[mn] as usize == nn)
                .map(|mn| t.t_mode[mn])
                .sum();
            assert_relative_eq!(children, t.t_nest[nn], max_relative = 1e-12);
            assert!(d < h.dest_zone.len());
        }
    }

    #[test]
    fn uniform_probabilities_split_production_evenly() {
        // two destinations, everything symmetric: 100 trips split 50/50
        let mut toy = harness::symmetric_toy();
        toy.zones = ZonalSystem::new(vec![
            ("o".into(), 100.0, 0.0),
            ("d1".into(), 0.0, 1.0),
            ("d2".into(), 0.0, 1.0),
        ])
        .unwrap();
        let rs = toy.route_set().unwrap();
        let h = Hierarchy::build(&toy.zones, &toy.tree, &rs).unwrap();
        let flows = LinkFlowVector::zeros(&toy.network);
        let p = hier_extended_prob(&h, &toy.tree, &toy.utilities, &rs, &toy.network, &flows)
            .unwrap();
        let t = assemble_trips(&toy.zones, &h, &p, &rs, &toy.network);
        for &v in &t.t_dest {
            assert_relative_eq!(v, 50.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_production_means_no_origins() {
        let mut toy = harness::two_dest_toy();
        toy.zones = ZonalSystem::new(vec![
            ("o".into(), 0.0, 0.0),
            ("d1".into(), 0.0, 1.0),
            ("d2".into(), 0.0, 1.0),
        ])
        .unwrap();
        let rs = toy.route_set();
        // with no productions there is nothing to distribute; building the
        // hierarchy reports it rather than emitting an all-zero model
        match rs {
            Ok(rs) => {
                assert!(Hierarchy::build(&toy.zones, &toy.tree, &rs).is_err());
            }
            Err(_) => {} // no origins also means no route demand
        }
    }

    proptest! {
        #[test]
        fn mnl_sums_to_one_and_translation_invariant(
            v in proptest::collection::vec(-30.0f64..30.0, 1..8),
            shift in -50.0f64..50.0,
            theta in 0.05f64..5.0,
        ) {
            let p = mnl_prob(&v, theta).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0 + 1e-15));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = mnl_prob(&shifted, theta).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-11);
            }
            // argmax is invariant under positive rescaling of theta
            let r = mnl_prob(&v, theta * 3.0).unwrap();
            let am = |s: &[f64]| s.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            prop_assert_eq!(am(&p), am(&r));
        }

        #[test]
        fn choice_equation_identity(
            v in proptest::collection::vec(-10.0f64..10.0, 1..7),
            theta in 0.1f64..4.0,
        ) {
            let s = mnl_satisfaction(&v, theta).unwrap();
            let p = mnl_prob(&v, theta).unwrap();
            let mean: f64 = v.iter().zip(&p).map(|(x, q)| x * q).sum();
            let entropy: f64 = p.iter().map(|&q| q * q.ln()).sum::<f64>() / theta;
            prop_assert!((s - (mean - entropy)).abs() < 1e-10);
        }

        #[test]
        fn nl_with_unit_tau_is_mnl(
            v in proptest::collection::vec(-8.0f64..8.0, 4..=4),
            theta in 0.2f64..3.0,
        ) {
            let tree = ModeTree::new(
                4,
                vec![
                    Nest { name: "a".into(), members: vec![0, 1], tau: 1.0 },
                    Nest { name: "b".into(), members: vec![2, 3], tau: 1.0 },
                ],
                1.0,
                theta,
                1.0,
            ).unwrap();
            let nl = nl_prob(&v, &tree).unwrap();
            let mnl = mnl_prob(&v, theta).unwrap();
            let total: f64 = nl.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (a, b) in nl.iter().zip(&mnl) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn ps_factors_in_unit_interval(
            n_routes in 1usize..5,
            seed in 0u64..50,
        ) {
            // random route structures over a small link pool
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let routes: Vec<Route<f64>> = (0..n_routes).map(|_| {
                let len = rng.gen_range(1..4usize);
                let links: Vec<usize> = (0..len).map(|_| rng.gen_range(0..6usize)).collect();
                let lens: Vec<f64> = links.iter().map(|_| rng.gen_range(0.5..3.0)).collect();
                route(links, lens)
            }).collect();
            let ps = ps_factors(&routes);
            for &x in &ps {
                prop_assert!(x > 0.0 && x <= 1.0 + 1e-12);
            }
        }
    }
}
