//! Zonal system and per-mode link networks with generalized-cost functions.
//!
//! A link's generalized cost is `vot * t(f) + c` where `t` is a BPR-style
//! volume-delay function `t0 * (1 + alpha (f/cap)^beta)`, `vot` the value of
//! time, and `c` a flat monetary cost. `beta = 0` yields a capacity-insensitive
//! (flat) link, used for schedule-based modes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Zones with trip productions and attractions.
#[derive(Debug, Clone)]
pub struct ZonalSystem<R> {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    productions: Vec<R>,
    attractions: Vec<R>,
}

impl<R: Real> ZonalSystem<R> {
    pub fn new(rows: Vec<(String, R, R)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut index = HashMap::new();
        let mut productions = Vec::with_capacity(rows.len());
        let mut attractions = Vec::with_capacity(rows.len());
        for (id, o, d) in rows {
            if o < R::zero() || d < R::zero() {
                return Err(Error::InvalidParameter(format!(
                    "zone `{id}` has a negative margin"
                )));
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate zone `{id}`")));
            }
            ids.push(id);
            productions.push(o);
            attractions.push(d);
        }
        Ok(Self {
            ids,
            index,
            productions,
            attractions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn zone(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownZone(id.to_string()))
    }

    pub fn production(&self, idx: usize) -> R {
        self.productions[idx]
    }

    pub fn attraction(&self, idx: usize) -> R {
        self.attractions[idx]
    }

    /// Zone indices with positive production, in declaration order.
    pub fn origins(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.productions[i] > R::zero())
            .collect()
    }

    /// Zone indices with positive attraction, in declaration order.
    pub fn destinations(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| self.attractions[j] > R::zero())
            .collect()
    }

    /// Checks `sum O_i == sum D_j` within a relative tolerance.
    pub fn check_balanced(&self, rel_tol: R) -> Result<()> {
        let o: R = self.productions.iter().copied().sum();
        let d: R = self.attractions.iter().copied().sum();
        let scale = o.abs().max(d.abs()).max(R::one());
        if (o - d).abs() > rel_tol * scale {
            return Err(Error::UnbalancedMargins {
                production: o.to_f64().unwrap_or(f64::NAN),
                attraction: d.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }
}

/// BPR-style volume-delay function `t0 * (1 + alpha (f/cap)^beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vdf<R> {
    pub t0: R,
    pub capacity: R,
    pub alpha: R,
    pub beta: R,
}

impl<R: Real> Vdf<R> {
    pub fn new(t0: R, capacity: R, alpha: R, beta: R) -> Result<Self> {
        if !(t0 > R::zero()) || !(capacity > R::zero()) {
            return Err(Error::InvalidParameter(
                "free-flow time and capacity must be strictly positive".into(),
            ));
        }
        if alpha < R::zero() || beta < R::zero() {
            return Err(Error::InvalidParameter(
                "volume-delay parameters must be nonnegative".into(),
            ));
        }
        Ok(Self {
            t0,
            capacity,
            alpha,
            beta,
        })
    }

    /// Travel time at the given flow, in minutes.
    #[inline]
    pub fn time(&self, flow: R) -> R {
        if self.beta == R::zero() {
            // flat link: capacity-insensitive
            return self.t0 * (R::one() + self.alpha);
        }
        self.t0 * (R::one() + self.alpha * (flow / self.capacity).powf(self.beta))
    }

    /// Closed-form antiderivative of [`Vdf::time`] evaluated at `flow`.
    #[inline]
    pub fn time_integral(&self, flow: R) -> R {
        if self.beta == R::zero() {
            return self.t0 * (R::one() + self.alpha) * flow;
        }
        let bp1 = self.beta + R::one();
        self.t0 * (flow + self.alpha * flow * (flow / self.capacity).powf(self.beta) / bp1)
    }
}

/// One directed link in a mode's network.
#[derive(Debug, Clone)]
pub struct Link<R> {
    pub tail: usize,
    pub head: usize,
    pub length: R,
    pub vdf: Vdf<R>,
    pub money_cost: R,
}

/// Flow on every (mode, link) pair, in trips per period.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkFlowVector<R> {
    per_mode: Vec<Vec<R>>,
}

impl<R: Real> LinkFlowVector<R> {
    pub fn zeros(network: &ModalNetwork<R>) -> Self {
        Self {
            per_mode: network.links.iter().map(|l| vec![R::zero(); l.len()]).collect(),
        }
    }

    #[inline]
    pub fn get(&self, mode: usize, link: usize) -> R {
        self.per_mode[mode][link]
    }

    #[inline]
    pub fn add(&mut self, mode: usize, link: usize, v: R) {
        self.per_mode[mode][link] = self.per_mode[mode][link] + v;
    }

    pub fn mode_flows(&self, mode: usize) -> &[R] {
        &self.per_mode[mode]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, R)> + '_ {
        self.per_mode
            .iter()
            .enumerate()
            .flat_map(|(m, v)| v.iter().enumerate().map(move |(a, &f)| (m, a, f)))
    }

    /// Largest relative difference against `other`, scaled by `max(1, |self|)`.
    pub fn max_rel_diff(&self, other: &Self) -> R {
        let mut worst = R::zero();
        for (m, v) in self.per_mode.iter().enumerate() {
            for (a, &f) in v.iter().enumerate() {
                let g = other.per_mode[m][a];
                let d = (f - g).abs() / f.abs().max(R::one());
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }
}

/// Per-mode directed link networks sharing one node namespace.
#[derive(Debug, Clone)]
pub struct ModalNetwork<R> {
    nodes: Vec<String>,
    node_index: HashMap<String, usize>,
    modes: Vec<String>,
    mode_index: HashMap<String, usize>,
    links: Vec<Vec<Link<R>>>,
    vot: Vec<R>,
}

impl<R: Real> ModalNetwork<R> {
    /// Starts an empty network with the given network-wide value of time
    /// (currency per minute).
    pub fn new(vot: R) -> Result<Self> {
        if !(vot > R::zero()) {
            return Err(Error::InvalidParameter(
                "value of time must be strictly positive".into(),
            ));
        }
        Ok(Self {
            nodes: Vec::new(),
            node_index: HashMap::new(),
            modes: Vec::new(),
            mode_index: HashMap::new(),
            links: Vec::new(),
            vot: vec![vot],
        })
    }

    fn intern_node(&mut self, name: &str) -> usize {
        if let Some(&i) = self.node_index.get(name) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(name.to_string());
        self.node_index.insert(name.to_string(), i);
        i
    }

    /// Registers a mode (idempotent) and returns its index.
    pub fn intern_mode(&mut self, name: &str) -> usize {
        if let Some(&m) = self.mode_index.get(name) {
            return m;
        }
        let m = self.modes.len();
        self.modes.push(name.to_string());
        self.mode_index.insert(name.to_string(), m);
        self.links.push(Vec::new());
        let default_vot = self.vot[0];
        if self.vot.len() <= m + 1 {
            self.vot.resize(m + 2, default_vot);
        }
        m
    }

    /// Overrides the value of time for one mode.
    pub fn set_mode_vot(&mut self, mode: &str, vot: R) -> Result<()> {
        if !(vot > R::zero()) {
            return Err(Error::InvalidParameter(
                "value of time must be strictly positive".into(),
            ));
        }
        let m = self.intern_mode(mode);
        self.vot[m + 1] = vot;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn add_link(
        &mut self,
        mode: &str,
        tail: &str,
        head: &str,
        length: R,
        t0: R,
        capacity: R,
        alpha: R,
        beta: R,
        money_cost: R,
    ) -> Result<()> {
        if !(length > R::zero()) {
            return Err(Error::InvalidParameter(format!(
                "link {tail}->{head}: length must be strictly positive"
            )));
        }
        let vdf = Vdf::new(t0, capacity, alpha, beta)?;
        let m = self.intern_mode(mode);
        let tail = self.intern_node(tail);
        let head = self.intern_node(head);
        self.links[m].push(Link {
            tail,
            head,
            length,
            vdf,
            money_cost,
        });
        Ok(())
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[String] {
        &self.modes
    }

    pub fn mode(&self, name: &str) -> Result<usize> {
        self.mode_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownMode(name.to_string()))
    }

    pub fn mode_name(&self, mode: usize) -> &str {
        &self.modes[mode]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, name: &str) -> Result<usize> {
        self.node_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn node_name(&self, idx: usize) -> &str {
        &self.nodes[idx]
    }

    pub fn mode_links(&self, mode: usize) -> &[Link<R>] {
        &self.links[mode]
    }

    pub fn vot(&self, mode: usize) -> R {
        self.vot[mode + 1]
    }

    pub fn link(&self, mode: usize, link: usize) -> Result<&Link<R>> {
        self.links
            .get(mode)
            .and_then(|l| l.get(link))
            .ok_or_else(|| Error::UnknownLink {
                mode: self
                    .modes
                    .get(mode)
                    .cloned()
                    .unwrap_or_else(|| format!("#{mode}")),
                index: link,
            })
    }

    /// Generalized cost of one link at the given flow: `vot * t(f) + c`.
    pub fn link_cost(&self, mode: usize, link: usize, flow: R) -> Result<R> {
        if flow < R::zero() {
            return Err(Error::NegativeFlow(flow.to_f64().unwrap_or(f64::NAN)));
        }
        let l = self.link(mode, link)?;
        Ok(self.vot(mode) * l.vdf.time(flow) + l.money_cost)
    }

    /// Sum over links of the exact closed-form integral of the generalized
    /// cost from zero to the current flow.
    pub fn beckmann_value(&self, flows: &LinkFlowVector<R>) -> Result<R> {
        let mut total = R::zero();
        for (m, links) in self.links.iter().enumerate() {
            let vot = self.vot(m);
            for (a, l) in links.iter().enumerate() {
                let f = flows.get(m, a);
                if f < R::zero() {
                    return Err(Error::NegativeFlow(f.to_f64().unwrap_or(f64::NAN)));
                }
                total = total + vot * l.vdf.time_integral(f) + l.money_cost * f;
            }
        }
        Ok(total)
    }

    /// Additive generalized cost of a route given current link flows.
    pub fn route_cost(&self, flows: &LinkFlowVector<R>, mode: usize, links: &[usize]) -> Result<R> {
        let mut total = R::zero();
        for &a in links {
            total = total + self.link_cost(mode, a, flows.get(mode, a))?;
        }
        Ok(total)
    }

    /// Length of a link sequence in km.
    pub fn route_length(&self, mode: usize, links: &[usize]) -> Result<R> {
        let mut total = R::zero();
        for &a in links {
            total = total + self.link(mode, a)?.length;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_link_net() -> ModalNetwork<f64> {
        // BPR link: t0=10 min, cap=1000, alpha=0.15, beta=4, vot=0.5, money=1.0
        let mut net = ModalNetwork::new(0.5).unwrap();
        net.add_link("car", "a", "b", 2.0, 10.0, 1000.0, 0.15, 4.0, 1.0)
            .unwrap();
        net
    }

    #[test]
    fn free_flow_cost_is_vot_t0_plus_money() {
        let net = one_link_net();
        let c = net.link_cost(0, 0, 0.0).unwrap();
        assert!((c - (0.5 * 10.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn bpr_cost_at_capacity() {
        // 0.5 * 10 * (1 + 0.15) + 1.0 = 6.75, by hand evaluation of the BPR formula
        let net = one_link_net();
        let c = net.link_cost(0, 0, 1000.0).unwrap();
        assert!((c - 6.75).abs() < 1e-12);
    }

    #[test]
    fn cost_is_strictly_increasing() {
        let net = one_link_net();
        let mut prev = net.link_cost(0, 0, 0.0).unwrap();
        for k in 1..50 {
            let f = 40.0 * k as f64;
            let c = net.link_cost(0, 0, f).unwrap();
            assert!(c > prev, "cost must increase: f={f}, {c} <= {prev}");
            prev = c;
        }
    }

    #[test]
    fn beckmann_single_link_closed_form() {
        // integral_0^1000 [0.5*10*(1+0.15 (w/1000)^4) + 1] dw = 5000 + 150 + 1000 = 6150
        let net = one_link_net();
        let mut flows = LinkFlowVector::zeros(&net);
        flows.add(0, 0, 1000.0);
        let v = net.beckmann_value(&flows).unwrap();
        assert!((v - 6150.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn beckmann_zero_flow_is_zero() {
        let net = one_link_net();
        let flows = LinkFlowVector::zeros(&net);
        assert_eq!(net.beckmann_value(&flows).unwrap(), 0.0);
    }

    #[test]
    fn beckmann_gradient_matches_link_cost() {
        let net = one_link_net();
        let f = 732.5;
        let h = 1e-3;
        let eval = |x: f64| {
            let mut fl = LinkFlowVector::zeros(&net);
            fl.add(0, 0, x);
            net.beckmann_value(&fl).unwrap()
        };
        let fd = (eval(f + h) - eval(f - h)) / (2.0 * h);
        let g = net.link_cost(0, 0, f).unwrap();
        assert!((fd - g).abs() / g.abs() < 1e-6, "fd {fd} vs cost {g}");
    }

    #[test]
    fn route_cost_is_additive() {
        let mut net = ModalNetwork::<f64>::new(0.5).unwrap();
        net.add_link("car", "a", "b", 1.0, 4.0, 600.0, 0.15, 4.0, 0.5)
            .unwrap();
        net.add_link("car", "b", "c", 1.2, 5.0, 600.0, 0.15, 4.0, 0.5)
            .unwrap();
        net.add_link("car", "c", "d", 2.0, 6.0, 600.0, 0.15, 4.0, 0.3)
            .unwrap();
        let flows = LinkFlowVector::zeros(&net);
        let single = net.route_cost(&flows, 0, &[0]).unwrap();
        assert!((single - net.link_cost(0, 0, 0.0).unwrap()).abs() < 1e-15);
        let two = net.route_cost(&flows, 0, &[0, 1]).unwrap();
        let expect2 = net.link_cost(0, 0, 0.0).unwrap() + net.link_cost(0, 1, 0.0).unwrap();
        assert!((two - expect2).abs() < 1e-15);
        // free-flow sum over a 3-link route, by hand:
        // (0.5*4+0.5) + (0.5*5+0.5) + (0.5*6+0.3) = 2.5 + 3.0 + 3.3 = 8.8
        let three = net.route_cost(&flows, 0, &[0, 1, 2]).unwrap();
        assert!((three - 8.8).abs() < 1e-12);
    }

    #[test]
    fn flat_vdf_is_capacity_insensitive() {
        let mut net = ModalNetwork::<f64>::new(1.0).unwrap();
        net.add_link("bus", "a", "b", 1.0, 7.0, 400.0, 0.0, 0.0, 0.2)
            .unwrap();
        let c0 = net.link_cost(0, 0, 0.0).unwrap();
        let c1 = net.link_cost(0, 0, 10_000.0).unwrap();
        assert_eq!(c0, c1);
        assert!((c0 - 7.2).abs() < 1e-15);
    }

    #[test]
    fn errors_on_bad_lookups_and_domain() {
        let net = one_link_net();
        assert!(matches!(
            net.link_cost(0, 5, 0.0),
            Err(Error::UnknownLink { .. })
        ));
        assert!(matches!(
            net.link_cost(0, 0, -1.0),
            Err(Error::NegativeFlow(_))
        ));
        assert!(net.mode("walk").is_err());
    }

    #[test]
    fn per_mode_vot_override() {
        let mut net = ModalNetwork::<f64>::new(0.5).unwrap();
        net.add_link("car", "a", "b", 1.0, 10.0, 1000.0, 0.15, 4.0, 0.0)
            .unwrap();
        net.add_link("bus", "a", "b", 1.0, 10.0, 1000.0, 0.15, 4.0, 0.0)
            .unwrap();
        net.set_mode_vot("bus", 0.25).unwrap();
        assert!((net.link_cost(0, 0, 0.0).unwrap() - 5.0).abs() < 1e-15);
        assert!((net.link_cost(1, 0, 0.0).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn zonal_system_balance_check() {
        let z = ZonalSystem::<f64>::new(vec![
            ("a".into(), 10.0, 0.0),
            ("b".into(), 0.0, 6.0),
            ("c".into(), 0.0, 4.0),
        ])
        .unwrap();
        z.check_balanced(1e-9).unwrap();
        assert_eq!(z.origins(), vec![0]);
        assert_eq!(z.destinations(), vec![1, 2]);
        let bad = ZonalSystem::new(vec![("a".into(), 10.0, 0.0), ("b".into(), 0.0, 9.0)]).unwrap();
        assert!(bad.check_balanced(1e-9).is_err());
    }
}
