//! Route-set generation and incidence bookkeeping.
//!
//! Route sets are enumerated once, before any solving, as the K shortest
//! simple paths by free-flow generalized cost (Yen-style loopless
//! enumeration). Congestion never regenerates routes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::choice;
use crate::error::{Error, Result};
use crate::network::ModalNetwork;
use crate::scalar::Real;

/// One simple path through a mode's network.
#[derive(Debug, Clone, PartialEq)]
pub struct Route<R> {
    /// Link indices into the mode's link list, in traversal order.
    pub links: Vec<usize>,
    /// Node indices visited, `links.len() + 1` entries.
    pub nodes: Vec<usize>,
    /// Length of each traversed link, aligned with `links`.
    pub link_lengths: Vec<R>,
    /// Total length in km.
    pub length: R,
    /// Generalized cost at zero flow.
    pub free_flow_cost: R,
}

/// Routes for one `(origin, destination, mode)` triple.
#[derive(Debug, Clone)]
pub struct RouteEntry<R> {
    /// Zone index of the origin.
    pub origin: usize,
    /// Zone index of the destination.
    pub dest: usize,
    /// Mode index.
    pub mode: usize,
    pub routes: Vec<Route<R>>,
    /// Path-size factors, aligned with `routes`.
    pub ps: Vec<R>,
}

impl<R: Real> RouteEntry<R> {
    /// 1 if `link` lies on route `r`, 0 otherwise.
    pub fn incidence(&self, r: usize, link: usize) -> bool {
        self.routes[r].links.contains(&link)
    }
}

/// All enumerated routes, ordered by `(origin, dest, mode)`.
#[derive(Debug, Clone)]
pub struct RouteSet<R> {
    entries: Vec<RouteEntry<R>>,
}

impl<R: Real> RouteSet<R> {
    pub fn from_entries(mut entries: Vec<RouteEntry<R>>) -> Self {
        entries.sort_by_key(|e| (e.origin, e.dest, e.mode));
        let mut set = Self { entries };
        build_incidence(&mut set);
        set
    }

    pub fn entries(&self) -> &[RouteEntry<R>] {
        &self.entries
    }

    pub fn get(&self, origin: usize, dest: usize, mode: usize) -> Option<&RouteEntry<R>> {
        self.entries
            .binary_search_by_key(&(origin, dest, mode), |e| (e.origin, e.dest, e.mode))
            .ok()
            .map(|k| &self.entries[k])
    }
}

struct HeapItem<R> {
    cost: R,
    node: usize,
}

impl<R: Real> PartialEq for HeapItem<R> {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.node == other.node
    }
}
impl<R: Real> Eq for HeapItem<R> {}
impl<R: Real> PartialOrd for HeapItem<R> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<R: Real> Ord for HeapItem<R> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap via BinaryHeap<Reverse<..>> at the call site; finite costs only
        self.cost
            .partial_cmp(&other.cost)
            .expect("route costs must be finite")
            .then(self.node.cmp(&other.node))
    }
}

struct ModeGraph<R> {
    /// node -> (link index, head, free-flow cost)
    adjacency: Vec<Vec<(usize, usize, R)>>,
}

impl<R: Real> ModeGraph<R> {
    fn build(network: &ModalNetwork<R>, mode: usize) -> Self {
        let mut adjacency = vec![Vec::new(); network.n_nodes()];
        for (idx, link) in network.mode_links(mode).iter().enumerate() {
            let cost = network.vot(mode) * link.vdf.time(R::zero()) + link.money_cost;
            adjacency[link.tail].push((idx, link.head, cost));
        }
        Self { adjacency }
    }

    /// Dijkstra from `src` to `dst` avoiding banned nodes and links.
    fn shortest(
        &self,
        src: usize,
        dst: usize,
        banned_nodes: &[bool],
        banned_links: &[bool],
    ) -> Option<(Vec<usize>, R)> {
        let n = self.adjacency.len();
        let mut dist = vec![R::infinity(); n];
        let mut pred: Vec<Option<(usize, usize)>> = vec![None; n]; // (prev node, link)
        let mut heap = BinaryHeap::new();
        dist[src] = R::zero();
        heap.push(std::cmp::Reverse(HeapItem {
            cost: R::zero(),
            node: src,
        }));
        while let Some(std::cmp::Reverse(HeapItem { cost, node })) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            if node == dst {
                break;
            }
            for &(link, head, c) in &self.adjacency[node] {
                if banned_links[link] || banned_nodes[head] {
                    continue;
                }
                let next = cost + c;
                if next < dist[head] {
                    dist[head] = next;
                    pred[head] = Some((node, link));
                    heap.push(std::cmp::Reverse(HeapItem {
                        cost: next,
                        node: head,
                    }));
                }
            }
        }
        if dist[dst].is_infinite() {
            return None;
        }
        let mut links = Vec::new();
        let mut at = dst;
        while at != src {
            let (prev, link) = pred[at]?;
            links.push(link);
            at = prev;
        }
        links.reverse();
        Some((links, dist[dst]))
    }
}

fn make_route<R: Real>(network: &ModalNetwork<R>, mode: usize, links: Vec<usize>, src: usize) -> Route<R> {
    let mut nodes = vec![src];
    let mut link_lengths = Vec::with_capacity(links.len());
    let mut length = R::zero();
    let mut cost = R::zero();
    for &a in &links {
        let l = &network.mode_links(mode)[a];
        nodes.push(l.head);
        link_lengths.push(l.length);
        length = length + l.length;
        cost = cost + network.vot(mode) * l.vdf.time(R::zero()) + l.money_cost;
    }
    Route {
        links,
        nodes,
        link_lengths,
        length,
        free_flow_cost: cost,
    }
}

/// K shortest simple paths between two nodes on one mode, ordered by
/// free-flow cost ascending with lexicographic node-sequence tie-break.
///
/// Fewer than `k` routes is legal when the network does not contain them;
/// a disconnected pair is an error.
pub fn k_shortest_paths<R: Real>(
    network: &ModalNetwork<R>,
    mode: usize,
    src: usize,
    dst: usize,
    k: usize,
) -> Result<Vec<Route<R>>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let graph = ModeGraph::build(network, mode);
    let n_nodes = network.n_nodes();
    let n_links = network.mode_links(mode).len();
    let no_nodes = vec![false; n_nodes];
    let no_links = vec![false; n_links];
    let Some((links, _)) = graph.shortest(src, dst, &no_nodes, &no_links) else {
        return Err(Error::Disconnected {
            origin: network.node_name(src).to_string(),
            dest: network.node_name(dst).to_string(),
            mode: network.mode_name(mode).to_string(),
        });
    };
    let mut found = vec![make_route(network, mode, links, src)];
    let mut candidates: Vec<Route<R>> = Vec::new();

    while found.len() < k {
        let prev = found.last().unwrap().clone();
        for spur_idx in 0..prev.links.len() {
            let spur_node = prev.nodes[spur_idx];
            let root = &prev.links[..spur_idx];
            let mut banned_links = vec![false; n_links];
            for p in &found {
                if p.links.len() > spur_idx && p.links[..spur_idx] == *root {
                    banned_links[p.links[spur_idx]] = true;
                }
            }
            let mut banned_nodes = vec![false; n_nodes];
            for &nd in &prev.nodes[..spur_idx] {
                banned_nodes[nd] = true;
            }
            if let Some((spur_links, _)) = graph.shortest(spur_node, dst, &banned_nodes, &banned_links)
            {
                let mut links = root.to_vec();
                links.extend(spur_links);
                if found.iter().chain(candidates.iter()).all(|r| r.links != links) {
                    candidates.push(make_route(network, mode, links, src));
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| {
            a.free_flow_cost
                .partial_cmp(&b.free_flow_cost)
                .expect("finite route costs")
                .then_with(|| a.nodes.cmp(&b.nodes))
                .then_with(|| a.links.cmp(&b.links))
        });
        found.push(candidates.remove(0));
    }
    Ok(found)
}

/// Enumerates the route entry for one `(origin zone, dest zone, mode)`.
pub fn enumerate_routes<R: Real>(
    network: &ModalNetwork<R>,
    origin_zone: usize,
    dest_zone: usize,
    mode: usize,
    origin_node: usize,
    dest_node: usize,
    k: usize,
) -> Result<RouteEntry<R>> {
    let routes = k_shortest_paths(network, mode, origin_node, dest_node, k)?;
    Ok(RouteEntry {
        origin: origin_zone,
        dest: dest_zone,
        mode,
        routes,
        ps: Vec::new(),
    })
}

/// Recomputes path-size factors for every entry and returns the link usage
/// counts (the nonzero columns of the link-route incidence table).
pub fn build_incidence<R: Real>(route_set: &mut RouteSet<R>) -> Vec<Vec<(usize, u32)>> {
    let mut counts_per_entry = Vec::with_capacity(route_set.entries.len());
    for entry in &mut route_set.entries {
        let mut counts: Vec<(usize, u32)> = Vec::new();
        for route in &entry.routes {
            for &a in &route.links {
                match counts.binary_search_by_key(&a, |&(l, _)| l) {
                    Ok(pos) => counts[pos].1 += 1,
                    Err(pos) => counts.insert(pos, (a, 1)),
                }
            }
        }
        entry.ps = choice::ps_factors(&entry.routes);
        counts_per_entry.push(counts);
    }
    counts_per_entry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModalNetwork;

    fn parallel_net() -> ModalNetwork<f64> {
        let mut net = ModalNetwork::new(1.0).unwrap();
        net.add_link("car", "s", "t", 1.0, 5.0, 100.0, 0.15, 4.0, 0.0)
            .unwrap();
        net.add_link("car", "s", "t", 1.0, 7.0, 100.0, 0.15, 4.0, 0.0)
            .unwrap();
        net
    }

    #[test]
    fn two_parallel_links_are_two_routes() {
        let net = parallel_net();
        let routes = k_shortest_paths(&net, 0, 0, 1, 2).unwrap();
        assert_eq!(routes.len(), 2);
        assert_eq!(routes[0].links, vec![0]);
        assert_eq!(routes[1].links, vec![1]);
        assert!(routes[0].free_flow_cost < routes[1].free_flow_cost);
    }

    #[test]
    fn k1_is_shortest_path() {
        let net = parallel_net();
        let routes = k_shortest_paths(&net, 0, 0, 1, 1).unwrap();
        assert_eq!(routes.len(), 1);
        assert_eq!(routes[0].links, vec![0]);
    }

    /// 2x2 directed grid (right/down arcs) has exactly 2 simple paths
    /// corner-to-corner; asking for 3 returns the 2 that exist.
    #[test]
    fn grid_has_two_simple_paths() {
        let mut net = ModalNetwork::<f64>::new(1.0).unwrap();
        for (a, b, t) in [
            ("nw", "ne", 5.0),
            ("nw", "sw", 6.0),
            ("ne", "se", 7.0),
            ("sw", "se", 4.0),
        ] {
            net.add_link("car", a, b, 1.0, t, 100.0, 0.15, 4.0, 0.0).unwrap();
        }
        let src = net.node("nw").unwrap();
        let dst = net.node("se").unwrap();
        let routes = k_shortest_paths(&net, 0, src, dst, 3).unwrap();
        assert_eq!(routes.len(), 2);
        assert!(routes[0].free_flow_cost <= routes[1].free_flow_cost);
        // exhaustive enumeration of the 4-node grid gives costs 10 and 12
        assert!((routes[0].free_flow_cost - 10.0).abs() < 1e-12);
        assert!((routes[1].free_flow_cost - 12.0).abs() < 1e-12);
    }

    #[test]
    fn routes_are_simple_sorted_unique() {
        // diamond with a shortcut, rich enough for K=4
        let mut net = ModalNetwork::<f64>::new(1.0).unwrap();
        for (a, b, t) in [
            ("s", "a", 1.0),
            ("s", "b", 2.0),
            ("a", "b", 0.5),
            ("b", "a", 0.5),
            ("a", "t", 2.0),
            ("b", "t", 1.0),
        ] {
            net.add_link("car", a, b, 1.0, t, 100.0, 0.15, 4.0, 0.0).unwrap();
        }
        let src = net.node("s").unwrap();
        let dst = net.node("t").unwrap();
        let routes = k_shortest_paths(&net, 0, src, dst, 5).unwrap();
        assert!(routes.len() >= 3);
        for w in routes.windows(2) {
            assert!(w[0].free_flow_cost <= w[1].free_flow_cost);
            assert_ne!(w[0].links, w[1].links);
        }
        for r in &routes {
            let mut seen = r.nodes.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), r.nodes.len(), "route must be loopless");
        }
    }

    #[test]
    fn disconnected_pair_is_an_error() {
        let mut net = ModalNetwork::<f64>::new(1.0).unwrap();
        net.add_link("car", "a", "b", 1.0, 5.0, 100.0, 0.15, 4.0, 0.0)
            .unwrap();
        net.add_link("car", "c", "d", 1.0, 5.0, 100.0, 0.15, 4.0, 0.0)
            .unwrap();
        let a = net.node("a").unwrap();
        let d = net.node("d").unwrap();
        let err = k_shortest_paths(&net, 0, a, d, 2).unwrap_err();
        assert!(matches!(err, Error::Disconnected { .. }));
    }

    #[test]
    fn extending_route_set_never_raises_ps() {
        let mut net = ModalNetwork::<f64>::new(1.0).unwrap();
        for (a, b, t) in [
            ("s", "m", 1.0),
            ("m", "t", 1.0),
            ("m", "t", 1.5),
            ("s", "t", 4.0),
        ] {
            net.add_link("car", a, b, 1.0, t, 100.0, 0.15, 4.0, 0.0).unwrap();
        }
        let src = net.node("s").unwrap();
        let dst = net.node("t").unwrap();
        let small = RouteSet::from_entries(vec![RouteEntry {
            origin: 0,
            dest: 1,
            mode: 0,
            routes: k_shortest_paths(&net, 0, src, dst, 2).unwrap(),
            ps: Vec::new(),
        }]);
        let big = RouteSet::from_entries(vec![RouteEntry {
            origin: 0,
            dest: 1,
            mode: 0,
            routes: k_shortest_paths(&net, 0, src, dst, 4).unwrap(),
            ps: Vec::new(),
        }]);
        let se = &small.entries()[0];
        let be = &big.entries()[0];
        for (ri, r) in se.routes.iter().enumerate() {
            let bi = be.routes.iter().position(|b| b.links == r.links).unwrap();
            assert!(
                be.ps[bi] <= se.ps[ri] + 1e-15,
                "PS may not increase when routes are added"
            );
        }
    }
}
