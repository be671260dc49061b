//! Exact solver for the balanced transportation problem
//!
//!   min sum_ij c_ij x_ij   s.t.  sum_j x_ij = a_i,  sum_i x_ij = b_j,  x >= 0
//!
//! via the network simplex specialized to dense bipartite instances. The
//! basis is a spanning tree over supply and demand nodes; potentials are
//! recomputed by BFS after every pivot (instances stay at desk scale, so
//! simplicity wins over thread-index bookkeeping). Entering arcs are found
//! by cyclic block pricing; after a long degenerate streak the pivot rule
//! switches to Bland's rule, which guarantees termination.

use crate::error::{Error, Result};

const NO_NODE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct Flow {
    pub source: usize,
    pub target: usize,
    pub amount: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub cost: f64,
    pub flows: Vec<Flow>,
}

struct Tree {
    n_supply: usize,
    /// Basic-arc adjacency per node; arc id is `i * n_demand + j`.
    adjacency: Vec<Vec<(usize, usize)>>,
    parent: Vec<usize>,
    parent_arc: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
}

impl Tree {
    fn new(n_supply: usize, n_demand: usize) -> Self {
        let n = n_supply + n_demand;
        Tree {
            n_supply,
            adjacency: vec![Vec::new(); n],
            parent: vec![NO_NODE; n],
            parent_arc: vec![usize::MAX; n],
            depth: vec![0; n],
            potential: vec![0.0; n],
        }
    }

    fn add_arc(&mut self, arc: usize, n_demand: usize) {
        let (i, j) = (arc / n_demand, arc % n_demand);
        self.adjacency[i].push((self.n_supply + j, arc));
        self.adjacency[self.n_supply + j].push((i, arc));
    }

    fn remove_arc(&mut self, arc: usize, n_demand: usize) {
        let (i, j) = (arc / n_demand, arc % n_demand);
        self.adjacency[i].retain(|&(_, a)| a != arc);
        self.adjacency[self.n_supply + j].retain(|&(_, a)| a != arc);
    }

    /// Rebuilds parents, depths, and potentials from the root by BFS.
    /// Potentials satisfy `u_i + v_j = c_ij` on every basic arc.
    fn refresh(&mut self, cost: &[f64], n_demand: usize) {
        let n = self.adjacency.len();
        self.parent.iter_mut().for_each(|p| *p = NO_NODE);
        let mut visited = vec![false; n];
        let mut queue = std::collections::VecDeque::with_capacity(n);
        visited[0] = true;
        self.depth[0] = 0;
        self.potential[0] = 0.0;
        queue.push_back(0usize);
        while let Some(node) = queue.pop_front() {
            for &(nbr, arc) in &self.adjacency[node] {
                if visited[nbr] {
                    continue;
                }
                visited[nbr] = true;
                self.parent[nbr] = node;
                self.parent_arc[nbr] = arc;
                self.depth[nbr] = self.depth[node] + 1;
                let c = cost[arc];
                self.potential[nbr] = c - self.potential[node];
                queue.push_back(nbr);
            }
        }
        debug_assert!(visited.iter().all(|&v| v), "basis tree must span all nodes");
        let _ = n_demand;
    }

    fn reduced_cost(&self, arc: usize, cost: &[f64], n_demand: usize) -> f64 {
        let (i, j) = (arc / n_demand, arc % n_demand);
        cost[arc] - self.potential[i] - self.potential[self.n_supply + j]
    }
}

/// Solves the balanced transportation problem exactly. `cost` is row-major
/// `n_supply x n_demand`. Supplies and demands must be nonnegative with
/// equal totals (tolerance 1e-9 relative); demands are rescaled to balance
/// exactly.
pub fn solve_transportation(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<Solution> {
    let ns = supply.len();
    let nt = demand.len();
    if ns == 0 || nt == 0 {
        return Err(Error::InvalidMeasure("empty marginal".into()));
    }
    if cost.len() != ns * nt {
        return Err(Error::Dimension(format!(
            "cost matrix has {} entries, expected {}",
            cost.len(),
            ns * nt
        )));
    }
    let total_supply: f64 = supply.iter().sum();
    let total_demand: f64 = demand.iter().sum();
    if supply.iter().any(|&s| s < 0.0) || demand.iter().any(|&d| d < 0.0) {
        return Err(Error::InvalidMeasure("negative marginal mass".into()));
    }
    if (total_supply - total_demand).abs() > 1e-9 * total_supply.max(total_demand).max(1.0) {
        return Err(Error::InvalidMeasure(format!(
            "unbalanced marginals: supply {total_supply}, demand {total_demand}"
        )));
    }
    if total_supply <= 0.0 {
        return Err(Error::InvalidMeasure("zero total mass".into()));
    }
    let balance = total_supply / total_demand;
    let demand: Vec<f64> = demand.iter().map(|d| d * balance).collect();

    let mut flow = vec![0.0f64; ns * nt];
    let mut is_basic = vec![false; ns * nt];
    let mut tree = Tree::new(ns, nt);

    initial_basis(supply, &demand, cost, &mut flow, &mut is_basic, &mut tree, nt);
    tree.refresh(cost, nt);

    let cost_scale = cost.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1.0);
    let enter_tol = 1e-11 * cost_scale;
    let mass_scale = total_supply.max(1.0);
    let degenerate_tol = 1e-15 * mass_scale;

    let n_arcs = ns * nt;
    let block = ((n_arcs as f64).sqrt() as usize).clamp(16, 4096);
    let mut cursor = 0usize;
    let mut degenerate_streak = 0usize;
    let max_pivots = 400 * (ns + nt) + 20_000;

    for _pivot in 0..max_pivots {
        let bland = degenerate_streak > ns + nt + 16;
        let entering = if bland {
            find_entering_bland(&tree, cost, &is_basic, nt, enter_tol)
        } else {
            find_entering_block(&tree, cost, &is_basic, nt, enter_tol, block, &mut cursor)
        };
        let Some(arc) = entering else {
            return Ok(finish(flow, cost, supply, &demand, ns, nt));
        };
        let theta = pivot(arc, &mut tree, &mut flow, &mut is_basic, cost, nt, bland);
        if theta <= degenerate_tol {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
    }
    Err(Error::Solver(format!(
        "network simplex exceeded {max_pivots} pivots on a {ns}x{nt} instance"
    )))
}

/// Row-minimum starting basis: rows in order ship to their cheapest open
/// column; every allocation closes exactly one line, so the allocated
/// cells form a spanning tree with `ns + nt - 1` basic arcs.
fn initial_basis(
    supply: &[f64],
    demand: &[f64],
    cost: &[f64],
    flow: &mut [f64],
    is_basic: &mut [bool],
    tree: &mut Tree,
    nt: usize,
) {
    let ns = supply.len();
    let mut rs: Vec<f64> = supply.to_vec();
    let mut rd: Vec<f64> = demand.to_vec();
    let mut row_closed = vec![false; ns];
    let mut col_closed = vec![false; nt];
    let mut open_rows = ns;
    let mut row_cursor = 0usize;

    for _ in 0..(ns + nt - 1) {
        while row_cursor < ns && row_closed[row_cursor] {
            row_cursor += 1;
        }
        let i = row_cursor.min(ns - 1);
        let mut best_j = usize::MAX;
        let mut best_c = f64::INFINITY;
        for j in 0..nt {
            if !col_closed[j] && cost[i * nt + j] < best_c {
                best_c = cost[i * nt + j];
                best_j = j;
            }
        }
        let j = best_j;
        let amount = rs[i].min(rd[j]).max(0.0);
        let arc = i * nt + j;
        flow[arc] = amount;
        is_basic[arc] = true;
        tree.add_arc(arc, nt);
        rs[i] -= amount;
        rd[j] -= amount;
        if open_rows > 1 && rs[i] <= rd[j] {
            row_closed[i] = true;
            open_rows -= 1;
        } else {
            col_closed[j] = true;
        }
    }
}

fn find_entering_block(
    tree: &Tree,
    cost: &[f64],
    is_basic: &[bool],
    nt: usize,
    tol: f64,
    block: usize,
    cursor: &mut usize,
) -> Option<usize> {
    let n_arcs = cost.len();
    let mut scanned = 0usize;
    while scanned < n_arcs {
        let mut best: Option<(usize, f64)> = None;
        let end = (*cursor + block).min(*cursor + (n_arcs - scanned));
        for raw in *cursor..end {
            let arc = raw % n_arcs;
            if is_basic[arc] {
                continue;
            }
            let rc = tree.reduced_cost(arc, cost, nt);
            if rc < -tol && best.map_or(true, |(_, b)| rc < b) {
                best = Some((arc, rc));
            }
        }
        scanned += end - *cursor;
        *cursor = end % n_arcs;
        if let Some((arc, _)) = best {
            return Some(arc);
        }
    }
    None
}

fn find_entering_bland(
    tree: &Tree,
    cost: &[f64],
    is_basic: &[bool],
    nt: usize,
    tol: f64,
) -> Option<usize> {
    (0..cost.len()).find(|&arc| !is_basic[arc] && tree.reduced_cost(arc, cost, nt) < -tol)
}

/// Performs one pivot on the entering arc; returns the amount of flow
/// shifted around the cycle (zero for a degenerate pivot).
fn pivot(
    entering: usize,
    tree: &mut Tree,
    flow: &mut [f64],
    is_basic: &mut [bool],
    cost: &[f64],
    nt: usize,
    bland: bool,
) -> f64 {
    let ns = tree.n_supply;
    let ei = entering / nt;
    let ej = entering % nt;
    let row_node = ei;
    let col_node = ns + ej;

    // Walk both endpoints to their lowest common ancestor, collecting the
    // cycle arcs with the sign of their flow change when one unit enters
    // on (row -> col). Walking up from the column endpoint: leaving a
    // column node decreases its parent arc, leaving a row node increases
    // it; the signs flip on the row-endpoint side.
    let mut up_col = Vec::new();
    let mut up_row = Vec::new();
    let (mut a, mut b) = (col_node, row_node);
    while tree.depth[a] > tree.depth[b] {
        up_col.push((tree.parent_arc[a], a < ns));
        a = tree.parent[a];
    }
    while tree.depth[b] > tree.depth[a] {
        up_row.push((tree.parent_arc[b], b < ns));
        b = tree.parent[b];
    }
    while a != b {
        up_col.push((tree.parent_arc[a], a < ns));
        a = tree.parent[a];
        up_row.push((tree.parent_arc[b], b < ns));
        b = tree.parent[b];
    }

    // Sign convention: +1 means flow increases with theta.
    let mut cycle: Vec<(usize, f64)> = Vec::with_capacity(up_col.len() + up_row.len() + 1);
    cycle.push((entering, 1.0));
    for (arc, is_row) in up_col {
        cycle.push((arc, if is_row { 1.0 } else { -1.0 }));
    }
    for (arc, is_row) in up_row {
        cycle.push((arc, if is_row { -1.0 } else { 1.0 }));
    }

    let mut theta = f64::INFINITY;
    let mut leaving = entering;
    for &(arc, sign) in &cycle {
        if sign < 0.0 {
            let available = flow[arc];
            let better = if bland {
                available < theta || (available == theta && arc < leaving)
            } else {
                available < theta
            };
            if better {
                theta = available;
                leaving = arc;
            }
        }
    }
    if !theta.is_finite() {
        // No decreasing arc: only possible if the entering arc already
        // closes a cycle of increasing arcs, which a spanning-tree basis
        // rules out.
        theta = 0.0;
    }

    for &(arc, sign) in &cycle {
        flow[arc] = (flow[arc] + sign * theta).max(0.0);
    }
    flow[leaving] = 0.0;

    is_basic[entering] = true;
    tree.add_arc(entering, nt);
    if leaving != entering {
        is_basic[leaving] = false;
        tree.remove_arc(leaving, nt);
    } else {
        // theta unbounded cannot happen; keep basis consistent.
        is_basic[entering] = false;
        tree.remove_arc(entering, nt);
    }
    tree.refresh(cost, nt);
    theta
}

fn finish(
    flow: Vec<f64>,
    cost: &[f64],
    supply: &[f64],
    demand: &[f64],
    ns: usize,
    nt: usize,
) -> Solution {
    let mut total = 0.0;
    let mut flows = Vec::new();
    for i in 0..ns {
        for j in 0..nt {
            let f = flow[i * nt + j];
            if f > 1e-16 {
                total += f * cost[i * nt + j];
                flows.push(Flow {
                    source: i,
                    target: j,
                    amount: f,
                });
            }
        }
    }
    debug_assert!({
        let mut row = vec![0.0; ns];
        let mut col = vec![0.0; nt];
        for f in &flows {
            row[f.source] += f.amount;
            col[f.target] += f.amount;
        }
        row.iter().zip(supply).all(|(r, s)| (r - s).abs() <= 1e-9 * s.max(1.0))
            && col.iter().zip(demand).all(|(c, d)| (c - d).abs() <= 1e-9 * d.max(1.0))
    });
    Solution { cost: total, flows }
}
