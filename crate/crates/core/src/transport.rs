//! Wasserstein-1 distance between uniformly weighted point clouds.
//!
//! Equal-size clouds reduce to an assignment problem and are solved with the
//! Hungarian method. Unequal sizes are solved exactly as a transportation
//! problem: scaling the marginals `1/n` and `1/m` by `n * m` makes every
//! supply `m` and every demand `n`, an integral problem solved with the
//! transportation simplex (successive shortest paths as a fallback). Large
//! clouds may instead use entropic regularization ([`sinkhorn`]).

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// Points with uniform mass, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return arg_err("empty point cloud");
        };
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return arg_err(format!("point {i} has dimension {}, expected {dim}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Every point shifted by `v`.
    pub fn translated(&self, v: &[f64]) -> Self {
        let mut out = self.clone();
        for p in out.data.chunks_exact_mut(self.dim) {
            p.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        out
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Vec<Vec<f64>> {
    a.points()
        .map(|p| b.points().map(|q| euclidean(p, q)).collect())
        .collect()
}

fn check_pair(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return arg_err("wasserstein distance of an empty cloud");
    }
    if a.dim() != b.dim() {
        return arg_err(format!("dimension mismatch: {} vs {}", a.dim(), b.dim()));
    }
    Ok(())
}

/// Exact W1 with Euclidean ground cost and uniform marginals.
pub fn wasserstein(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_pair(a, b)?;
    let cost = cost_matrix(a, b);
    let (n, m) = (a.len(), b.len());
    let total = if n == m {
        assignment(&cost).1 / n as f64
    } else {
        transportation(&cost).1 / (n * m) as f64
    };
    Ok(total.max(0.0))
}

/// Hungarian method (shortest augmenting paths with potentials) on a square
/// cost matrix. Returns the column assigned to each row and the total cost.
pub fn assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    // 1-based indexing; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    let total = col_of.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (col_of, total)
}

/// Exact transportation problem for an `n x m` cost matrix with every row
/// supplying `m` units and every column demanding `n` units. Returns the
/// integral flow and its total cost.
pub fn transportation(cost: &[Vec<f64>]) -> (Vec<Vec<u64>>, f64) {
    transportation_simplex(cost).unwrap_or_else(|| transportation_ssp(cost))
}

/// Transportation simplex from a northwest-corner basis with block-search
/// pricing. Gives up (`None`) after a generous pivot cap, which only
/// degenerate cycling could reach.
fn transportation_simplex(cost: &[Vec<f64>]) -> Option<(Vec<Vec<u64>>, f64)> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Some((vec![vec![0; m]; n], 0.0));
    }
    let mut flow = vec![vec![0u64; m]; n];
    // Basic cells; nodes are rows 0..n and columns n..n+m.
    let mut cells: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0, 0);
    let (mut supply, mut demand) = (m as u64, n as u64);
    loop {
        let x = supply.min(demand);
        flow[i][j] = x;
        cells.push((i, j));
        supply -= x;
        demand -= x;
        if i + 1 == n && j + 1 == m {
            break;
        }
        // On a tie move down only, so the next cell is a zero-flow basic cell.
        if supply == 0 && i + 1 < n {
            i += 1;
            supply = m as u64;
        } else {
            j += 1;
            demand = n as u64;
        }
    }

    let scale = cost.iter().flatten().fold(1.0f64, |a, &c| a.max(c.abs()));
    let tol = 1e-12 * scale;
    let total_cells = n * m;
    let block = ((total_cells as f64).sqrt() as usize).max(16);
    let mut cursor = 0;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n + m];
    let mut parent = vec![usize::MAX; n + m];
    let mut queue = Vec::with_capacity(n + m);
    let max_pivots = 100 * (n + m) + 10_000;

    for _ in 0..max_pivots {
        adj.iter_mut().for_each(Vec::clear);
        for (k, &(r, c)) in cells.iter().enumerate() {
            adj[r].push(k);
            adj[n + c].push(k);
        }
        // Potentials with u_0 = 0 over the basis tree.
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        queue.clear();
        queue.push(0);
        parent[0] = cells.len();
        u[0] = 0.0;
        let mut head = 0;
        while head < queue.len() {
            let x = queue[head];
            head += 1;
            for &k in &adj[x] {
                let (r, c) = cells[k];
                let y = if x < n { n + c } else { r };
                if parent[y] == usize::MAX {
                    parent[y] = k;
                    if y >= n {
                        v[c] = cost[r][c] - u[r];
                    } else {
                        u[r] = cost[r][c] - v[c];
                    }
                    queue.push(y);
                }
            }
        }

        let mut best = (-tol, usize::MAX);
        for step in 0..total_cells {
            let idx = (cursor + step) % total_cells;
            let (r, c) = (idx / m, idx % m);
            let rc = cost[r][c] - u[r] - v[c];
            if rc < best.0 {
                best = (rc, idx);
            }
            if (step + 1) % block == 0 && best.1 != usize::MAX {
                cursor = (idx + 1) % total_cells;
                break;
            }
        }
        if best.1 == usize::MAX {
            let total = flow
                .iter()
                .zip(cost)
                .flat_map(|(f, c)| f.iter().zip(c).map(|(&f, &c)| f as f64 * c))
                .sum();
            return Some((flow, total));
        }
        let (er, ec) = (best.1 / m, best.1 % m);

        // Tree path from row `er` to column `ec`.
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        queue.clear();
        queue.push(er);
        parent[er] = cells.len();
        let mut head = 0;
        while head < queue.len() && parent[n + ec] == usize::MAX {
            let x = queue[head];
            head += 1;
            for &k in &adj[x] {
                let (r, c) = cells[k];
                let y = if x < n { n + c } else { r };
                if parent[y] == usize::MAX {
                    parent[y] = k;
                    queue.push(y);
                }
            }
        }
        // Walking back from the column, path cells alternate -, +, -, ...
        let mut path = Vec::new();
        let mut y = n + ec;
        while y != er {
            let k = parent[y];
            path.push(k);
            let (r, c) = cells[k];
            y = if y >= n { r } else { n + c };
        }
        let mut leave = path[0];
        for &k in path.iter().step_by(2) {
            let (r, c) = cells[k];
            let (lr, lc) = cells[leave];
            if flow[r][c] < flow[lr][lc] {
                leave = k;
            }
        }
        let theta = {
            let (r, c) = cells[leave];
            flow[r][c]
        };
        for (t, &k) in path.iter().enumerate() {
            let (r, c) = cells[k];
            if t % 2 == 0 {
                flow[r][c] -= theta;
            } else {
                flow[r][c] += theta;
            }
        }
        flow[er][ec] += theta;
        cells[leave] = (er, ec);
    }
    None
}

/// Successive shortest paths with bottleneck augmentation.
fn transportation_ssp(cost: &[Vec<f64>]) -> (Vec<Vec<u64>>, f64) {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    let mut flow = vec![vec![0u64; m]; n];
    let mut supply = vec![m as u64; n];
    let mut demand = vec![n as u64; m];
    let mut remaining = (n * m) as u64;

    // Node layout: 0 = source, 1..=n rows, n+1..=n+m columns, n+m+1 = sink.
    let nodes = n + m + 2;
    let (src, sink) = (0, n + m + 1);
    let row = |i: usize| 1 + i;
    let col = |j: usize| 1 + n + j;
    let mut pot = vec![0.0f64; nodes];

    while remaining > 0 {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        dist[src] = 0.0;
        loop {
            // Dense Dijkstra; ties to the lowest node index.
            let mut x = usize::MAX;
            for k in 0..nodes {
                if !done[k] && dist[k].is_finite() && (x == usize::MAX || dist[k] < dist[x]) {
                    x = k;
                }
            }
            if x == usize::MAX || x == sink {
                break;
            }
            done[x] = true;
            let relax = |y: usize, c: f64, dist: &mut Vec<f64>, prev: &mut Vec<usize>| {
                let rc = (c + pot[x] - pot[y]).max(0.0);
                if dist[x] + rc < dist[y] {
                    dist[y] = dist[x] + rc;
                    prev[y] = x;
                }
            };
            if x == src {
                for i in 0..n {
                    if supply[i] > 0 {
                        relax(row(i), 0.0, &mut dist, &mut prev);
                    }
                }
            } else if x <= n {
                let i = x - 1;
                for j in 0..m {
                    relax(col(j), cost[i][j], &mut dist, &mut prev);
                }
            } else {
                let j = x - 1 - n;
                if demand[j] > 0 {
                    relax(sink, 0.0, &mut dist, &mut prev);
                }
                for i in 0..n {
                    if flow[i][j] > 0 {
                        relax(row(i), -cost[i][j], &mut dist, &mut prev);
                    }
                }
            }
        }
        debug_assert!(dist[sink].is_finite());
        let cap = dist[sink];
        for k in 0..nodes {
            pot[k] += dist[k].min(cap);
        }

        // Bottleneck along the path sink <- col <- row <- ... <- source.
        let mut bottleneck = u64::MAX;
        let mut y = sink;
        while y != src {
            let x = prev[y];
            if x == src {
                bottleneck = bottleneck.min(supply[y - 1]);
            } else if y == sink {
                bottleneck = bottleneck.min(demand[x - 1 - n]);
            } else if x > n {
                // backward edge col -> row
                bottleneck = bottleneck.min(flow[y - 1][x - 1 - n]);
            }
            y = x;
        }
        let mut y = sink;
        while y != src {
            let x = prev[y];
            if x == src {
                supply[y - 1] -= bottleneck;
            } else if y == sink {
                demand[x - 1 - n] -= bottleneck;
            } else if x > n {
                flow[y - 1][x - 1 - n] -= bottleneck;
            } else {
                flow[x - 1][y - 1 - n] += bottleneck;
            }
            y = x;
        }
        remaining -= bottleneck;
    }
    let total = flow
        .iter()
        .zip(cost)
        .flat_map(|(f, c)| f.iter().zip(c).map(|(&f, &c)| f as f64 * c))
        .sum();
    (flow, total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornResult {
    /// Transport cost `<P, C>` of the entropic plan.
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Log-domain Sinkhorn iterations for entropic OT with uniform marginals.
/// Converged when the row-marginal L1 error drops below `1e-9`.
pub fn sinkhorn(
    a: &PointCloud,
    b: &PointCloud,
    epsilon: f64,
    max_iters: usize,
) -> Result<SinkhornResult> {
    check_pair(a, b)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return arg_err(format!("sinkhorn epsilon must be positive, got {epsilon}"));
    }
    let cost = cost_matrix(a, b);
    let (n, m) = (a.len(), b.len());
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let lse = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = vals.collect();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    };

    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            f[i] = -epsilon * lse(&mut (0..m).map(|j| (g[j] - cost[i][j]) / epsilon + log_b));
        }
        for j in 0..m {
            g[j] = -epsilon * lse(&mut (0..n).map(|i| (f[i] - cost[i][j]) / epsilon + log_a));
        }
        // Columns are exact after the g-update; check rows.
        let err: f64 = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] - cost[i][j]) / epsilon + log_a + log_b).exp())
                    .sum();
                (row - 1.0 / n as f64).abs()
            })
            .sum();
        if err < 1e-9 {
            converged = true;
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = ((f[i] + g[j] - cost[i][j]) / epsilon + log_a + log_b).exp();
            total += p * cost[i][j];
        }
    }
    Ok(SinkhornResult {
        cost: total,
        converged,
        iterations,
    })
}

/// Chooses between the exact solver and Sinkhorn by cloud size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    /// Clouds with more points than this (on either side) use Sinkhorn.
    pub sinkhorn_threshold: usize,
    /// Entropic regularization as a fraction of the median ground cost.
    pub epsilon_scale: f64,
    pub max_iters: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            sinkhorn_threshold: 512,
            epsilon_scale: 0.01,
            max_iters: 5000,
        }
    }
}

impl TransportConfig {
    pub fn distance(&self, a: &PointCloud, b: &PointCloud) -> Result<f64> {
        if a.len().max(b.len()) <= self.sinkhorn_threshold {
            return wasserstein(a, b);
        }
        check_pair(a, b)?;
        let mut costs: Vec<f64> = cost_matrix(a, b).into_iter().flatten().collect();
        costs.sort_by(f64::total_cmp);
        let median = costs[costs.len() / 2];
        if median == 0.0 {
            return wasserstein(a, b);
        }
        Ok(sinkhorn(a, b, self.epsilon_scale * median, self.max_iters)?.cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(rows: &[&[f64]]) -> PointCloud {
        PointCloud::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_clouds_have_zero_distance() {
        let a = cloud(&[&[0.0, 1.0], &[2.0, 3.0], &[5.0, -1.0]]);
        assert_eq!(wasserstein(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn singletons_give_euclidean_distance() {
        let a = cloud(&[&[0.0, 0.0]]);
        let b = cloud(&[&[3.0, 4.0]]);
        assert!((wasserstein(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn one_to_many() {
        let a = cloud(&[&[0.0]]);
        let b = cloud(&[&[1.0], &[3.0]]);
        assert!((wasserstein(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        // Two points against three: 1/3 of mass at 0 must move to 10.
        let a = cloud(&[&[0.0], &[10.0]]);
        let b = cloud(&[&[0.0], &[0.0], &[10.0]]);
        assert!((wasserstein(&a, &b).unwrap() - 10.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = cloud(&[&[0.0, 0.0]]);
        let b = cloud(&[&[0.0]]);
        assert!(wasserstein(&a, &b).is_err());
        assert!(PointCloud::from_rows::<Vec<f64>>(&[]).is_err());
        assert!(sinkhorn(&a, &a, 0.0, 10).is_err());
    }

    #[test]
    fn simplex_agrees_with_shortest_paths() {
        let mut x = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 10_000) as f64 / 1000.0
        };
        for (n, m) in [(1, 7), (7, 1), (2, 3), (9, 4), (30, 7), (17, 40), (60, 25), (12, 12)] {
            for rep in 0..5 {
                // Integer costs on some repetitions to force degenerate ties.
                let cost: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..m).map(|_| if rep % 2 == 0 { next() } else { next().floor() }).collect())
                    .collect();
                let (flow, total) = transportation_simplex(&cost).unwrap();
                let (_, want) = transportation_ssp(&cost);
                assert!((total - want).abs() <= 1e-9 * want.max(1.0), "{n}x{m}: {total} vs {want}");
                for (r, row) in flow.iter().enumerate() {
                    assert_eq!(row.iter().sum::<u64>(), m as u64, "row {r}");
                }
                for c in 0..m {
                    assert_eq!(flow.iter().map(|row| row[c]).sum::<u64>(), n as u64, "col {c}");
                }
            }
        }
    }

    #[test]
    fn assignment_small() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let (cols, total) = assignment(&cost);
        assert_eq!(total, 5.0);
        assert_eq!(cols, vec![1, 0, 2]);
    }
}
