//! Spectral normalized-cut bisection.
//!
//! The Fiedler vector of the symmetric normalized Laplacian is computed with a
//! fully reorthogonalized Lanczos iteration on `D^-1/2 W D^-1/2` restricted to
//! the complement of its known top eigenvector `D^1/2 1`. Nodes are then sorted
//! by `D^-1/2 u` and the prefix split minimizing
//! `cut(A, B) (1/vol(A) + 1/vol(B))` is returned, subject to a balance floor.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::scene::{CameraGraph, CameraId};

const EIGEN_TOL: f64 = 1e-8;
const EIGEN_MAX_ITERS: usize = 500;
const BALANCE_FLOOR: f64 = 0.2;

/// Induced subgraph with local indices.
pub(crate) struct Subgraph {
    pub nodes: Vec<CameraId>,
    pub adjacency: Vec<Vec<(usize, f64)>>,
}

impl Subgraph {
    pub fn induced(graph: &CameraGraph, cameras: &[CameraId]) -> Self {
        let mut nodes = cameras.to_vec();
        nodes.sort_unstable();
        nodes.dedup();
        let adjacency = nodes
            .iter()
            .map(|&v| {
                graph
                    .neighbors(v)
                    .iter()
                    .filter_map(|&(n, w)| nodes.binary_search(&n).ok().map(|idx| (idx, w as f64)))
                    .collect()
            })
            .collect();
        Self { nodes, adjacency }
    }

    fn degrees(&self) -> Vec<f64> {
        self.adjacency
            .iter()
            .map(|list| list.iter().map(|&(_, w)| w).sum())
            .collect()
    }

    /// Component label per local node; labels ordered by smallest member.
    fn components(&self) -> (Vec<usize>, usize) {
        let n = self.nodes.len();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for &(u, _) in &self.adjacency[v] {
                    if label[u] == usize::MAX {
                        label[u] = count;
                        stack.push(u);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }
}

/// Normalized-cut objective of a bipartition given by `in_a`.
pub fn normalized_cut_value(graph: &CameraGraph, part_a: &[CameraId], part_b: &[CameraId]) -> f64 {
    let mut all = part_a.to_vec();
    all.extend_from_slice(part_b);
    let sub = Subgraph::induced(graph, &all);
    let in_a: Vec<bool> = sub.nodes.iter().map(|v| part_a.contains(v)).collect();
    ncut_of(&sub, &in_a)
}

fn ncut_of(sub: &Subgraph, in_a: &[bool]) -> f64 {
    let mut cut = 0.0;
    let mut vol_a = 0.0;
    let mut vol_b = 0.0;
    for (v, list) in sub.adjacency.iter().enumerate() {
        for &(u, w) in list {
            if in_a[v] {
                vol_a += w;
            } else {
                vol_b += w;
            }
            if in_a[v] && !in_a[u] {
                cut += w;
            }
        }
    }
    ncut_from(cut, vol_a, vol_b)
}

fn ncut_from(cut: f64, vol_a: f64, vol_b: f64) -> f64 {
    if cut == 0.0 {
        return 0.0;
    }
    let inv = |v: f64| if v > 0.0 { 1.0 / v } else { f64::INFINITY };
    cut * (inv(vol_a) + inv(vol_b))
}

/// Splits `cameras` into two non-empty disjoint parts. The part containing the
/// smallest camera id is returned first; both parts are sorted.
pub fn bisect_normalized_cut(graph: &CameraGraph, cameras: &[CameraId]) -> (Vec<CameraId>, Vec<CameraId>) {
    let sub = Subgraph::induced(graph, cameras);
    let in_a = bisect_local(&sub);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (idx, &v) in sub.nodes.iter().enumerate() {
        if in_a[idx] {
            a.push(v);
        } else {
            b.push(v);
        }
    }
    if b.first() < a.first() {
        std::mem::swap(&mut a, &mut b);
    }
    (a, b)
}

fn bisect_local(sub: &Subgraph) -> Vec<bool> {
    let n = sub.nodes.len();
    assert!(n >= 2, "bisection needs at least two nodes");
    if n == 2 {
        return vec![true, false];
    }
    let (label, count) = sub.components();
    if count > 1 {
        return split_components(&label, count);
    }
    let deg = sub.degrees();
    let fiedler = fiedler_vector(sub, &deg);
    let score: Vec<f64> = fiedler
        .iter()
        .zip(&deg)
        .map(|(u, d)| u / d.sqrt())
        .collect();
    sweep(sub, &deg, &score)
}

/// Greedy assignment of whole components, largest first, to the lighter side.
fn split_components(label: &[usize], count: usize) -> Vec<bool> {
    let mut sizes = vec![0usize; count];
    for &l in label {
        sizes[l] += 1;
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&x, &y| sizes[y].cmp(&sizes[x]).then(x.cmp(&y)));
    let mut side = vec![false; count];
    let (mut size_a, mut size_b) = (0, 0);
    for c in order {
        if size_a <= size_b {
            side[c] = true;
            size_a += sizes[c];
        } else {
            size_b += sizes[c];
        }
    }
    label.iter().map(|&l| side[l]).collect()
}

fn sweep(sub: &Subgraph, deg: &[f64], score: &[f64]) -> Vec<bool> {
    let n = sub.nodes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| score[x].total_cmp(&score[y]).then(x.cmp(&y)));
    let total_vol: f64 = deg.iter().sum();
    let min_side = ((BALANCE_FLOOR * n as f64).ceil() as usize).max(1);

    let mut in_a = vec![false; n];
    let mut cut = 0.0;
    let mut vol_a = 0.0;
    // (objective, balance, prefix length, sorted member list of A)
    let mut best: Option<(f64, usize, usize, Vec<usize>)> = None;
    for (k, &v) in order.iter().enumerate().take(n - 1) {
        let to_a: f64 = sub.adjacency[v]
            .iter()
            .filter(|&&(u, _)| in_a[u])
            .map(|&(_, w)| w)
            .sum();
        cut += deg[v] - 2.0 * to_a;
        vol_a += deg[v];
        in_a[v] = true;
        let size_a = k + 1;
        if size_a < min_side || n - size_a < min_side {
            continue;
        }
        let value = ncut_from(cut.max(0.0), vol_a, total_vol - vol_a);
        let balance = size_a.min(n - size_a);
        let better = match &best {
            None => true,
            Some((bv, bb, _, bset)) => {
                let tol = 1e-12 * bv.abs().max(1e-300);
                if value < bv - tol {
                    true
                } else if value <= bv + tol {
                    if balance != *bb {
                        balance > *bb
                    } else {
                        canonical_side(&order[..size_a], n) < *bset
                    }
                } else {
                    false
                }
            }
        };
        if better {
            best = Some((value, balance, size_a, canonical_side(&order[..size_a], n)));
        }
    }
    let (_, _, len, _) = best.expect("at least one admissible prefix");
    let mut result = vec![false; n];
    for &v in &order[..len] {
        result[v] = true;
    }
    result
}

/// Sorted member list of whichever side contains local node 0.
fn canonical_side(prefix: &[usize], n: usize) -> Vec<usize> {
    let mut members = prefix.to_vec();
    members.sort_unstable();
    if members.first() == Some(&0) {
        members
    } else {
        let mut mark = vec![false; n];
        for &v in prefix {
            mark[v] = true;
        }
        (0..n).filter(|&v| !mark[v]).collect()
    }
}

/// Second eigenvector of the normalized Laplacian of a connected graph.
fn fiedler_vector(sub: &Subgraph, deg: &[f64]) -> Vec<f64> {
    let n = sub.nodes.len();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut top: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
    normalize(&mut top);

    let apply = |x: &[f64], out: &mut [f64]| {
        for (v, list) in sub.adjacency.iter().enumerate() {
            let mut acc = 0.0;
            for &(u, w) in list {
                acc += w * inv_sqrt[u] * x[u];
            }
            out[v] = acc * inv_sqrt[v];
        }
    };

    // deterministic start vector
    let mut q: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_894_9).fract())
        .collect();
    orthogonalize(&mut q, &top);
    if normalize(&mut q) == 0.0 {
        q = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        orthogonalize(&mut q, &top);
        normalize(&mut q);
    }

    let max_steps = EIGEN_MAX_ITERS.min(n - 1);
    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut ritz: Option<Vec<f64>> = None;

    for k in 0..max_steps {
        apply(&basis[k], &mut w);
        let a = dot(&basis[k], &w);
        alpha.push(a);
        // full reorthogonalization, twice for stability
        for _ in 0..2 {
            orthogonalize(&mut w, &top);
            for b in &basis {
                orthogonalize(&mut w, b);
            }
        }
        let b = norm(&w);
        let steps = k + 1;
        let last = steps == max_steps || b < 1e-12;
        if last || steps % 10 == 0 || steps < 10 {
            let (theta_vec, residual) = largest_ritz(&alpha, &beta, b);
            ritz = Some(theta_vec);
            if residual < EIGEN_TOL || last {
                break;
            }
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    let s = ritz.expect("at least one Lanczos step");
    let mut u = vec![0.0; n];
    for (coef, b) in s.iter().zip(&basis) {
        for (ui, bi) in u.iter_mut().zip(b) {
            *ui += coef * bi;
        }
    }
    u
}

/// Eigenvector of the largest eigenvalue of the Lanczos tridiagonal matrix and
/// its residual estimate `|beta_k s_k|`.
fn largest_ritz(alpha: &[f64], beta: &[f64], next_beta: f64) -> (Vec<f64>, f64) {
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut best = 0;
    for i in 1..m {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let s: Vec<f64> = eig.eigenvectors.column(best).iter().copied().collect();
    let residual = (next_beta * s[m - 1]).abs();
    (s, residual)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &mut [f64]) -> f64 {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(x: &mut [f64], against: &[f64]) {
    let p = dot(x, against);
    for (xi, ai) in x.iter_mut().zip(against) {
        *xi -= p * ai;
    }
}
