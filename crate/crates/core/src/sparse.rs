//! Symmetric sparse matrices and an envelope Cholesky factorization.
//!
//! The FEM systems in this crate are symmetric positive definite after
//! grounding and come from quasi-uniform 2D meshes, so a profile (skyline)
//! factorization after reverse Cuthill-McKee reordering keeps fill bounded by
//! the bandwidth of roughly one mesh ring.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Collects symmetric contributions. Entries above the diagonal are dropped,
/// so callers add a full symmetric element matrix and only its lower half is kept.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        if row >= col {
            self.entries.push((row, col, value));
        }
    }

    pub fn build(mut self) -> SymmetricCsr {
        self.entries
            .sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &self.entries {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SymmetricCsr {
            n: self.n,
            row_ptr,
            cols,
            vals,
        }
    }
}

/// Lower triangle of a symmetric matrix in compressed-row form, columns sorted.
#[derive(Debug, Clone)]
pub struct SymmetricCsr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SymmetricCsr {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_lower(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.row(i)
            .find(|&(c, _)| c == i)
            .map(|(_, v)| v)
            .unwrap_or(0.0)
    }

    /// `y = A x` using both triangles.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                y[i] += v * x[j];
                if j != i {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (j, _) in self.row(i) {
                if j != i {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        adj
    }
}

/// Reverse Cuthill-McKee ordering. Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        let start = pseudo_peripheral(adj, &degree, seed);

        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_unstable_by_key(|&w| (degree[w], w));
            next.dedup();
            for w in next {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> Vec<usize> {
    let mut level = vec![usize::MAX; adj.len()];
    level[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if level[w] == usize::MAX {
                level[w] = level[v] + 1;
                queue.push_back(w);
            }
        }
    }
    level
}

fn pseudo_peripheral(adj: &[Vec<usize>], degree: &[usize], seed: usize) -> usize {
    let mut current = seed;
    let mut eccentricity = 0;
    for _ in 0..8 {
        let level = bfs_levels(adj, current);
        let depth = level
            .iter()
            .copied()
            .filter(|&l| l != usize::MAX)
            .max()
            .unwrap_or(0);
        if depth <= eccentricity && current != seed {
            break;
        }
        eccentricity = depth;
        let candidate = (0..adj.len())
            .filter(|&i| level[i] == depth)
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        if candidate == current {
            break;
        }
        current = candidate;
    }
    current
}

/// `A = L L^T` with `L` stored row-wise over each row's envelope.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    perm: Vec<usize>,
    first: Vec<usize>,
    row_start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &SymmetricCsr) -> Result<Self> {
        let n = a.dim();
        let perm = reverse_cuthill_mckee(&a.adjacency());
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for i in 0..n {
            for (j, _) in a.row(i) {
                let (r, c) = order_pair(iperm[i], iperm[j]);
                first[r] = first[r].min(c);
            }
        }
        let mut row_start = vec![0usize; n + 1];
        for i in 0..n {
            row_start[i + 1] = row_start[i] + (i - first[i] + 1);
        }
        let mut data = vec![0.0; row_start[n]];
        for i in 0..n {
            for (j, v) in a.row(i) {
                let (r, c) = order_pair(iperm[i], iperm[j]);
                data[row_start[r] + c - first[r]] += v;
            }
        }

        for i in 0..n {
            let fi = first[i];
            let base_i = row_start[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let base_j = row_start[j];
                let len = j - k0;
                let li = &data[base_i + k0 - fi..base_i + k0 - fi + len];
                let lj = &data[base_j + k0 - fj..base_j + k0 - fj + len];
                let dot: f64 = li.iter().zip(lj).map(|(x, y)| x * y).sum();
                let diag_j = data[base_j + j - fj];
                data[base_i + j - fi] = (data[base_i + j - fi] - dot) / diag_j;
            }
            let row = &data[base_i..base_i + i - fi];
            let sq: f64 = row.iter().map(|x| x * x).sum();
            let original = data[base_i + i - fi];
            let pivot = original - sq;
            if !(pivot > 1e-13 * original.abs()) || !pivot.is_finite() {
                return Err(Error::Singular(format!(
                    "non-positive pivot {pivot:e} at row {} of {n}",
                    perm[i]
                )));
            }
            data[base_i + i - fi] = pivot.sqrt();
        }

        Ok(Self {
            n,
            perm,
            first,
            row_start,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "right-hand side length");
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..self.n {
            let fi = self.first[i];
            let base = self.row_start[i];
            let row = &self.data[base..base + i - fi];
            let dot: f64 = row.iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] = (y[i] - dot) / self.data[base + i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let base = self.row_start[i];
            y[i] /= self.data[base + i - fi];
            let yi = y[i];
            for (k, l) in (fi..i).zip(&self.data[base..base + i - fi]) {
                y[k] -= l * yi;
            }
        }
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

fn order_pair(a: usize, b: usize) -> (usize, usize) {
    if a >= b {
        (a, b)
    } else {
        (b, a)
    }
}
