//! Undirected communication graphs and the algebraic objects built on them:
//! incidence matrix, Laplacian, algebraic connectivity and the centering
//! projector used to measure consensus error.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({i}, {j}) references a node outside 0..{n}")]
    OutOfRange { i: usize, j: usize, n: usize },
    #[error("dimension mismatch: expected {expected} rows, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Off-diagonal mass below which the Jacobi sweep is considered converged.
const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Undirected simple graph on nodes `0..n`.
///
/// Edges are stored once, as `(min, max)` pairs in insertion order. That order
/// defines the column order of the incidence matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Build a graph from 0-based edge pairs. Duplicate edges (in either
    /// orientation) are merged.
    pub fn new(n: usize, edge_list: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut edges = Vec::with_capacity(edge_list.len());
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edge_list {
            if i >= n || j >= n {
                return Err(GraphError::OutOfRange { i, j, n });
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            let e = (i.min(j), i.max(j));
            if edges.contains(&e) {
                continue;
            }
            edges.push(e);
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        Ok(Self { n, edges, neighbors })
    }

    /// Build a graph from 1-based labels, as used in scenario files.
    pub fn from_one_based(n: usize, edge_list: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut zero_based = Vec::with_capacity(edge_list.len());
        for &(i, j) in edge_list {
            if i == 0 || j == 0 {
                return Err(GraphError::OutOfRange { i, j, n });
            }
            zero_based.push((i - 1, j - 1));
        }
        Self::new(n, &zero_based)
    }

    /// Path graph `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Union-find connectivity test.
    pub fn is_connected(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = self.n;
        for &(i, j) in &self.edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
                components -= 1;
            }
        }
        let connected = components == 1;
        debug_assert_eq!(
            connected,
            self.n == 1 || lambda2(&self.laplacian()) > 1e-9,
            "union-find and spectral connectivity disagree"
        );
        connected
    }

    /// Incidence matrix with edge `(i, j)`, `i < j`, oriented so that
    /// `d[i] = -1` and `d[j] = +1`.
    pub fn incidence(&self) -> IncidenceMatrix {
        let mut d = DMatrix::<i32>::zeros(self.n, self.edges.len());
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            d[(i, k)] = -1;
            d[(j, k)] = 1;
        }
        IncidenceMatrix(d)
    }

    pub fn laplacian(&self) -> Laplacian {
        let mut l = DMatrix::<i32>::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            l[(i, j)] -= 1;
            l[(j, i)] -= 1;
            l[(i, i)] += 1;
            l[(j, j)] += 1;
        }
        Laplacian(l)
    }
}

/// Graph description as it appears in scenario files: 1-based node labels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

impl GraphSpec {
    pub fn build(&self) -> Result<Graph, GraphError> {
        let pairs: Vec<_> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::from_one_based(self.n, &pairs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceMatrix(pub DMatrix<i32>);

impl IncidenceMatrix {
    /// `D * D^T`, computed in integer arithmetic.
    pub fn gram(&self) -> DMatrix<i32> {
        &self.0 * self.0.transpose()
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.0.map(f64::from)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Laplacian(pub DMatrix<i32>);

impl Laplacian {
    pub fn to_f64(&self) -> DMatrix<f64> {
        self.0.map(f64::from)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        symmetric_eigenvalues(&self.to_f64())
    }
}

/// Eigenvalues of a symmetric matrix in ascending order, by cyclic Jacobi
/// rotations.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut a = a.clone();
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    eig
}

/// Algebraic connectivity: the second-smallest Laplacian eigenvalue.
/// Returns 0 for a single node.
pub fn lambda2(l: &Laplacian) -> f64 {
    let eig = l.eigenvalues();
    eig.get(1).copied().unwrap_or(0.0).max(0.0)
}

/// Centering projector `I - (1/N) 1 1^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector(pub DMatrix<f64>);

pub fn projector(n: usize) -> Projector {
    assert!(n >= 1, "projector needs n >= 1");
    let inv = 1.0 / n as f64;
    Projector(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0 - inv
        } else {
            -inv
        }
    }))
}

impl Projector {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.0 * x
    }
}

/// Consensus error `Pi * X` for stacked states with one row per agent and one
/// column per spatial dimension, and its Frobenius norm.
pub fn consensus_error(
    p: &Projector,
    stacked: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64), GraphError> {
    if stacked.nrows() != p.n() {
        return Err(GraphError::DimensionMismatch {
            expected: p.n(),
            got: stacked.nrows(),
        });
    }
    let e = &p.0 * stacked;
    let norm = e.norm();
    Ok((e, norm))
}
