//! Neighbourhood graph of macro-areas.
//!
//! Nodes are macro-areas indexed `0..n`; edges are undirected contiguity
//! relations. The graph carries its binary proximity matrix `W`, degrees,
//! Laplacian `R = D - W` and connected-component labels. Spectral work is
//! done per component on dense blocks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};

/// Relative threshold below which a Laplacian eigenvalue counts as zero.
pub const NULL_EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct AreaGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbours: Vec<Vec<usize>>,
    components: Vec<usize>,
    n_components: usize,
}

impl AreaGraph {
    /// Builds a graph from an edge list. Duplicate edges (in either
    /// orientation) are collapsed; self-loops and out-of-range indices are
    /// rejected with the offending edge.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::EdgeOutOfRange(a, b, n));
            }
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut neighbours = vec![Vec::new(); n];
        for &(a, b) in &edges {
            neighbours[a].push(b);
            neighbours[b].push(a);
        }
        for list in &mut neighbours {
            list.sort_unstable();
        }
        let (components, n_components) = label_components(&neighbours);
        Ok(Self {
            n,
            edges,
            neighbours,
            components,
            n_components,
        })
    }

    /// Rook-contiguity lattice with `rows × cols` cells, numbered row-major.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::new(rows * cols, &edges).expect("lattice edges are valid")
    }

    /// Path graph `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges).expect("path edges are valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbours[i].len()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.neighbours.iter().map(|l| l.len() as f64).collect()
    }

    /// Component label of every node. Labels are assigned in order of the
    /// lowest node index of each component.
    pub fn components(&self) -> &[usize] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    /// Node indices of component `c`, ascending.
    pub fn component_nodes(&self, c: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.components[i] == c).collect()
    }

    pub fn component_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_components];
        for &c in &self.components {
            sizes[c] += 1;
        }
        sizes
    }

    /// Components whose block is a single isolated node.
    pub fn singleton_components(&self) -> Vec<usize> {
        self.component_sizes()
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 1)
            .map(|(c, _)| c)
            .collect()
    }

    /// Binary proximity matrix `W`.
    pub fn proximity(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for &(a, b) in &self.edges {
            w[(a, b)] = 1.0;
            w[(b, a)] = 1.0;
        }
        w
    }

    pub fn degree_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.degrees()))
    }

    /// Graph Laplacian `R = D - W`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(self.n, self.n);
        for &(a, b) in &self.edges {
            r[(a, b)] -= 1.0;
            r[(b, a)] -= 1.0;
            r[(a, a)] += 1.0;
            r[(b, b)] += 1.0;
        }
        r
    }

    /// Laplacian block restricted to the nodes of component `c`.
    pub fn component_laplacian(&self, c: usize) -> DMatrix<f64> {
        let nodes = self.component_nodes(c);
        let full = self.laplacian();
        DMatrix::from_fn(nodes.len(), nodes.len(), |a, b| full[(nodes[a], nodes[b])])
    }

    /// `x' R x` evaluated as the sum of squared differences over edges.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.edges
            .iter()
            .map(|&(a, b)| (x[a] - x[b]).powi(2))
            .sum()
    }
}

fn label_components(neighbours: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let n = neighbours.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbours[i] {
                if label[j] == usize::MAX {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    (label, next)
}

/// Eigendecomposition of one component's Laplacian block.
#[derive(Debug, Clone)]
pub struct ComponentSpectrum {
    /// Graph node indices, ascending; row `a` of `vectors` refers to `nodes[a]`.
    pub nodes: Vec<usize>,
    /// Eigenvalues in decreasing order; the last one is the null eigenvalue (exactly 0).
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, aligned with `values`.
    pub vectors: DMatrix<f64>,
}

impl ComponentSpectrum {
    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    /// Number of non-null eigenvectors (`size - 1`).
    pub fn n_nonnull(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Eigenvector `l` embedded into the full `n`-dimensional node space.
    pub fn embedded(&self, l: usize, n: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        for (a, &node) in self.nodes.iter().enumerate() {
            v[node] = self.vectors[(a, l)];
        }
        v
    }
}

/// Per-component spectra of the graph Laplacian.
#[derive(Debug, Clone)]
pub struct ComponentEigen {
    n: usize,
    pub spectra: Vec<ComponentSpectrum>,
}

impl ComponentEigen {
    pub fn n(&self) -> usize {
        self.n
    }

    /// All eigenvalues in the order components appear.
    pub fn all_values(&self) -> Vec<f64> {
        self.spectra.iter().flat_map(|s| s.values.clone()).collect()
    }

    /// Projects an `n`-vector onto each component's eigenbasis:
    /// `coords[c][l] = <v_{c,l}, x>`.
    pub fn coordinates(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.spectra
            .iter()
            .map(|s| {
                (0..s.size())
                    .map(|l| {
                        s.nodes
                            .iter()
                            .enumerate()
                            .map(|(a, &node)| s.vectors[(a, l)] * x[node])
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Symmetric eigendecomposition of every component block, eigenvalues in
/// decreasing order. The null eigenvector is set to the exact constant
/// `1/sqrt(n_c)`; every other eigenvector has its first entry above
/// `1e-10 · max|v|` made positive.
pub fn eigendecompose(g: &AreaGraph) -> ComponentEigen {
    let spectra = (0..g.n_components())
        .map(|c| {
            let nodes = g.component_nodes(c);
            let m = nodes.len();
            if m == 1 {
                return ComponentSpectrum {
                    nodes,
                    values: vec![0.0],
                    vectors: DMatrix::from_element(1, 1, 1.0),
                };
            }
            let block = g.component_laplacian(c);
            let eig = SymmetricEigen::new(block);
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| {
                eig.eigenvalues[b]
                    .partial_cmp(&eig.eigenvalues[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
            let mut vectors = DMatrix::zeros(m, m);
            for (col, &i) in order.iter().enumerate() {
                let mut v = eig.eigenvectors.column(i).into_owned();
                let vmax = v.amax();
                if let Some(first) = v.iter().find(|x| x.abs() > 1e-10 * vmax) {
                    if *first < 0.0 {
                        v.neg_mut();
                    }
                }
                vectors.set_column(col, &v);
            }
            values[m - 1] = 0.0;
            let c0 = 1.0 / (m as f64).sqrt();
            vectors.column_mut(m - 1).fill(c0);
            ComponentSpectrum {
                nodes,
                values,
                vectors,
            }
        })
        .collect();
    ComponentEigen { n: g.n(), spectra }
}

/// Diagonal of the Moore–Penrose pseudoinverse of component `c`'s Laplacian
/// block, in the order of `g.component_nodes(c)`.
pub fn component_pseudoinverse_diag(g: &AreaGraph, c: usize) -> Result<Vec<f64>> {
    let nodes = g.component_nodes(c);
    if nodes.len() < 2 {
        return Err(Error::DegenerateBlock(c));
    }
    let eig = SymmetricEigen::new(g.component_laplacian(c));
    let lmax = eig.eigenvalues.max();
    let m = nodes.len();
    let mut diag = vec![0.0; m];
    for l in 0..m {
        let lam = eig.eigenvalues[l];
        if lam <= NULL_EIGEN_TOL * lmax {
            continue;
        }
        for (a, d) in diag.iter_mut().enumerate() {
            *d += eig.eigenvectors[(a, l)].powi(2) / lam;
        }
    }
    Ok(diag)
}

/// Count of eigenvalues of the full Laplacian below `NULL_EIGEN_TOL` relative
/// to the largest one.
pub fn null_eigen_count(g: &AreaGraph) -> usize {
    let eig = SymmetricEigen::new(g.laplacian());
    let lmax = eig.eigenvalues.max().max(0.0);
    eig.eigenvalues
        .iter()
        .filter(|&&l| l.abs() <= NULL_EIGEN_TOL * lmax.max(1.0))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn path3_laplacian() {
        let g = AreaGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1., -1., 0., -1., 2., -1., 0., -1., 1.]);
        assert_eq!(g.laplacian(), expected);
        assert_eq!(g.n_components(), 1);
    }

    #[test]
    fn disjoint_edges_two_components() {
        let g = AreaGraph::new(4, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(g.n_components(), 2);
        assert_eq!(g.components(), &[0, 0, 1, 1]);
    }

    #[test]
    fn duplicates_collapse_and_bad_edges_rejected() {
        let g = AreaGraph::new(3, &[(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert!(matches!(AreaGraph::new(3, &[(0, 3)]), Err(Error::EdgeOutOfRange(0, 3, 3))));
        assert!(matches!(AreaGraph::new(3, &[(1, 1)]), Err(Error::SelfLoop(1))));
    }

    #[test]
    fn isolated_nodes_are_components() {
        let g = AreaGraph::new(4, &[(0, 1)]).unwrap();
        assert_eq!(g.n_components(), 3);
        assert_eq!(g.singleton_components(), vec![1, 2]);
    }

    #[test]
    fn path3_spectrum() {
        let g = AreaGraph::path(3);
        let eig = eigendecompose(&g);
        let s = &eig.spectra[0];
        assert_abs_diff_eq!(s.values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.values[1], 1.0, epsilon = 1e-12);
        assert_eq!(s.values[2], 0.0);
        let r = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(s.vectors[(0, 1)], r, epsilon = 1e-12);
        assert_abs_diff_eq!(s.vectors[(1, 1)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.vectors[(2, 1)], -r, epsilon = 1e-12);
    }

    #[test]
    fn singleton_spectrum() {
        let g = AreaGraph::new(1, &[]).unwrap();
        let eig = eigendecompose(&g);
        assert_eq!(eig.spectra[0].values, vec![0.0]);
        assert_eq!(eig.spectra[0].vectors[(0, 0)], 1.0);
    }

    #[test]
    fn path5_fiedler_is_monotone() {
        let g = AreaGraph::path(5);
        let s = &eigendecompose(&g).spectra[0];
        // Fiedler = column just before the null one.
        let f: Vec<f64> = (0..5).map(|a| s.vectors[(a, 3)]).collect();
        // 2 - 2cos(pi/5) is the smallest nonzero eigenvalue of P_5.
        let lam = 2.0 - 2.0 * (std::f64::consts::PI / 5.0).cos();
        assert_abs_diff_eq!(s.values[3], lam, epsilon = 1e-12);
        assert!(f.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn pseudoinverse_diag_closed_forms() {
        let d2 = component_pseudoinverse_diag(&AreaGraph::path(2), 0).unwrap();
        assert_abs_diff_eq!(d2[0], 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(d2[1], 0.25, epsilon = 1e-14);
        let d3 = component_pseudoinverse_diag(&AreaGraph::path(3), 0).unwrap();
        assert_abs_diff_eq!(d3[0], 5.0 / 9.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d3[1], 2.0 / 9.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d3[2], 5.0 / 9.0, epsilon = 1e-14);
        let k3 = AreaGraph::new(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let dk = component_pseudoinverse_diag(&k3, 0).unwrap();
        assert_abs_diff_eq!(dk[0], dk[1], epsilon = 1e-14);
        assert_abs_diff_eq!(dk[1], dk[2], epsilon = 1e-14);
    }

    #[test]
    fn singleton_pseudoinverse_is_degenerate() {
        let g = AreaGraph::new(3, &[(0, 1)]).unwrap();
        assert!(matches!(component_pseudoinverse_diag(&g, 1), Err(Error::DegenerateBlock(1))));
    }
}
