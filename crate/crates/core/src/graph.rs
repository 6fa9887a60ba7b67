//! Static and time-varying graphs and the propagation operators built from them.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GdeError, Result};
use crate::tensor::{gemm, Tensor};

/// Graph on nodes `0..n` with deduplicated edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    directed: bool,
}

impl Graph {
    /// Undirected graph; every edge is stored in both orientations.
    pub fn undirected(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            check_endpoint(i, n)?;
            check_endpoint(j, n)?;
            set.insert((i, j));
            set.insert((j, i));
        }
        Ok(Self {
            n,
            edges: set,
            directed: false,
        })
    }

    pub fn directed(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            check_endpoint(i, n)?;
            check_endpoint(j, n)?;
            set.insert((i, j));
        }
        Ok(Self {
            n,
            edges: set,
            directed: true,
        })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: BTreeSet::new(),
            directed: false,
        }
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)));
        Self::undirected(n, edges).expect("endpoints in range")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i, j))
    }

    /// Binary adjacency matrix, `A[i][j] = 1` iff `(i, j)` is an edge.
    pub fn adjacency(&self) -> Tensor {
        let mut a = Tensor::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
        }
        a
    }

    /// Nodes connected to `v` in either direction; `v` itself only through a self-loop.
    pub fn neighbors(&self, v: usize) -> Result<BTreeSet<usize>> {
        if v >= self.n {
            return Err(GdeError::Index {
                index: v,
                len: self.n,
            });
        }
        Ok(self
            .edges
            .iter()
            .filter_map(|&(i, j)| {
                if i == v {
                    Some(j)
                } else if j == v {
                    Some(i)
                } else {
                    None
                }
            })
            .collect())
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with `D_ii = sum_j (A + I)_ij`.
    ///
    /// A self-loop already present in the edge set is not counted twice:
    /// the closed adjacency stays binary.
    pub fn normalize(&self) -> Result<NormalizedAdjacency> {
        if self.directed {
            return Err(GdeError::Contract(
                "normalization requires an undirected graph".into(),
            ));
        }
        let n = self.n;
        let mut closed = self.adjacency();
        for i in 0..n {
            closed.set(i, i, 1.0);
        }
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| 1.0 / closed.row(i).iter().sum::<f64>().sqrt())
            .collect();
        let matrix = Tensor::from_fn(n, n, |i, j| inv_sqrt[i] * closed.get(i, j) * inv_sqrt[j]);
        Ok(NormalizedAdjacency { matrix })
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        let edges = self.edges.iter().map(|&(i, j)| (perm[i], perm[j]));
        if self.directed {
            Graph::directed(self.n, edges)
        } else {
            Graph::undirected(self.n, edges)
        }
    }

    /// One `i j` pair per line, each undirected edge written once with `i <= j`.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for &(i, j) in &self.edges {
            if self.directed || i <= j {
                let _ = writeln!(s, "{i} {j}");
            }
        }
        s
    }

    pub fn parse_edge_list(text: &str, n: usize, directed: bool, path: &Path) -> Result<Graph> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| GdeError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let mut it = line.split_whitespace();
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(bad(format!("expected 'i j', got '{line}'")));
            };
            let i: usize = a.parse().map_err(|_| bad(format!("bad node index '{a}'")))?;
            let j: usize = b.parse().map_err(|_| bad(format!("bad node index '{b}'")))?;
            if i >= n || j >= n {
                return Err(bad(format!("edge ({i}, {j}) outside 0..{n}")));
            }
            edges.push((i, j));
        }
        if directed {
            Graph::directed(n, edges)
        } else {
            Graph::undirected(n, edges)
        }
    }
}

fn check_endpoint(i: usize, n: usize) -> Result<()> {
    if i >= n {
        Err(GdeError::Index { index: i, len: n })
    } else {
        Ok(())
    }
}

/// Symmetrically normalized adjacency with self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: Tensor,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.matrix.rows
    }

    pub fn into_op(self) -> GraphOp {
        GraphOp::Dense(self.matrix)
    }
}

/// Linear node-mixing operator applied to a node-feature matrix.
///
/// `BlockDiag` stacks independent graphs (a minibatch of samples, each
/// with its own adjacency) without materializing the full matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphOp {
    Dense(Tensor),
    BlockDiag(Vec<Tensor>),
    Identity(usize),
}

impl GraphOp {
    pub fn rows(&self) -> usize {
        match self {
            GraphOp::Dense(m) => m.rows,
            GraphOp::BlockDiag(blocks) => blocks.iter().map(|b| b.rows).sum(),
            GraphOp::Identity(n) => *n,
        }
    }

    pub fn apply(&self, h: &Tensor) -> Result<Tensor> {
        self.apply_inner(h, false)
    }

    pub fn apply_transpose(&self, h: &Tensor) -> Result<Tensor> {
        self.apply_inner(h, true)
    }

    fn apply_inner(&self, h: &Tensor, transpose: bool) -> Result<Tensor> {
        if self.rows() != h.rows {
            return Err(GdeError::shape("graph propagate", (self.rows(), self.rows()), h.shape()));
        }
        match self {
            GraphOp::Identity(_) => Ok(h.clone()),
            GraphOp::Dense(m) => {
                let mut out = Tensor::zeros(h.rows, h.cols);
                gemm(m, transpose, h, false, &mut out, 0.0);
                Ok(out)
            }
            GraphOp::BlockDiag(blocks) => {
                let c = h.cols;
                let mut out = Tensor::zeros(h.rows, c);
                let mut off = 0;
                for b in blocks {
                    let r = b.rows;
                    for i in 0..r {
                        let dst = (off + i) * c;
                        for k in 0..r {
                            let w = if transpose { b.data[k * r + i] } else { b.data[i * r + k] };
                            if w == 0.0 {
                                continue;
                            }
                            let src = (off + k) * c;
                            for j in 0..c {
                                out.data[dst + j] += w * h.data[src + j];
                            }
                        }
                    }
                    off += r;
                }
                Ok(out)
            }
        }
    }
}

/// Time-indexed graphs and node features: `{(X_{t_k}, G_{t_k})}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSequence {
    pub timestamps: Vec<f64>,
    pub graphs: Vec<Graph>,
    pub features: Vec<Tensor>,
}

impl GraphSequence {
    pub fn new(timestamps: Vec<f64>, graphs: Vec<Graph>, features: Vec<Tensor>) -> Result<Self> {
        if timestamps.len() != graphs.len() || timestamps.len() != features.len() {
            return Err(GdeError::Contract(format!(
                "sequence lengths differ: {} timestamps, {} graphs, {} feature matrices",
                timestamps.len(),
                graphs.len(),
                features.len()
            )));
        }
        if let Some(k) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(GdeError::Contract(format!(
                "timestamps not strictly increasing at index {}",
                k + 1
            )));
        }
        for (k, (g, x)) in graphs.iter().zip(&features).enumerate() {
            if g.n() != x.rows {
                return Err(GdeError::Contract(format!(
                    "step {k}: graph has {} nodes but features have {} rows",
                    g.n(),
                    x.rows
                )));
            }
        }
        Ok(Self {
            timestamps,
            graphs,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Entries `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> GraphSequence {
        GraphSequence {
            timestamps: self.timestamps[start..end].to_vec(),
            graphs: self.graphs[start..end].to_vec(),
            features: self.features[start..end].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_examples() {
        assert_eq!(Graph::empty(3).adjacency(), Tensor::zeros(3, 3));
        let g = Graph::undirected(2, [(0, 1)]).unwrap();
        assert_eq!(g.adjacency(), Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let d = Graph::directed(2, [(0, 1)]).unwrap();
        assert_eq!(d.adjacency(), Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(Graph::empty(1).normalize().unwrap().matrix, Tensor::ones(1, 1));
        let pair = Graph::undirected(2, [(0, 1)]).unwrap().normalize().unwrap();
        assert!(pair.matrix.max_abs_diff(&Tensor::full(2, 2, 0.5)) < 1e-15);
        let tri = Graph::complete(3).normalize().unwrap();
        assert!(tri.matrix.max_abs_diff(&Tensor::full(3, 3, 1.0 / 3.0)) < 1e-15);
    }

    #[test]
    fn normalize_rejects_directed() {
        let d = Graph::directed(2, [(0, 1)]).unwrap();
        assert!(matches!(d.normalize(), Err(GdeError::Contract(_))));
    }

    #[test]
    fn self_loop_does_not_double_count() {
        let g = Graph::undirected(1, [(0, 0)]).unwrap();
        assert_eq!(g.normalize().unwrap().matrix, Tensor::ones(1, 1));
    }

    #[test]
    fn neighbor_examples() {
        assert!(Graph::empty(2).neighbors(0).unwrap().is_empty());
        let path = Graph::undirected(3, [(0, 1), (1, 2)]).unwrap();
        assert_eq!(path.neighbors(1).unwrap().into_iter().collect::<Vec<_>>(), vec![0, 2]);
        let d = Graph::directed(2, [(0, 1)]).unwrap();
        assert_eq!(d.neighbors(1).unwrap().into_iter().collect::<Vec<_>>(), vec![0]);
        assert!(matches!(path.neighbors(3), Err(GdeError::Index { index: 3, len: 3 })));
        let looped = Graph::undirected(2, [(0, 0), (0, 1)]).unwrap();
        assert!(looped.neighbors(0).unwrap().contains(&0));
    }

    #[test]
    fn duplicate_edges_are_merged() {
        let g = Graph::undirected(2, [(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.num_edges(), 2);
    }

    #[test]
    fn out_of_range_endpoint_rejected() {
        assert!(Graph::undirected(2, [(0, 2)]).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let g = Graph::undirected(4, [(0, 1), (2, 3), (1, 3)]).unwrap();
        let text = g.to_edge_list();
        let back = Graph::parse_edge_list(&text, 4, false, Path::new("mem")).unwrap();
        assert_eq!(g, back);
        let err = Graph::parse_edge_list("0 1\n0 x\n", 4, false, Path::new("e.txt")).unwrap_err();
        assert!(err.to_string().contains("e.txt:2"), "{err}");
    }

    #[test]
    fn block_diag_matches_dense() {
        let a = Graph::undirected(2, [(0, 1)]).unwrap().normalize().unwrap().matrix;
        let b = Graph::empty(2).normalize().unwrap().matrix;
        let mut full = Tensor::zeros(4, 4);
        for i in 0..2 {
            for j in 0..2 {
                full.set(i, j, a.get(i, j));
                full.set(i + 2, j + 2, b.get(i, j));
            }
        }
        let h = Tensor::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        let blocks = GraphOp::BlockDiag(vec![a, b]);
        let dense = GraphOp::Dense(full);
        assert_eq!(blocks.apply(&h).unwrap(), dense.apply(&h).unwrap());
        assert_eq!(blocks.apply_transpose(&h).unwrap(), dense.apply_transpose(&h).unwrap());
    }

    #[test]
    fn sequence_validation() {
        let x = Tensor::zeros(2, 1);
        let g = Graph::empty(2);
        assert!(GraphSequence::new(vec![0.0, 0.0], vec![g.clone(), g.clone()], vec![x.clone(), x.clone()]).is_err());
        assert!(GraphSequence::new(vec![0.0], vec![g.clone(), g.clone()], vec![x.clone()]).is_err());
        assert!(GraphSequence::new(vec![0.0, 1.0], vec![g.clone(), g], vec![x.clone(), x]).is_ok());
    }
}
