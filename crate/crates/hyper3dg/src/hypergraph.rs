//! KNN hypergraph construction and the patch-level hypergraph convolution.
//!
//! Vertices are patches; one hyperedge per vertex joins it with its k nearest
//! neighbors, built independently in position space and in latent-feature
//! space and then concatenated. The convolution is the normalized smoothing
//! operator Â = D_v^{-1/2} H W D_e^{-1} Hᵀ D_v^{-1/2} followed by a diagonal
//! channel scaling Θ and a LeakyReLU.
//!
//! The sparse evaluation uses the pairwise form
//! Â[v,u] = Σ_e (W_e / D_e(e)) / sqrt(D_v(v) · D_v(u)) over shared edges.
//! Taking sqrt of the degree *product* (not the product of sqrts) keeps the
//! operator bitwise symmetric and makes the double-identity construction an
//! exact fixed point: each coefficient is (1/1)/sqrt(2·2) = 0.5 exactly, and
//! 0.5x + 0.5x == x in IEEE arithmetic.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Which space a hypergraph's edges were built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HypergraphGroup {
    Spatial,
    Latent,
    Concatenated,
}

/// Sparse incidence structure: `edges[e]` lists the member vertices of
/// hyperedge `e` (KNN edges store the owning vertex first, then its
/// neighbors ordered by distance).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    pub n_vertices: usize,
    pub edges: Vec<Vec<usize>>,
    pub edge_weights: Vec<f64>,
    pub group: HypergraphGroup,
}

/// Patch-feature matrix X (one row per vertex).
pub type VertexMatrix = DMatrix<f64>;

/// Diagonal of the learnable channel scaling Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaDiag(pub Vec<f64>);

impl ThetaDiag {
    /// Identity initialization (all ones), the conventional starting point:
    /// the first refinement increment is then a pure smoothing residual.
    pub fn ones(n: usize) -> ThetaDiag {
        ThetaDiag(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Intermediate products of one convolution, kept for the Θ gradient:
/// `ax` = ÂX and `preact` = ÂXΘ (the LeakyReLU input).
#[derive(Debug, Clone)]
pub struct HgnnCache {
    pub ax: DMatrix<f64>,
    pub preact: DMatrix<f64>,
}

impl Hypergraph {
    /// Structural validation shared by all operators.
    fn validate(&self) -> Result<()> {
        if self.edges.len() != self.edge_weights.len() {
            return Err(Error::Config(format!(
                "{} edges but {} edge weights",
                self.edges.len(),
                self.edge_weights.len()
            )));
        }
        for (e, members) in self.edges.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Config(format!("hyperedge {e} is empty")));
            }
            for &v in members {
                if v >= self.n_vertices {
                    return Err(Error::Config(format!(
                        "hyperedge {e} references vertex {v} but there are only {} vertices",
                        self.n_vertices
                    )));
                }
            }
        }
        for (e, &w) in self.edge_weights.iter().enumerate() {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!(
                    "edge weight {e} must be a positive finite real, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// (vertex degrees D_v, edge degrees D_e); errors on an isolated vertex.
    fn degrees(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        let mut dv = vec![0.0; self.n_vertices];
        let mut de = Vec::with_capacity(self.edges.len());
        for (members, &w) in self.edges.iter().zip(&self.edge_weights) {
            de.push(members.len() as f64);
            for &v in members {
                dv[v] += w;
            }
        }
        if let Some(v) = dv.iter().position(|&d| d == 0.0) {
            return Err(Error::Config(format!(
                "vertex {v} belongs to no hyperedge (zero degree)"
            )));
        }
        Ok((dv, de))
    }

    /// Text edge list (`edge_id: v1 v2 …`), one line per hyperedge.
    pub fn dump_edge_list(&self) -> String {
        let mut out = String::new();
        for (e, members) in self.edges.iter().enumerate() {
            out.push_str(&e.to_string());
            out.push(':');
            for &v in members {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// k nearest neighbors of every row of `points` by Euclidean distance,
/// ties broken by lower index. Each inner list is sorted nearest-first.
fn knn_indices(points: &DMatrix<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.nrows();
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("points contain non-finite values".into()));
    }
    let mut result = Vec::with_capacity(n);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n.saturating_sub(1));
    for v in 0..n {
        dists.clear();
        for u in 0..n {
            if u == v {
                continue;
            }
            let mut d2 = 0.0;
            for c in 0..points.ncols() {
                let diff = points[(v, c)] - points[(u, c)];
                d2 += diff * diff;
            }
            dists.push((d2, u));
        }
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        result.push(dists.iter().take(k).map(|&(_, u)| u).collect());
    }
    Ok(result)
}

/// One hyperedge per vertex: e_v = {v} ∪ {its k nearest neighbors}; E = N,
/// all edge weights 1. Requires k ≤ N − 1.
pub fn build_knn_hypergraph(
    points: &DMatrix<f64>,
    k: usize,
    group: HypergraphGroup,
) -> Result<Hypergraph> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::Config(
            "cannot build a hypergraph over zero vertices".into(),
        ));
    }
    if k >= n {
        return Err(Error::Config(format!(
            "k = {k} requires at least k + 1 = {} vertices, got {n}",
            k + 1
        )));
    }
    let neighbors = knn_indices(points, k)?;
    let edges = neighbors
        .into_iter()
        .enumerate()
        .map(|(v, mut ns)| {
            let mut edge = Vec::with_capacity(ns.len() + 1);
            edge.push(v);
            edge.append(&mut ns);
            edge
        })
        .collect();
    Ok(Hypergraph {
        n_vertices: n,
        edges,
        edge_weights: vec![1.0; n],
        group,
    })
}

/// Column-concatenate two hypergraphs over the same vertex set; the first
/// block gets uniform weight `w_spa`, the second `w_lat`.
pub fn concat_hypergraphs(
    h_spa: &Hypergraph,
    h_lat: &Hypergraph,
    w_spa: f64,
    w_lat: f64,
) -> Result<Hypergraph> {
    if h_spa.n_vertices != h_lat.n_vertices {
        return Err(Error::Config(format!(
            "vertex count mismatch: {} vs {}",
            h_spa.n_vertices, h_lat.n_vertices
        )));
    }
    for (name, w) in [("w_spa", w_spa), ("w_lat", w_lat)] {
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::Config(format!(
                "{name} must be positive and finite, got {w}"
            )));
        }
    }
    h_spa.validate()?;
    h_lat.validate()?;
    let mut edges = h_spa.edges.clone();
    edges.extend(h_lat.edges.iter().cloned());
    let mut edge_weights = vec![w_spa; h_spa.edges.len()];
    edge_weights.extend(std::iter::repeat_n(w_lat, h_lat.edges.len()));
    Ok(Hypergraph {
        n_vertices: h_spa.n_vertices,
        edges,
        edge_weights,
        group: HypergraphGroup::Concatenated,
    })
}

fn leaky_relu(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

/// Derivative of LeakyReLU; the kink at 0 takes the right-hand value 1.
pub fn leaky_relu_grad(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        slope
    }
}

fn check_forward_inputs(
    x: &DMatrix<f64>,
    h: &Hypergraph,
    theta: &ThetaDiag,
    slope: f64,
) -> Result<()> {
    if x.nrows() != h.n_vertices {
        return Err(Error::Config(format!(
            "vertex matrix has {} rows but the hypergraph has {} vertices",
            x.nrows(),
            h.n_vertices
        )));
    }
    if theta.len() != x.ncols() {
        return Err(Error::Config(format!(
            "theta has {} entries but the vertex matrix has {} columns",
            theta.len(),
            x.ncols()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "vertex matrix contains non-finite values".into(),
        ));
    }
    if theta.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("theta contains non-finite values".into()));
    }
    if !slope.is_finite() {
        return Err(Error::Config(format!(
            "leaky slope must be finite, got {slope}"
        )));
    }
    Ok(())
}

/// Sparse evaluation of ÂX without materializing Â.
fn apply_operator(x: &DMatrix<f64>, h: &Hypergraph) -> Result<DMatrix<f64>> {
    let (dv, de) = h.degrees()?;
    let c = x.ncols();
    let mut out = DMatrix::zeros(h.n_vertices, c);
    for (members, (&w, de_e)) in h.edges.iter().zip(h.edge_weights.iter().zip(&de)) {
        let edge_scale = w / de_e;
        for &v in members {
            for &u in members {
                let coef = edge_scale / (dv[v] * dv[u]).sqrt();
                for col in 0..c {
                    out[(v, col)] += coef * x[(u, col)];
                }
            }
        }
    }
    Ok(out)
}

/// One hypergraph convolution: X̃ = LeakyReLU(Â X Θ).
pub fn hgnn_forward(
    x: &VertexMatrix,
    h: &Hypergraph,
    theta: &ThetaDiag,
    leaky_slope: f64,
) -> Result<VertexMatrix> {
    hgnn_forward_with_cache(x, h, theta, leaky_slope).map(|(out, _)| out)
}

/// [`hgnn_forward`] that also returns the intermediates needed to
/// differentiate with respect to Θ.
pub fn hgnn_forward_with_cache(
    x: &VertexMatrix,
    h: &Hypergraph,
    theta: &ThetaDiag,
    leaky_slope: f64,
) -> Result<(VertexMatrix, HgnnCache)> {
    check_forward_inputs(x, h, theta, leaky_slope)?;
    let ax = apply_operator(x, h)?;
    let mut preact = ax.clone();
    for col in 0..preact.ncols() {
        let t = theta.0[col];
        for row in 0..preact.nrows() {
            preact[(row, col)] *= t;
        }
    }
    let out = preact.map(|v| leaky_relu(v, leaky_slope));
    Ok((out, HgnnCache { ax, preact }))
}

/// Dense Â = D_v^{-1/2} H W D_e^{-1} Hᵀ D_v^{-1/2}; bitwise symmetric by
/// construction (each (v,u)/(u,v) pair accumulates identical terms).
pub fn normalized_operator(h: &Hypergraph) -> Result<DMatrix<f64>> {
    let (dv, de) = h.degrees()?;
    let n = h.n_vertices;
    let mut a = DMatrix::zeros(n, n);
    for (members, (&w, de_e)) in h.edges.iter().zip(h.edge_weights.iter().zip(&de)) {
        let edge_scale = w / de_e;
        for &v in members {
            for &u in members {
                a[(v, u)] += edge_scale / (dv[v] * dv[u]).sqrt();
            }
        }
    }
    Ok(a)
}

/// Symmetrically normalized adjacency of the graph-convolution baseline:
/// symmetric KNN graphs (edge if either endpoint selects the other) with
/// self-loops, built in both spaces and unioned, then D^{-1/2} A D^{-1/2}.
pub fn gcn_operator(
    points_spa: &DMatrix<f64>,
    points_lat: &DMatrix<f64>,
    k_spa: usize,
    k_lat: usize,
) -> Result<DMatrix<f64>> {
    let n = points_spa.nrows();
    if points_lat.nrows() != n {
        return Err(Error::Config(format!(
            "point sets have {n} and {} rows; they must describe the same vertices",
            points_lat.nrows()
        )));
    }
    if n == 0 {
        return Err(Error::Config(
            "cannot run a graph convolution over zero vertices".into(),
        ));
    }
    for (k, name) in [(k_spa, "k_spa"), (k_lat, "k_lat")] {
        if k >= n {
            return Err(Error::Config(format!(
                "{name} = {k} requires at least {} vertices, got {n}",
                k + 1
            )));
        }
    }

    let mut adj = vec![false; n * n];
    for v in 0..n {
        adj[v * n + v] = true;
    }
    for points in [points_spa, points_lat] {
        let k = if std::ptr::eq(points, points_spa) {
            k_spa
        } else {
            k_lat
        };
        for (v, ns) in knn_indices(points, k)?.into_iter().enumerate() {
            for u in ns {
                adj[v * n + u] = true;
                adj[u * n + v] = true;
            }
        }
    }
    let deg: Vec<f64> = (0..n)
        .map(|v| (0..n).filter(|&u| adj[v * n + u]).count() as f64)
        .collect();
    let mut op = DMatrix::zeros(n, n);
    for v in 0..n {
        for u in 0..n {
            if adj[v * n + u] {
                op[(v, u)] = 1.0 / (deg[v] * deg[u]).sqrt();
            }
        }
    }
    Ok(op)
}

/// Convolution through an explicit dense normalized operator:
/// X̃ = LeakyReLU((op X) Θ), with the same intermediates as the sparse path.
/// Structural zeros of the operator are skipped so the accumulation order
/// matches a sparse traversal exactly.
pub fn dense_forward_with_cache(
    x: &VertexMatrix,
    op: &DMatrix<f64>,
    theta: &ThetaDiag,
    leaky_slope: f64,
) -> Result<(VertexMatrix, HgnnCache)> {
    let n = x.nrows();
    if op.nrows() != n || op.ncols() != n {
        return Err(Error::Config(format!(
            "operator is {}x{} but the vertex matrix has {n} rows",
            op.nrows(),
            op.ncols()
        )));
    }
    // Dummy hypergraph reuses the shared input checks.
    let self_loops = Hypergraph {
        n_vertices: n,
        edges: (0..n).map(|v| vec![v]).collect(),
        edge_weights: vec![1.0; n],
        group: HypergraphGroup::Concatenated,
    };
    check_forward_inputs(x, &self_loops, theta, leaky_slope)?;

    let c = x.ncols();
    let mut ax = DMatrix::zeros(n, c);
    for v in 0..n {
        for u in 0..n {
            let coef = op[(v, u)];
            if coef == 0.0 {
                continue;
            }
            for col in 0..c {
                ax[(v, col)] += coef * x[(u, col)];
            }
        }
    }
    let mut preact = ax.clone();
    for col in 0..c {
        let t = theta.0[col];
        for row in 0..n {
            preact[(row, col)] *= t;
        }
    }
    let out = preact.map(|v| leaky_relu(v, leaky_slope));
    Ok((out, HgnnCache { ax, preact }))
}

/// Clique-expansion graph-convolution baseline:
/// X̃ = LeakyReLU(D^{-1/2} A D^{-1/2} X Θ) over the unioned KNN graphs.
pub fn gcn_forward(
    x: &VertexMatrix,
    points_spa: &DMatrix<f64>,
    points_lat: &DMatrix<f64>,
    k_spa: usize,
    k_lat: usize,
    theta: &ThetaDiag,
    leaky_slope: f64,
) -> Result<VertexMatrix> {
    if points_spa.nrows() != x.nrows() {
        return Err(Error::Config(format!(
            "point sets have {} rows but the vertex matrix has {}",
            points_spa.nrows(),
            x.nrows()
        )));
    }
    let op = gcn_operator(points_spa, points_lat, k_spa, k_lat)?;
    dense_forward_with_cache(x, &op, theta, leaky_slope).map(|(out, _)| out)
}
