//! Least-squares differential-operator stencils on unstructured node clouds.
//!
//! The gradient at a node is the least-squares solution of the first-order
//! Taylor system over its one-ring neighbours. Laplacian weights are fitted
//! so that `sum_j w_ij (u_j - u_i)` reproduces the Laplacian of every
//! non-constant monomial of degree `<= m`, evaluated in coordinates centred
//! on the node. Both are constant sparse maps once built.

use std::fmt::Write as _;
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{SparseMatrix, Tensor};
use crate::mesh::Graph;

#[derive(Debug, Error, PartialEq)]
pub enum StencilError {
    #[error("node {node}: neighbourhood is degenerate (displacement rank {rank} < 2)")]
    Degenerate { node: usize, rank: usize },
    #[error("node {node}: least-squares weights are not finite")]
    NonFinite { node: usize },
    #[error("field has {got} rows but the stencil covers {expected} nodes")]
    FieldLength { expected: usize, got: usize },
    #[error("order test needs at least 4 strictly decreasing scales")]
    Scales,
    #[error("interpolation: {0}")]
    Interpolation(String),
}

/// Non-constant monomials `x^a y^b` with `1 <= a + b <= m`, ordered by total
/// degree and then by decreasing power of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct TestBasis {
    pub degree: usize,
    pub exponents: Vec<(u32, u32)>,
}

impl TestBasis {
    pub fn new(degree: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 1..=degree as u32 {
            for a in (0..=total).rev() {
                exponents.push((a, total - a));
            }
        }
        Self { degree, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn eval(&self, k: usize, p: [f64; 2]) -> f64 {
        let (a, b) = self.exponents[k];
        p[0].powi(a as i32) * p[1].powi(b as i32)
    }

    /// Laplacian of monomial `k` at the origin: 2 for `x^2` and `y^2`, else 0.
    pub fn laplacian_at_origin(&self, k: usize) -> f64 {
        match self.exponents[k] {
            (2, 0) | (0, 2) => 2.0,
            _ => 0.0,
        }
    }
}

/// Smallest `m >= 2` whose non-constant basis has at least `p` terms,
/// i.e. `(m + 1)(m + 2) / 2 >= p + 1`.
pub fn select_degree(p: usize) -> usize {
    let mut m = 2;
    while (m + 1) * (m + 2) / 2 < p + 1 {
        m += 1;
    }
    m
}

/// Result of a linear least-squares solve.
#[derive(Clone, Debug)]
pub(crate) struct LsqSolution {
    pub x: DMatrix<f64>,
    /// Numerical rank when the orthogonal fallback was used.
    pub fallback_rank: Option<usize>,
}

/// Solves `min ||a x - b||` through the normal equations with a Cholesky
/// factorisation, falling back to a rank-revealing SVD (minimum-norm solution).
pub(crate) fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> LsqSolution {
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    if let Some(ch) = ata.clone().cholesky() {
        let mut x = ch.solve(&atb);
        // Squaring the condition number costs digits; two refinement sweeps recover them.
        for _ in 0..2 {
            let r = a.transpose() * (b - a * &x);
            x += ch.solve(&r);
        }
        // Cholesky succeeds on numerically singular matrices more often than not; check the product.
        let tiny = ata.diagonal().max() * 1e-14;
        let pivots_ok = ch.l().diagonal().iter().all(|d| d * d > tiny);
        if pivots_ok && x.iter().all(|v| v.is_finite()) {
            return LsqSolution { x, fallback_rank: None };
        }
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (a.nrows().max(a.ncols()) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let x = svd.solve(b, tol).unwrap_or_else(|_| DMatrix::zeros(a.ncols(), b.ncols()));
    LsqSolution { x, fallback_rank: Some(rank) }
}

fn displacement_rank(offsets: &[[f64; 2]]) -> usize {
    if offsets.is_empty() {
        return 0;
    }
    let a = DMatrix::from_fn(offsets.len(), 2, |r, c| offsets[r][c]);
    let svd = a.svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > smax * 1e-10).count()
}

fn offsets(coords: &[[f64; 2]], node: usize, neighbors: &[usize]) -> Vec<[f64; 2]> {
    let xi = coords[node];
    neighbors.iter().map(|&j| [coords[j][0] - xi[0], coords[j][1] - xi[1]]).collect()
}

/// Gradient pseudo-inverse `(A^T A)^-1 A^T` for one node, returned column-wise
/// as one 2-vector per neighbour.
pub fn gradient_weights(node: usize, offs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, StencilError> {
    let rank = displacement_rank(offs);
    if rank < 2 {
        return Err(StencilError::Degenerate { node, rank });
    }
    let p = offs.len();
    let a = DMatrix::from_fn(p, 2, |r, c| offs[r][c]);
    let ata = a.transpose() * &a;
    let inv = match ata.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => ata.pseudo_inverse(1e-300).map_err(|_| StencilError::NonFinite { node })?,
    };
    let pinv = inv * a.transpose();
    if pinv.iter().any(|v| !v.is_finite()) {
        return Err(StencilError::NonFinite { node });
    }
    Ok((0..p).map(|j| [pinv[(0, j)], pinv[(1, j)]]).collect())
}

/// Laplacian weights for one node from neighbour offsets `x_j - x_i`.
///
/// Returns the weights and, when the normal matrix was singular, the rank
/// reported by the orthogonal fallback.
pub fn laplacian_weights(node: usize, offs: &[[f64; 2]], degree: usize) -> Result<(Vec<f64>, Option<usize>), StencilError> {
    let rank = displacement_rank(offs);
    if rank < 2 {
        return Err(StencilError::Degenerate { node, rank });
    }
    let basis = TestBasis::new(degree);
    let k = basis.len();
    let p = offs.len();
    let c = DMatrix::from_fn(k, p, |r, j| basis.eval(r, offs[j]));
    let b = DMatrix::from_fn(k, 1, |r, _| basis.laplacian_at_origin(r));
    let sol = least_squares(&c, &b);
    let w: Vec<f64> = sol.x.column(0).iter().copied().collect();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(StencilError::NonFinite { node });
    }
    Ok((w, sol.fallback_rank))
}

#[derive(Clone, Debug)]
pub struct GradientStencil {
    pub neighbors: Vec<Vec<usize>>,
    /// Column `j` of the `2 x p` pseudo-inverse for each neighbour.
    pub weights: Vec<Vec<[f64; 2]>>,
    dx: Rc<SparseMatrix>,
    dy: Rc<SparseMatrix>,
}

#[derive(Clone, Debug)]
pub struct LaplacianStencil {
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub degree: Vec<usize>,
    /// Nodes where the normal equations were singular, with the fallback rank.
    pub rank_deficient: Vec<(usize, usize)>,
    op: Rc<SparseMatrix>,
}

/// Turns per-node `(neighbour, weight)` lists into the sparse map
/// `u -> sum_j w_j (u_j - u_i)`.
fn difference_operator(n: usize, neighbors: &[Vec<usize>], weight: impl Fn(usize, usize) -> f64) -> SparseMatrix {
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let mut row = Vec::with_capacity(neighbors[i].len() + 1);
            let mut diag = 0.0;
            for (k, &j) in neighbors[i].iter().enumerate() {
                let w = weight(i, k);
                row.push((j, w));
                diag -= w;
            }
            row.push((i, diag));
            row
        })
        .collect();
    SparseMatrix::from_row_entries(n, &rows).expect("neighbour indices are node indices")
}

pub fn build_gradient_stencils(graph: &Graph, coords: &[[f64; 2]]) -> Result<GradientStencil, StencilError> {
    let weights = (0..graph.node_count)
        .into_par_iter()
        .map(|i| gradient_weights(i, &offsets(coords, i, &graph.neighbors[i])))
        .collect::<Result<Vec<_>, _>>()?;
    let n = graph.node_count;
    let dx = difference_operator(n, &graph.neighbors, |i, k| weights[i][k][0]);
    let dy = difference_operator(n, &graph.neighbors, |i, k| weights[i][k][1]);
    Ok(GradientStencil { neighbors: graph.neighbors.clone(), weights, dx: Rc::new(dx), dy: Rc::new(dy) })
}

impl GradientStencil {
    /// Sparse maps producing the x and y derivative fields.
    pub fn operators(&self) -> (Rc<SparseMatrix>, Rc<SparseMatrix>) {
        (self.dx.clone(), self.dy.clone())
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }
}

/// Estimated gradient of a scalar field at every node.
pub fn apply_gradient(stencil: &GradientStencil, field: &[f64]) -> Result<Vec<[f64; 2]>, StencilError> {
    let n = stencil.node_count();
    if field.len() != n {
        return Err(StencilError::FieldLength { expected: n, got: field.len() });
    }
    Ok((0..n)
        .map(|i| {
            let mut g = [0.0; 2];
            for (&j, w) in stencil.neighbors[i].iter().zip(&stencil.weights[i]) {
                let du = field[j] - field[i];
                g[0] += w[0] * du;
                g[1] += w[1] * du;
            }
            g
        })
        .collect())
}

/// Degree policy for the Laplacian test basis.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum DegreePolicy {
    /// `select_degree(p)` per node.
    #[default]
    Auto,
    Fixed(usize),
}

pub fn build_laplacian_stencils(
    graph: &Graph,
    coords: &[[f64; 2]],
    policy: DegreePolicy,
) -> Result<LaplacianStencil, StencilError> {
    let solved = (0..graph.node_count)
        .into_par_iter()
        .map(|i| {
            let nb = &graph.neighbors[i];
            let m = match policy {
                DegreePolicy::Auto => select_degree(nb.len()),
                DegreePolicy::Fixed(m) => m,
            };
            laplacian_weights(i, &offsets(coords, i, nb), m).map(|(w, r)| (w, m, r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut weights = Vec::with_capacity(solved.len());
    let mut degree = Vec::with_capacity(solved.len());
    let mut rank_deficient = Vec::new();
    for (i, (w, m, r)) in solved.into_iter().enumerate() {
        if let Some(rank) = r {
            rank_deficient.push((i, rank));
        }
        weights.push(w);
        degree.push(m);
    }
    let op = difference_operator(graph.node_count, &graph.neighbors, |i, k| weights[i][k]);
    Ok(LaplacianStencil { neighbors: graph.neighbors.clone(), weights, degree, rank_deficient, op: Rc::new(op) })
}

impl LaplacianStencil {
    pub fn operator(&self) -> Rc<SparseMatrix> {
        self.op.clone()
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.weights.iter().flatten().fold(0.0_f64, |m, w| m.max(w.abs()))
    }

    /// Diagnostic dump: one `i : j1 w1 j2 w2 ...` line per node.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, (nb, w)) in self.neighbors.iter().zip(&self.weights).enumerate() {
            let _ = write!(s, "{i} :");
            for (j, wj) in nb.iter().zip(w) {
                let _ = write!(s, " {j} {wj:.16e}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn apply_laplacian(stencil: &LaplacianStencil, field: &[f64]) -> Result<Vec<f64>, StencilError> {
    let n = stencil.node_count();
    if field.len() != n {
        return Err(StencilError::FieldLength { expected: n, got: field.len() });
    }
    Ok((0..n)
        .map(|i| stencil.neighbors[i].iter().zip(&stencil.weights[i]).map(|(&j, w)| w * (field[j] - field[i])).sum())
        .collect())
}

/// Outcome of a convergence-order fit.
#[derive(Clone, Debug, PartialEq)]
pub enum OrderFit {
    /// Error below `1e-13` at every scale.
    Exact,
    /// Least-squares slope of `log|error|` against `log r`.
    Slope(f64),
}

#[derive(Clone, Debug)]
pub struct OrderReport {
    pub fit: OrderFit,
    pub scales: Vec<f64>,
    pub errors: Vec<f64>,
}

const EXACT_TOL: f64 = 1e-13;

fn check_scales(scales: &[f64]) -> Result<(), StencilError> {
    if scales.len() < 4 || scales.windows(2).any(|w| !(w[1] < w[0])) || scales.iter().any(|&r| r <= 0.0) {
        return Err(StencilError::Scales);
    }
    Ok(())
}

/// Empirical approximation order of the fitted Laplacian at `center`.
///
/// At each scale `r` the neighbourhood `center + r (x_k - center)` is refitted
/// and compared against the exact Laplacian of `u`.
pub fn order_test(
    center: [f64; 2],
    neighbors: &[[f64; 2]],
    u: &dyn Fn(f64, f64) -> f64,
    laplacian: &dyn Fn(f64, f64) -> f64,
    scales: &[f64],
    policy: DegreePolicy,
) -> Result<OrderReport, StencilError> {
    check_scales(scales)?;
    let m = match policy {
        DegreePolicy::Auto => select_degree(neighbors.len()),
        DegreePolicy::Fixed(m) => m,
    };
    let exact = laplacian(center[0], center[1]);
    let u0 = u(center[0], center[1]);
    let mut errors = Vec::with_capacity(scales.len());
    for &r in scales {
        let offs: Vec<[f64; 2]> =
            neighbors.iter().map(|x| [r * (x[0] - center[0]), r * (x[1] - center[1])]).collect();
        let (w, _) = laplacian_weights(0, &offs, m)?;
        let approx: f64 =
            offs.iter().zip(&w).map(|(o, wk)| wk * (u(center[0] + o[0], center[1] + o[1]) - u0)).sum();
        errors.push((exact - approx).abs());
    }
    let fit = if errors.iter().all(|&e| e < EXACT_TOL) {
        OrderFit::Exact
    } else {
        let xs: Vec<f64> = scales.iter().map(|r| r.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.max(f64::MIN_POSITIVE).ln()).collect();
        OrderFit::Slope(linear_slope(&xs, &ys))
    };
    Ok(OrderReport { fit, scales: scales.to_vec(), errors })
}

fn linear_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Clone, Debug)]
pub struct EtaReport {
    /// Euclidean norm of `r^2 w(r)` at each scale.
    pub norms: Vec<f64>,
    pub max: f64,
    pub min: f64,
}

impl EtaReport {
    pub fn ratio(&self) -> f64 {
        self.max / self.min
    }
}

/// Norms of the rescaled weights `r^2 w(r)` as the neighbourhood shrinks.
pub fn eta_boundedness(
    center: [f64; 2],
    neighbors: &[[f64; 2]],
    scales: &[f64],
    policy: DegreePolicy,
) -> Result<EtaReport, StencilError> {
    check_scales(scales)?;
    let m = match policy {
        DegreePolicy::Auto => select_degree(neighbors.len()),
        DegreePolicy::Fixed(m) => m,
    };
    let mut norms = Vec::with_capacity(scales.len());
    for &r in scales {
        let offs: Vec<[f64; 2]> =
            neighbors.iter().map(|x| [r * (x[0] - center[0]), r * (x[1] - center[1])]).collect();
        let (w, _) = laplacian_weights(0, &offs, m)?;
        norms.push(w.iter().map(|v| (r * r * v).powi(2)).sum::<f64>().sqrt());
    }
    let max = norms.iter().copied().fold(f64::MIN, f64::max);
    let min = norms.iter().copied().fold(f64::MAX, f64::min);
    Ok(EtaReport { norms, max, min })
}

/// Operator exactness on a mesh: gradient error on an affine field and the
/// worst Laplacian error over a family of quadratics.
#[derive(Clone, Debug)]
pub struct ExactnessReport {
    /// Largest absolute gradient error over all nodes and both components.
    pub gradient_max_error: f64,
    /// Per node: largest Laplacian error over the quadratics, divided by
    /// `max_j |w_ij| * max |u|`.
    pub laplacian_relative: Vec<f64>,
}

impl ExactnessReport {
    pub fn laplacian_max_relative(&self) -> f64 {
        self.laplacian_relative.iter().copied().fold(0.0, f64::max)
    }

    /// Nodes whose relative Laplacian error exceeds `tol`.
    pub fn laplacian_failures(&self, tol: f64) -> Vec<usize> {
        (0..self.laplacian_relative.len()).filter(|&i| self.laplacian_relative[i] > tol).collect()
    }
}

type Poly = (fn(f64, f64) -> f64, f64);

const QUADRATICS: [Poly; 5] = [
    (|x, _| x * x, 2.0),
    (|x, y| x * y, 0.0),
    (|_, y| y * y, 2.0),
    (|x, y| 0.5 + x - y + x * x + 3.0 * x * y - 2.0 * y * y, -2.0),
    (|x, y| 2.0 * x - 0.25 * y, 0.0),
];

pub fn exactness_check(
    gradient: &GradientStencil,
    laplacian: &LaplacianStencil,
    coords: &[[f64; 2]],
) -> Result<ExactnessReport, StencilError> {
    let affine: Vec<f64> = coords.iter().map(|p| 1.0 + 2.0 * p[0] - 3.0 * p[1]).collect();
    let g = apply_gradient(gradient, &affine)?;
    let gradient_max_error = g.iter().fold(0.0_f64, |m, d| m.max((d[0] - 2.0).abs()).max((d[1] + 3.0).abs()));
    let mut rel = vec![0.0_f64; coords.len()];
    for (u, lap) in QUADRATICS {
        let field: Vec<f64> = coords.iter().map(|p| u(p[0], p[1])).collect();
        let umax = field.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let l = apply_laplacian(laplacian, &field)?;
        for (i, li) in l.iter().enumerate() {
            let wmax = laplacian.weights[i].iter().fold(0.0_f64, |m, w| m.max(w.abs())).max(f64::MIN_POSITIVE);
            rel[i] = rel[i].max((li - lap).abs() / (wmax * umax));
        }
    }
    Ok(ExactnessReport { gradient_max_error, laplacian_relative: rel })
}

/// Order slopes and eta ratios of the fitted Laplacian at every node in
/// `nodes`, using each node's own neighbourhood shape.
#[derive(Clone, Debug)]
pub struct OrderSurvey {
    pub nodes: Vec<usize>,
    /// `None` where the fit is exact at every scale.
    pub slopes: Vec<Option<f64>>,
    pub eta_ratios: Vec<f64>,
}

impl OrderSurvey {
    pub fn min_slope(&self) -> Option<f64> {
        self.slopes.iter().flatten().copied().reduce(f64::min)
    }

    pub fn max_eta_ratio(&self) -> f64 {
        self.eta_ratios.iter().copied().fold(0.0, f64::max)
    }
}

pub fn order_survey(
    graph: &Graph,
    coords: &[[f64; 2]],
    nodes: &[usize],
    u: &(dyn Fn(f64, f64) -> f64 + Sync),
    laplacian: &(dyn Fn(f64, f64) -> f64 + Sync),
    scales: &[f64],
    policy: DegreePolicy,
) -> Result<OrderSurvey, StencilError> {
    let res = nodes
        .par_iter()
        .map(|&i| {
            let nb: Vec<[f64; 2]> = graph.neighbors[i].iter().map(|&j| coords[j]).collect();
            let rep = order_test(coords[i], &nb, u, laplacian, scales, policy)?;
            let eta = eta_boundedness(coords[i], &nb, scales, policy)?;
            let slope = match rep.fit {
                OrderFit::Exact => None,
                OrderFit::Slope(s) => Some(s),
            };
            Ok((slope, eta.ratio()))
        })
        .collect::<Result<Vec<_>, StencilError>>()?;
    let (slopes, eta_ratios) = res.into_iter().unzip();
    Ok(OrderSurvey { nodes: nodes.to_vec(), slopes, eta_ratios })
}

/// Seeded star-shaped neighbourhood of `p` points around the origin: angles
/// near `2 pi k / p` and radii in `[0.6, 1.4]`.
pub fn random_star_stencil(p: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = std::f64::consts::PI / p as f64 * 0.8;
    (0..p)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / p as f64 + rng.random_range(-spread..spread);
            let radius = rng.random_range(0.6..1.4);
            [radius * theta.cos(), radius * theta.sin()]
        })
        .collect()
}

/// Estimate of value, time derivative and gradient at an off-grid space-time point.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeEstimate {
    pub value: Vec<f64>,
    pub time_derivative: Vec<f64>,
    pub gradient: Vec<[f64; 2]>,
}

/// Linear weights reproducing the value estimate of [`interpolate_spacetime`].
///
/// `rows` index the `2l` samples: the first `l` belong to time `t_p`, the last
/// `l` to `t_{p+1}`; `nodes` holds the shared spatial nodes.
#[derive(Clone, Debug)]
pub struct InterpolationWeights {
    pub nodes: Vec<usize>,
    /// `(d + 2) x 2l` solution operator `(Q^T Q)^-1 Q^T`.
    pub operator: DMatrix<f64>,
}

impl InterpolationWeights {
    pub fn value_weights(&self) -> (&[usize], Vec<f64>) {
        (&self.nodes, self.operator.row(0).iter().copied().collect())
    }
}

fn nearest_nodes(coords: &[[f64; 2]], x: [f64; 2], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    idx.sort_by(|&a, &b| {
        let da = (coords[a][0] - x[0]).powi(2) + (coords[a][1] - x[1]).powi(2);
        let db = (coords[b][0] - x[0]).powi(2) + (coords[b][1] - x[1]).powi(2);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    idx.truncate(l);
    idx
}

/// Builds the space-time least-squares operator for a query `(x_d, t_d)`
/// bracketed by `t_p <= t_d <= t_{p+1}` using the `l` nearest nodes.
pub fn spacetime_weights(
    coords: &[[f64; 2]],
    t_p: f64,
    t_next: f64,
    x_d: [f64; 2],
    t_d: f64,
    l: usize,
) -> Result<InterpolationWeights, StencilError> {
    if l < 4 {
        return Err(StencilError::Interpolation(format!("need at least 4 nodes, got l = {l}")));
    }
    if l > coords.len() {
        return Err(StencilError::Interpolation(format!("l = {l} exceeds node count {}", coords.len())));
    }
    if !(t_next > t_p) || t_d < t_p || t_d > t_next {
        return Err(StencilError::Interpolation(format!("t_d = {t_d} is not in [{t_p}, {t_next}]")));
    }
    let nodes = nearest_nodes(coords, x_d, l);
    let q = DMatrix::from_fn(2 * l, 4, |r, c| {
        let (m, t) = if r < l { (nodes[r], t_p) } else { (nodes[r - l], t_next) };
        match c {
            0 => 1.0,
            1 => t - t_d,
            2 => coords[m][0] - x_d[0],
            _ => coords[m][1] - x_d[1],
        }
    });
    let qtq = q.transpose() * &q;
    let inv = qtq
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| StencilError::Interpolation("singular normal matrix (degenerate node cloud)".into()))?;
    let operator = inv * q.transpose();
    if operator.iter().any(|v| !v.is_finite()) {
        return Err(StencilError::Interpolation("non-finite interpolation weights".into()));
    }
    Ok(InterpolationWeights { nodes, operator })
}

/// Least-squares estimate of `u`, `du/dt` and `grad u` at `(x_d, t_d)` from
/// the node fields at the two bracketing steps.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_spacetime(
    field_p: &Tensor,
    field_next: &Tensor,
    coords: &[[f64; 2]],
    t_p: f64,
    t_next: f64,
    x_d: [f64; 2],
    t_d: f64,
    l: usize,
) -> Result<SpaceTimeEstimate, StencilError> {
    if field_p.shape() != field_next.shape() || field_p.rows() != coords.len() {
        return Err(StencilError::FieldLength { expected: coords.len(), got: field_p.rows() });
    }
    let w = spacetime_weights(coords, t_p, t_next, x_d, t_d, l)?;
    let n = field_p.cols();
    let z = DMatrix::from_fn(2 * l, n, |r, c| if r < l { field_p.get(w.nodes[r], c) } else { field_next.get(w.nodes[r - l], c) });
    let h = &w.operator * z;
    Ok(SpaceTimeEstimate {
        value: (0..n).map(|c| h[(0, c)]).collect(),
        time_derivative: (0..n).map(|c| h[(1, c)]).collect(),
        gradient: (0..n).map(|c| [h[(2, c)], h[(3, c)]]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star_graph(center: [f64; 2], nbrs: &[[f64; 2]]) -> (Graph, Vec<[f64; 2]>) {
        let mut coords = vec![center];
        coords.extend_from_slice(nbrs);
        let n = coords.len();
        let mut neighbors = vec![Vec::new(); n];
        neighbors[0] = (1..n).collect();
        let m = n - 1;
        for j in 1..n {
            neighbors[j] = vec![0, 1 + (j % m), 1 + (j + m - 2) % m];
        }
        let g = Graph { node_count: n, edges: vec![], neighbors, edge_features: vec![] };
        (g, coords)
    }

    #[test]
    fn basis_counts_and_order() {
        for m in 2..6 {
            assert_eq!(TestBasis::new(m).len(), (m + 1) * (m + 2) / 2 - 1);
        }
        assert_eq!(TestBasis::new(2).exponents, vec![(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]);
    }

    #[test]
    fn degree_rule() {
        assert_eq!(select_degree(4), 2);
        assert_eq!(select_degree(5), 2);
        assert_eq!(select_degree(6), 3);
        assert_eq!(select_degree(1), 2);
        assert_eq!(select_degree(9), 3);
        assert_eq!(select_degree(10), 4);
    }

    #[test]
    fn gradient_exact_on_affine_two_neighbours() {
        let w = gradient_weights(0, &[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        // u = 1 + x + 2y: differences 1 and 2
        let du = [1.0, 2.0];
        let g = [w[0][0] * du[0] + w[1][0] * du[1], w[0][1] * du[0] + w[1][1] * du[1]];
        assert!((g[0] - 1.0).abs() < 1e-14 && (g[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_overdetermined_affine() {
        let offs = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let w = gradient_weights(0, &offs).unwrap();
        let du: Vec<f64> = offs.iter().map(|o| o[0] - o[1]).collect();
        let gx: f64 = w.iter().zip(&du).map(|(w, d)| w[0] * d).sum();
        let gy: f64 = w.iter().zip(&du).map(|(w, d)| w[1] * d).sum();
        assert!((gx - 1.0).abs() < 1e-14 && (gy + 1.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_least_squares_hand_solution() {
        // A = [[1,0],[0,1],[1,1]], U = (1,1,1): A^T A = [[2,1],[1,2]], A^T U = (2,2) -> (2/3, 2/3)
        let w = gradient_weights(0, &[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let gx: f64 = w.iter().map(|w| w[0]).sum();
        let gy: f64 = w.iter().map(|w| w[1]).sum();
        assert!((gx - 2.0 / 3.0).abs() < 1e-14 && (gy - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn collinear_neighbourhood_is_rejected() {
        let err = gradient_weights(7, &[[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0]]).unwrap_err();
        assert_eq!(err, StencilError::Degenerate { node: 7, rank: 1 });
        assert!(laplacian_weights(3, &[[1.0, 1.0], [2.0, 2.0]], 2).is_err());
    }

    #[test]
    fn cross_weights_and_quadratic() {
        let h = 0.1;
        let nbrs = [[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]];
        let (w, fallback) = laplacian_weights(0, &nbrs, select_degree(4)).unwrap();
        assert!(fallback.is_none());
        for wk in &w {
            assert!((wk - 100.0).abs() / 100.0 < 1e-8, "{wk}");
        }
        let (g, coords) = star_graph([0.3, -0.2], &nbrs.map(|o| [0.3 + o[0], -0.2 + o[1]]));
        let st = build_laplacian_stencils(&g, &coords, DegreePolicy::Auto).unwrap();
        let u: Vec<f64> = coords.iter().map(|p| p[0] * p[0] + p[1] * p[1]).collect();
        assert!((apply_laplacian(&st, &u).unwrap()[0] - 4.0).abs() < 1e-8);
        let ux: Vec<f64> = coords.iter().map(|p| p[0]).collect();
        assert!(apply_laplacian(&st, &ux).unwrap()[0].abs() < 1e-8);
        let c = vec![2.5; coords.len()];
        assert!(apply_laplacian(&st, &c).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_field_ops() {
        let nbrs = [[1.0, 0.2], [-0.3, 1.0], [-0.9, -0.4], [0.4, -1.1]];
        let (g, coords) = star_graph([0.0, 0.0], &nbrs);
        let st = build_gradient_stencils(&g, &coords).unwrap();
        let u: Vec<f64> = coords.iter().map(|p| 3.0 * p[0]).collect();
        for gi in apply_gradient(&st, &u).unwrap() {
            assert!((gi[0] - 3.0).abs() < 1e-12 && gi[1].abs() < 1e-12);
        }
        let c = vec![1.0; coords.len()];
        assert!(apply_gradient(&st, &c).unwrap().iter().all(|g| *g == [0.0, 0.0]));
        assert!(apply_gradient(&st, &[1.0]).is_err());
    }

    #[test]
    fn order_of_cross_stencil() {
        let nbrs = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let u = |x: f64, y: f64| x.sin() * y.cos();
        let lap = |x: f64, y: f64| -2.0 * x.sin() * y.cos();
        let rep = order_test([0.4, 0.7], &nbrs.map(|o| [0.4 + o[0], 0.7 + o[1]]), &u, &lap, &[0.1, 0.05, 0.025, 0.0125], DegreePolicy::Auto)
            .unwrap();
        match rep.fit {
            OrderFit::Slope(s) => assert!((s - 2.0).abs() < 0.2, "slope {s}"),
            OrderFit::Exact => panic!("sin*cos is not reproduced exactly"),
        }
        let quad = |x: f64, y: f64| x - 2.0 * y + 0.5 * x * x + x * y - y * y;
        let lq = |_: f64, _: f64| -1.0;
        let rep = order_test([0.0, 0.0], &nbrs, &quad, &lq, &[0.1, 0.05, 0.025, 0.0125], DegreePolicy::Auto).unwrap();
        assert_eq!(rep.fit, OrderFit::Exact, "{:?}", rep.errors);
        assert!(order_test([0.0, 0.0], &nbrs, &quad, &lq, &[0.1, 0.05], DegreePolicy::Auto).is_err());
    }

    #[test]
    fn eta_of_cross_is_scale_invariant() {
        let nbrs = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let rep = eta_boundedness([0.0, 0.0], &nbrs, &[1.0, 0.5, 0.25, 0.125, 0.0625], DegreePolicy::Auto).unwrap();
        assert!((rep.max - 2.0).abs() < 1e-8);
        assert!(rep.max - rep.min < 1e-6);
    }

    #[test]
    fn interpolation_examples() {
        let coords: Vec<[f64; 2]> = (0..5).flat_map(|j| (0..5).map(move |i| [i as f64 * 0.25, j as f64 * 0.25])).collect();
        let field = |f: &dyn Fn(f64, f64) -> f64| Tensor::from_fn(coords.len(), 1, |r, _| f(coords[r][0], coords[r][1]));
        let e = interpolate_spacetime(&field(&|_, _| 0.0), &field(&|_, _| 1.0), &coords, 0.0, 1.0, [0.4, 0.6], 0.5, 6).unwrap();
        assert!((e.value[0] - 0.5).abs() < 1e-12);
        assert!((e.time_derivative[0] - 1.0).abs() < 1e-12);
        assert!(e.gradient[0][0].abs() < 1e-12 && e.gradient[0][1].abs() < 1e-12);

        let fx = field(&|x, _| x);
        let e = interpolate_spacetime(&fx, &fx, &coords, 0.0, 1.0, [0.3, 0.3], 0.0, 6).unwrap();
        assert!((e.value[0] - 0.3).abs() < 1e-12);
        assert!((e.gradient[0][0] - 1.0).abs() < 1e-12 && e.gradient[0][1].abs() < 1e-12);

        let a = field(&|x, y| 2.0 * 0.2 + 3.0 * x - y);
        let b = field(&|x, y| 2.0 * 0.3 + 3.0 * x - y);
        let e = interpolate_spacetime(&a, &b, &coords, 0.2, 0.3, [0.5, 0.5], 0.25, 6).unwrap();
        assert!((e.value[0] - 1.5).abs() < 1e-10);

        assert!(interpolate_spacetime(&a, &b, &coords, 0.2, 0.3, [0.5, 0.5], 0.35, 6).is_err());
        let line: Vec<[f64; 2]> = (0..8).map(|i| [i as f64, 0.0]).collect();
        assert!(spacetime_weights(&line, 0.0, 1.0, [0.5, 0.0], 0.5, 6).is_err());
    }

    #[test]
    fn dump_format() {
        let nbrs = [[0.1, 0.0], [-0.1, 0.0], [0.0, 0.1], [0.0, -0.1]];
        let (g, coords) = star_graph([0.0, 0.0], &nbrs);
        let st = build_laplacian_stencils(&g, &coords, DegreePolicy::Auto).unwrap();
        let first = st.dump().lines().next().unwrap().to_string();
        assert!(first.starts_with("0 : 1 "), "{first}");
        assert_eq!(first.split_whitespace().count(), 2 + 2 * 4);
    }
}
