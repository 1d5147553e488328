//! Triangular meshes over rectangles and the bidirectional graph built on them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const MESH_MAGIC: &str = "pignn-mesh v1";
const DUPLICATE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("triangle {tri} references node {index} but the mesh has {count} nodes")]
    IndexOutOfRange { tri: usize, index: usize, count: usize },
    #[error("triangle {0} has non-positive area")]
    Degenerate(usize),
    #[error("nodes {0} and {1} coincide")]
    DuplicateNode(usize, usize),
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifold(usize, usize),
    #[error("no connectivity: mesh has {0} nodes but no triangles")]
    NoConnectivity(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Interior,
    Boundary,
}

impl NodeKind {
    /// Two-component one-hot encoding: interior `(1, 0)`, boundary `(0, 1)`.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            NodeKind::Interior => [1.0, 0.0],
            NodeKind::Boundary => [0.0, 1.0],
        }
    }

    fn code(self) -> u8 {
        match self {
            NodeKind::Interior => 0,
            NodeKind::Boundary => 1,
        }
    }
}

/// Rectangle to be meshed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    /// Subdivisions per unit length.
    pub density: usize,
    /// Interior-node perturbation amplitude as a fraction of the cell width.
    pub jitter: f64,
    pub seed: u64,
}

impl DomainRect {
    pub fn unit_square(density: usize, jitter: f64, seed: u64) -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0, density, jitter, seed }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if !(self.x1 > self.x0 && self.y1 > self.y0) {
            return Err(MeshError::InvalidDomain(format!(
                "bounds must satisfy x1 > x0 and y1 > y0, got ({}, {}) .. ({}, {})",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        if self.density < 2 {
            return Err(MeshError::InvalidDomain(format!("density must be at least 2, got {}", self.density)));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(MeshError::InvalidDomain(format!("jitter must lie in [0, 0.5), got {}", self.jitter)));
        }
        Ok(())
    }

    fn cells(&self) -> (usize, usize) {
        let nx = ((self.x1 - self.x0) * self.density as f64).round().max(1.0) as usize;
        let ny = ((self.y1 - self.y0) * self.density as f64).round().max(1.0) as usize;
        (nx, ny)
    }

    /// Whether `p` lies on the rectangle perimeter within `tol`.
    pub fn on_perimeter(&self, p: [f64; 2], tol: f64) -> bool {
        (p[0] - self.x0).abs() <= tol
            || (p[0] - self.x1).abs() <= tol
            || (p[1] - self.y0).abs() <= tol
            || (p[1] - self.y1).abs() <= tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub node_kind: Vec<NodeKind>,
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Structured triangulation of `spec` with seeded jitter on interior lattice nodes.
///
/// Each cell is split along its shorter diagonal; if that produces a
/// non-positive triangle the other diagonal is used.
pub fn generate_mesh(spec: &DomainRect) -> Result<TriMesh, MeshError> {
    spec.validate()?;
    let (nx, ny) = spec.cells();
    let hx = (spec.x1 - spec.x0) / nx as f64;
    let hy = (spec.y1 - spec.y0) / ny as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = if i == nx { spec.x1 } else { spec.x0 + i as f64 * hx };
            let y = if j == ny { spec.y1 } else { spec.y0 + j as f64 * hy };
            let interior = i > 0 && i < nx && j > 0 && j < ny;
            if interior && spec.jitter > 0.0 {
                let dx = rng.random_range(-spec.jitter..spec.jitter) * hx;
                let dy = rng.random_range(-spec.jitter..spec.jitter) * hy;
                nodes.push([x + dx, y + dy]);
            } else {
                nodes.push([x, y]);
            }
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            // diagonal a-c splits into (a,b,c),(a,c,d); diagonal b-d into (a,b,d),(b,c,d)
            let ac = [[a, b, c], [a, c, d]];
            let bd = [[a, b, d], [b, c, d]];
            let positive = |tris: &[[usize; 3]; 2]| {
                tris.iter().all(|t| signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) > 0.0)
            };
            let prefer_ac = dist2(nodes[a], nodes[c]) <= dist2(nodes[b], nodes[d]);
            let (first, second) = if prefer_ac { (ac, bd) } else { (bd, ac) };
            let chosen = if positive(&first) {
                first
            } else if positive(&second) {
                second
            } else {
                return Err(MeshError::Degenerate(triangles.len()));
            };
            triangles.extend_from_slice(&chosen);
        }
    }
    let mut mesh = TriMesh { nodes, triangles, node_kind: Vec::new() };
    mesh.node_kind = detect_boundary(&mesh)?;
    Ok(mesh)
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Counts how many triangles contain each undirected edge, in first-seen order.
fn edge_triangle_counts(triangles: &[[usize; 3]]) -> Result<Vec<((usize, usize), u8)>, MeshError> {
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges: Vec<((usize, usize), u8)> = Vec::new();
    for t in triangles {
        for k in 0..3 {
            let key = edge_key(t[k], t[(k + 1) % 3]);
            match index.get(&key) {
                Some(&e) => {
                    edges[e].1 += 1;
                    if edges[e].1 > 2 {
                        return Err(MeshError::NonManifold(key.0, key.1));
                    }
                }
                None => {
                    index.insert(key, edges.len());
                    edges.push((key, 1));
                }
            }
        }
    }
    Ok(edges)
}

/// A node is a boundary node iff it ends an edge contained in exactly one triangle.
pub fn detect_boundary(mesh: &TriMesh) -> Result<Vec<NodeKind>, MeshError> {
    let mut kind = vec![NodeKind::Interior; mesh.nodes.len()];
    for ((a, b), count) in edge_triangle_counts(&mesh.triangles)? {
        if count == 1 {
            kind[a] = NodeKind::Boundary;
            kind[b] = NodeKind::Boundary;
        }
    }
    Ok(kind)
}

impl TriMesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.node_kind[i] == NodeKind::Boundary).collect()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.node_kind[i] == NodeKind::Interior).collect()
    }

    /// Checks indices, orientation, duplicates and boundary flags.
    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.nodes.len();
        if self.triangles.is_empty() {
            return Err(MeshError::NoConnectivity(n));
        }
        for (ti, t) in self.triangles.iter().enumerate() {
            for &v in t {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange { tri: ti, index: v, count: n });
                }
            }
            if signed_area(self.nodes[t[0]], self.nodes[t[1]], self.nodes[t[2]]) <= 0.0 {
                return Err(MeshError::Degenerate(ti));
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.nodes[a][0].total_cmp(&self.nodes[b][0]));
        for w in 0..n {
            let a = order[w];
            for &b in &order[w + 1..] {
                if self.nodes[b][0] - self.nodes[a][0] > DUPLICATE_TOL {
                    break;
                }
                if (self.nodes[b][1] - self.nodes[a][1]).abs() <= DUPLICATE_TOL {
                    return Err(MeshError::DuplicateNode(a.min(b), a.max(b)));
                }
            }
        }
        let kinds = detect_boundary(self)?;
        if self.node_kind.len() != n || kinds != self.node_kind {
            return Err(MeshError::Parse { line: 0, msg: "node kinds do not match mesh topology".into() });
        }
        Ok(())
    }

    /// Serialises in the `pignn-mesh v1` text format with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(64 * (self.nodes.len() + self.triangles.len()));
        let _ = writeln!(s, "{MESH_MAGIC}");
        let _ = writeln!(s, "{} {}", self.nodes.len(), self.triangles.len());
        for (p, k) in self.nodes.iter().zip(&self.node_kind) {
            let _ = writeln!(s, "{:.16e} {:.16e} {}", p[0], p[1], k.code());
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let perr = |line: usize, msg: String| MeshError::Parse { line, msg };
        let (ln, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        if header != MESH_MAGIC {
            return Err(perr(ln, format!("expected header `{MESH_MAGIC}`, found `{header}`")));
        }
        let (ln, counts) = lines.next().ok_or_else(|| perr(2, "missing count line".into()))?;
        let counts: Vec<&str> = counts.split_whitespace().collect();
        if counts.len() != 2 {
            return Err(perr(ln, "count line must be `<node_count> <tri_count>`".into()));
        }
        let node_count: usize = counts[0].parse().map_err(|_| perr(ln, format!("bad node count `{}`", counts[0])))?;
        let tri_count: usize = counts[1].parse().map_err(|_| perr(ln, format!("bad triangle count `{}`", counts[1])))?;
        let mut nodes = Vec::with_capacity(node_count);
        let mut node_kind = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            let (ln, l) = lines.next().ok_or_else(|| perr(0, "unexpected end of file in node section".into()))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(ln, "node line must be `x y kind`".into()));
            }
            let x: f64 = f[0].parse().map_err(|_| perr(ln, format!("bad coordinate `{}`", f[0])))?;
            let y: f64 = f[1].parse().map_err(|_| perr(ln, format!("bad coordinate `{}`", f[1])))?;
            let kind = match f[2] {
                "0" => NodeKind::Interior,
                "1" => NodeKind::Boundary,
                other => return Err(perr(ln, format!("bad node kind `{other}`"))),
            };
            nodes.push([x, y]);
            node_kind.push(kind);
        }
        if tri_count == 0 {
            return Err(MeshError::NoConnectivity(node_count));
        }
        let mut triangles = Vec::with_capacity(tri_count);
        for ti in 0..tri_count {
            let (ln, l) = lines.next().ok_or_else(|| perr(0, "unexpected end of file in triangle section".into()))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(ln, "triangle line must be `i j k`".into()));
            }
            let mut t = [0usize; 3];
            for k in 0..3 {
                t[k] = f[k].parse().map_err(|_| perr(ln, format!("bad index `{}`", f[k])))?;
                if t[k] >= node_count {
                    return Err(perr(ln, format!("triangle index {} out of range for {} nodes", t[k], node_count)));
                }
            }
            if signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) <= 0.0 {
                return Err(perr(ln, format!("triangle {ti} is degenerate or clockwise")));
            }
            triangles.push(t);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(perr(ln, "trailing content after triangle section".into()));
        }
        let mesh = TriMesh { nodes, triangles, node_kind };
        mesh.validate()?;
        Ok(mesh)
    }
}

pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    fs::write(path, mesh.to_text())?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    TriMesh::from_text(&fs::read_to_string(path)?)
}

/// Per-edge geometric features: sender-minus-receiver displacement and its length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeFeature {
    pub displacement: [f64; 2],
    pub distance: f64,
}

/// Directed graph on the mesh nodes; each mesh edge appears once in each direction.
#[derive(Clone, Debug)]
pub struct Graph {
    pub node_count: usize,
    /// `(sender, receiver)` pairs.
    pub edges: Vec<(usize, usize)>,
    /// Senders of the edges into each node, i.e. the one-ring neighbourhood.
    pub neighbors: Vec<Vec<usize>>,
    pub edge_features: Vec<EdgeFeature>,
}

impl Graph {
    pub fn senders(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn receivers(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

pub fn build_graph(mesh: &TriMesh) -> Result<Graph, MeshError> {
    let undirected = edge_triangle_counts(&mesh.triangles)?;
    let n = mesh.nodes.len();
    let mut edges = Vec::with_capacity(2 * undirected.len());
    let mut edge_features = Vec::with_capacity(2 * undirected.len());
    let mut neighbors = vec![Vec::new(); n];
    for ((a, b), _) in undirected {
        for (s, r) in [(a, b), (b, a)] {
            let xs = mesh.nodes[s];
            let xr = mesh.nodes[r];
            let displacement = [xs[0] - xr[0], xs[1] - xr[1]];
            let distance = displacement[0].hypot(displacement[1]);
            edges.push((s, r));
            edge_features.push(EdgeFeature { displacement, distance });
            neighbors[r].push(s);
        }
    }
    Ok(Graph { node_count: n, edges, neighbors, edge_features })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_triangle() -> TriMesh {
        let triangles = vec![[0, 1, 2]];
        let mut m = TriMesh { nodes: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], triangles, node_kind: vec![] };
        m.node_kind = detect_boundary(&m).unwrap();
        m
    }

    #[test]
    fn density_two_lattice() {
        let m = generate_mesh(&DomainRect::unit_square(2, 0.0, 0)).unwrap();
        assert_eq!(m.nodes.len(), 9);
        assert_eq!(m.triangles.len(), 8);
        assert_eq!(m.boundary_nodes().len(), 8);
        assert_eq!(m.interior_nodes(), vec![4]);
    }

    #[test]
    fn density_ten_perimeter() {
        let m = generate_mesh(&DomainRect::unit_square(10, 0.0, 0)).unwrap();
        assert_eq!(m.nodes.len(), 121);
        assert_eq!(m.boundary_nodes().len(), 40);
    }

    #[test]
    fn rejects_low_density_and_bad_jitter() {
        assert!(matches!(generate_mesh(&DomainRect::unit_square(1, 0.0, 0)), Err(MeshError::InvalidDomain(_))));
        assert!(generate_mesh(&DomainRect::unit_square(4, 0.5, 0)).is_err());
        let bad = DomainRect { x0: 1.0, ..DomainRect::unit_square(4, 0.0, 0) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn paper_density_node_count_differs() {
        // Structured lattice: density 100 gives 101^2 nodes rather than 15681.
        let (nx, ny) = DomainRect::unit_square(100, 0.0, 0).cells();
        assert_eq!((nx + 1) * (ny + 1), 10201);
    }

    #[test]
    fn jitter_keeps_boundary_fixed_and_is_seeded() {
        let spec = DomainRect::unit_square(8, 0.3, 11);
        let a = generate_mesh(&spec).unwrap();
        let b = generate_mesh(&spec).unwrap();
        assert_eq!(a, b);
        for i in a.boundary_nodes() {
            assert!(spec.on_perimeter(a.nodes[i], 0.0));
        }
        let c = generate_mesh(&DomainRect { seed: 12, ..spec }).unwrap();
        assert_ne!(a.nodes, c.nodes);
        a.validate().unwrap();
    }

    #[test]
    fn boundary_small_cases() {
        let m = single_triangle();
        assert!(m.node_kind.iter().all(|&k| k == NodeKind::Boundary));
        let two = TriMesh {
            nodes: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            node_kind: vec![],
        };
        assert!(detect_boundary(&two).unwrap().iter().all(|&k| k == NodeKind::Boundary));
    }

    #[test]
    fn non_manifold_edge_is_rejected() {
        let m = TriMesh {
            nodes: vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0], [0.5, -1.0], [0.5, 2.0]],
            triangles: vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]],
            node_kind: vec![],
        };
        assert!(matches!(detect_boundary(&m), Err(MeshError::NonManifold(0, 1))));
    }

    #[test]
    fn graph_of_single_triangle() {
        let g = build_graph(&single_triangle()).unwrap();
        assert_eq!(g.edge_count(), 6);
        let k = g.edges.iter().position(|&e| e == (1, 0)).unwrap();
        assert_eq!(g.edge_features[k], EdgeFeature { displacement: [1.0, 0.0], distance: 1.0 });
        let back = g.edges.iter().position(|&e| e == (0, 1)).unwrap();
        assert_eq!(g.edge_features[back].displacement, [-1.0, 0.0]);
        assert_eq!(g.edge_features[back].distance, 1.0);
    }

    #[test]
    fn text_roundtrip_and_errors() {
        let m = generate_mesh(&DomainRect::unit_square(5, 0.25, 3)).unwrap();
        let back = TriMesh::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);

        let bad = "pignn-mesh v1\n3 1\n0 0 1\n1 0 1\n0 1 1\n0 1 3\n";
        match TriMesh::from_text(bad) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
        let empty = "pignn-mesh v1\n3 0\n0 0 1\n1 0 1\n0 1 1\n";
        let err = TriMesh::from_text(empty).unwrap_err();
        assert!(err.to_string().contains("no connectivity"), "{err}");
        let header = "pignn-mesh v2\n";
        assert!(matches!(TriMesh::from_text(header), Err(MeshError::Parse { line: 1, .. })));
        let degenerate = "pignn-mesh v1\n3 1\n0 0 1\n1 0 1\n2 0 1\n0 1 2\n";
        assert!(matches!(TriMesh::from_text(degenerate), Err(MeshError::Parse { line: 6, .. })));
    }
}
