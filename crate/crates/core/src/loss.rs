//! Boundary enforcement, node-feature assembly, implicit-Euler residuals and
//! the composite physics/data loss.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::mesh::{build_graph, MeshError, NodeKind, TriMesh};
use crate::model::{FeatureLayout, GraphIndex};
use crate::pde::{DiffOperators, PdeError, PdeSpec};
use crate::stencil::{
    build_gradient_stencils, build_laplacian_stencils, spacetime_weights, DegreePolicy, GradientStencil,
    LaplacianStencil, StencilError,
};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("feature layout mismatch: {0}")]
    Layout(String),
    #[error("observation {index}: {msg}")]
    Observation { index: usize, msg: String },
    #[error("observation file line {line}: {msg}")]
    ObservationParse { line: usize, msg: String },
    #[error("non-finite residual at node {node}")]
    NonFinite { node: usize },
    #[error("gamma must lie in [0, 1], got {0}")]
    Gamma(f64),
    #[error("empty residual set")]
    Empty,
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Stencil(#[from] StencilError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything derived from the mesh that stays fixed during training.
#[derive(Clone, Debug)]
pub struct Discretization {
    pub mesh: TriMesh,
    pub coords: Vec<[f64; 2]>,
    pub boundary: Rc<[usize]>,
    /// Collocation nodes: every interior node.
    pub interior: Rc<[usize]>,
    pub gradient: GradientStencil,
    pub laplacian: LaplacianStencil,
    pub ops: DiffOperators,
    pub graph: GraphIndex,
}

impl Discretization {
    pub fn new(mesh: &TriMesh, policy: DegreePolicy) -> Result<Self, LossError> {
        mesh.validate()?;
        let graph = build_graph(mesh)?;
        let gradient = build_gradient_stencils(&graph, &mesh.nodes)?;
        let laplacian = build_laplacian_stencils(&graph, &mesh.nodes, policy)?;
        let (dx, dy) = gradient.operators();
        let ops = DiffOperators { dx, dy, laplacian: laplacian.operator() };
        let interior: Rc<[usize]> = mesh.interior_nodes().into();
        if interior.is_empty() {
            return Err(LossError::Empty);
        }
        Ok(Self {
            coords: mesh.nodes.clone(),
            boundary: mesh.boundary_nodes().into(),
            interior,
            gradient,
            laplacian,
            ops,
            graph: GraphIndex::new(&graph),
            mesh: mesh.clone(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.mesh.node_kind
    }
}

/// Feature layout implied by a problem, optionally without the source block.
pub fn layout_for(spec: &PdeSpec, source_feature: bool) -> FeatureLayout {
    FeatureLayout { components: spec.components(), source: spec.has_source() && source_feature }
}

/// Initial field `i(x)` with boundary rows set to `b(x, t0)`.
pub fn initial_field(spec: &PdeSpec, disc: &Discretization, t0: f64) -> Tensor {
    let n = spec.components();
    let mut u = Tensor::from_fn(disc.node_count(), n, |_, _| 0.0);
    for (i, p) in disc.coords.iter().enumerate() {
        u.row_mut(i).copy_from_slice(&spec.initial(p[0], p[1]));
    }
    apply_bc(&u, spec, t0, disc)
}

/// Rows `[u | one-hot kind | f(x, t)]`.
pub fn build_node_features(
    u: &Tensor,
    kinds: &[NodeKind],
    coords: &[[f64; 2]],
    spec: &PdeSpec,
    t: f64,
    layout: &FeatureLayout,
) -> Result<Tensor, LossError> {
    let n = spec.components();
    if layout.components != n || u.cols() != n || u.rows() != kinds.len() || coords.len() != kinds.len() {
        return Err(LossError::Layout(format!(
            "field {}x{}, layout expects {} components over {} nodes",
            u.rows(),
            u.cols(),
            layout.components,
            kinds.len()
        )));
    }
    if layout.source && !spec.has_source() {
        return Err(LossError::Layout(format!("{} has no source term", spec.kind())));
    }
    let width = layout.node_width();
    let mut out = Tensor::zeros(u.rows(), width);
    for i in 0..u.rows() {
        let row = out.row_mut(i);
        row[..n].copy_from_slice(u.row(i));
        row[n..n + 2].copy_from_slice(&kinds[i].one_hot());
        if layout.source {
            let f = spec.source(coords[i][0], coords[i][1], t);
            row[n + 2..].copy_from_slice(&f);
        }
    }
    Ok(out)
}

/// Taped node features. The source block follows `lambda` when the problem
/// has a trainable coefficient, so its gradient reaches the coefficient.
#[allow(clippy::too_many_arguments)]
pub fn node_features_var(
    tape: &mut Tape,
    u: &Tensor,
    disc: &Discretization,
    spec: &PdeSpec,
    t: f64,
    layout: &FeatureLayout,
    lambda: Option<Var>,
) -> Result<Var, LossError> {
    if !layout.source || lambda.is_none() {
        let f = build_node_features(u, disc.kinds(), &disc.coords, spec, t, layout)?;
        return Ok(tape.constant(f));
    }
    let base = FeatureLayout { source: false, ..*layout };
    let head = build_node_features(u, disc.kinds(), &disc.coords, spec, t, &base)?;
    let head = tape.constant(head);
    let src = spec.source_var(tape, &disc.coords, t, lambda)?;
    Ok(tape.concat_columns(&[head, src])?)
}

fn boundary_values(spec: &PdeSpec, t: f64, disc: &Discretization) -> Tensor {
    let n = spec.components();
    let mut vals = Tensor::zeros(disc.boundary.len(), n);
    for (k, &i) in disc.boundary.iter().enumerate() {
        let p = disc.coords[i];
        vals.row_mut(k).copy_from_slice(&spec.boundary(p[0], p[1], t));
    }
    vals
}

/// Overwrites boundary rows with `b(x, t)`; interior rows are untouched.
pub fn apply_bc(u: &Tensor, spec: &PdeSpec, t: f64, disc: &Discretization) -> Tensor {
    let mut out = u.clone();
    let vals = boundary_values(spec, t, disc);
    for (k, &i) in disc.boundary.iter().enumerate() {
        out.row_mut(i).copy_from_slice(vals.row(k));
    }
    out
}

/// Taped boundary overwrite: boundary rows carry no gradient.
pub fn apply_bc_var(tape: &mut Tape, u: Var, spec: &PdeSpec, t: f64, disc: &Discretization) -> Result<Var, LossError> {
    let vals = boundary_values(spec, t, disc);
    Ok(tape.overwrite_rows(u, disc.boundary.clone(), &vals)?)
}

/// Implicit-Euler residual at the collocation nodes:
/// `(u_next - u_t) / dt + F[u_next] - f(x, t + dt)`.
///
/// `u_next` must already carry the boundary values; `t` is the time of `u_t`.
#[allow(clippy::too_many_arguments)]
pub fn pde_residual(
    tape: &mut Tape,
    u_t: &Tensor,
    u_next: Var,
    dt: f64,
    t: f64,
    disc: &Discretization,
    spec: &PdeSpec,
    lambda: Option<Var>,
) -> Result<Var, LossError> {
    let prev = tape.constant(u_t.clone());
    let diff = tape.sub(u_next, prev)?;
    let rate = tape.scale(diff, 1.0 / dt)?;
    let spatial = spec.spatial_terms(tape, u_next, &disc.ops, &disc.coords, t + dt, lambda)?;
    let full = tape.add(rate, spatial)?;
    let r = tape.gather_rows(full, disc.interior.clone())?;
    if let Some(k) = tape.value(r).data().iter().position(|v| !v.is_finite()) {
        let n = tape.value(r).cols();
        return Err(LossError::NonFinite { node: disc.interior[k / n] });
    }
    Ok(r)
}

/// Residual values without gradient bookkeeping.
pub fn pde_residual_values(
    u_t: &Tensor,
    u_next: &Tensor,
    dt: f64,
    t: f64,
    disc: &Discretization,
    spec: &PdeSpec,
) -> Result<Tensor, LossError> {
    let mut tape = Tape::new();
    let un = tape.constant(u_next.clone());
    let r = pde_residual(&mut tape, u_t, un, dt, t, disc, spec, None)?;
    Ok(tape.detach(r))
}

/// Mean of squared residuals over nodes, components and steps.
pub fn pde_loss(residuals: &[Tensor]) -> Result<f64, LossError> {
    let count: usize = residuals.iter().map(Tensor::len).sum();
    if count == 0 {
        return Err(LossError::Empty);
    }
    Ok(residuals.iter().flat_map(|r| r.data()).map(|v| v * v).sum::<f64>() / count as f64)
}

/// `(1 - gamma) L_pde + gamma L_data`.
pub fn total_loss(pde: f64, data: f64, gamma: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(LossError::Gamma(gamma));
    }
    Ok((1.0 - gamma) * pde + gamma * data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub x: [f64; 2],
    pub t: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationSet {
    pub records: Vec<Observation>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self, components: usize) -> String {
        let mut s = String::from(if components == 1 { "x,y,t,u\n" } else { "x,y,t,u,v\n" });
        for o in &self.records {
            s.push_str(&format!("{:.17e},{:.17e},{:.17e}", o.x[0], o.x[1], o.t));
            for v in &o.values {
                s.push_str(&format!(",{v:.17e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, LossError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(LossError::ObservationParse { line: 1, msg: "empty file".into() })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let n = match cols.as_slice() {
            ["x", "y", "t", "u"] => 1,
            ["x", "y", "t", "u", "v"] => 2,
            _ => return Err(LossError::ObservationParse { line: 1, msg: format!("bad header '{header}'") }),
        };
        let mut records = Vec::new();
        for (idx, line) in lines {
            let vals: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| LossError::ObservationParse { line: idx + 1, msg: e.to_string() })?;
            if vals.len() != 3 + n {
                return Err(LossError::ObservationParse {
                    line: idx + 1,
                    msg: format!("expected {} fields, got {}", 3 + n, vals.len()),
                });
            }
            records.push(Observation { x: [vals[0], vals[1]], t: vals[2], values: vals[3..].to_vec() });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>, components: usize) -> Result<(), LossError> {
        Ok(fs::write(path, self.to_csv(components))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LossError> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// Linear map from a rollout (fields at `t0 + s dt`, `s = 0..=steps`) to
/// predictions at the observation points.
#[derive(Clone, Debug)]
pub struct ObservationOperator {
    /// Per observation: `(step, node, weight)` entries.
    pub entries: Vec<Vec<(usize, usize, f64)>>,
    pub targets: Vec<Vec<f64>>,
}

const COINCIDENT: f64 = 1e-12;

impl ObservationOperator {
    /// Exact node/step hits read the field directly; all other points use the
    /// space-time least-squares interpolant over the `l` nearest nodes.
    pub fn new(
        obs: &ObservationSet,
        coords: &[[f64; 2]],
        t0: f64,
        dt: f64,
        steps: usize,
        l: usize,
    ) -> Result<Self, LossError> {
        let t_end = t0 + dt * steps as f64;
        let mut entries = Vec::with_capacity(obs.len());
        for (index, o) in obs.records.iter().enumerate() {
            let tol = COINCIDENT * t_end.abs().max(1.0);
            if o.t < t0 - tol || o.t > t_end + tol {
                return Err(LossError::Observation {
                    index,
                    msg: format!("time {} outside the rollout horizon [{t0}, {t_end}]", o.t),
                });
            }
            if steps == 0 {
                return Err(LossError::Observation { index, msg: "rollout has no steps".into() });
            }
            let pos = (o.t - t0) / dt;
            let nearest = pos.round();
            let node_hit = coords
                .iter()
                .position(|p| (p[0] - o.x[0]).abs() <= COINCIDENT && (p[1] - o.x[1]).abs() <= COINCIDENT);
            if let Some(node) = node_hit {
                if (pos - nearest).abs() * dt <= tol {
                    entries.push(vec![(nearest as usize, node, 1.0)]);
                    continue;
                }
            }
            let p = (pos.floor().max(0.0) as usize).min(steps - 1);
            let (tp, tn) = (t0 + dt * p as f64, t0 + dt * (p + 1) as f64);
            let td = o.t.clamp(tp, tn);
            let w = spacetime_weights(coords, tp, tn, o.x, td, l)
                .map_err(|e| LossError::Observation { index, msg: e.to_string() })?;
            let (nodes, vw) = w.value_weights();
            let mut e = Vec::with_capacity(vw.len());
            for (k, &wk) in vw.iter().enumerate() {
                let (step, node) = if k < nodes.len() { (p, nodes[k]) } else { (p + 1, nodes[k - nodes.len()]) };
                e.push((step, node, wk));
            }
            entries.push(e);
        }
        Ok(Self { entries, targets: obs.records.iter().map(|o| o.values.clone()).collect() })
    }

    pub fn predict(&self, fields: &[Tensor]) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| {
                let n = fields[0].cols();
                let mut v = vec![0.0; n];
                for &(s, i, w) in e {
                    for (c, vc) in v.iter_mut().enumerate() {
                        *vc += w * fields[s].get(i, c);
                    }
                }
                v
            })
            .collect()
    }

    /// Mean squared misfit and its gradient with respect to every field.
    pub fn loss_and_grad(&self, fields: &[Tensor]) -> (f64, Vec<Tensor>) {
        let preds = self.predict(fields);
        let n = fields[0].cols();
        let count = (self.entries.len() * n).max(1) as f64;
        let mut grads: Vec<Tensor> = fields.iter().map(|f| Tensor::zeros(f.rows(), f.cols())).collect();
        let mut loss = 0.0;
        for ((e, p), y) in self.entries.iter().zip(&preds).zip(&self.targets) {
            for c in 0..n {
                let r = p[c] - y[c];
                loss += r * r;
                for &(s, i, w) in e {
                    let g = grads[s].get(i, c) + 2.0 * r * w / count;
                    grads[s].set(i, c, g);
                }
            }
        }
        (loss / count, grads)
    }
}

/// Data loss of a rollout against observations (interpolation width `l`).
pub fn data_loss(
    fields: &[Tensor],
    obs: &ObservationSet,
    coords: &[[f64; 2]],
    t0: f64,
    dt: f64,
    l: usize,
) -> Result<f64, LossError> {
    let op = ObservationOperator::new(obs, coords, t0, dt, fields.len().saturating_sub(1), l)?;
    Ok(op.loss_and_grad(fields).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_mesh, DomainRect};
    use crate::pde::{PdeKind, PdeSpec};

    fn disc(density: usize) -> Discretization {
        let m = generate_mesh(&DomainRect::unit_square(density, 0.1, 5)).unwrap();
        Discretization::new(&m, DegreePolicy::Auto).unwrap()
    }

    #[test]
    fn feature_widths() {
        let d = disc(4);
        let heat = PdeSpec::default_for(PdeKind::Heat);
        let u = initial_field(&heat, &d, 0.0);
        let f = build_node_features(&u, d.kinds(), &d.coords, &heat, 0.0, &layout_for(&heat, true)).unwrap();
        assert_eq!(f.cols(), 4);
        let b = PdeSpec::default_for(PdeKind::Burgers);
        let u = initial_field(&b, &d, 0.0);
        let f = build_node_features(&u, d.kinds(), &d.coords, &b, 0.0, &layout_for(&b, true)).unwrap();
        assert_eq!(f.cols(), 4);
        for i in 0..d.node_count() {
            let expect = if d.kinds()[i] == NodeKind::Boundary { [0.0, 1.0] } else { [1.0, 0.0] };
            assert_eq!(&f.row(i)[2..4], &expect);
        }
        let bad = FeatureLayout { components: 2, source: true };
        assert!(build_node_features(&u, d.kinds(), &d.coords, &b, 0.0, &bad).is_err());
    }

    #[test]
    fn bc_overwrite() {
        let d = disc(4);
        let fnp = PdeSpec::default_for(PdeKind::FitzHughNagumo);
        let u = Tensor::filled(d.node_count(), 2, 3.0);
        let v = apply_bc(&u, &fnp, 0.2, &d);
        for i in 0..d.node_count() {
            let expect = if d.kinds()[i] == NodeKind::Boundary { 0.0 } else { 3.0 };
            assert_eq!(v.row(i), &[expect, expect]);
        }
        assert_eq!(apply_bc(&v, &fnp, 0.2, &d), v);
        let heat = PdeSpec::default_for(PdeKind::Heat);
        let w = apply_bc(&Tensor::zeros(d.node_count(), 1), &heat, 0.5, &d);
        for &i in d.boundary.iter() {
            let [x, y] = d.coords[i];
            let e = 4.0 * (2.0 * std::f64::consts::PI * (x - 0.3) * 0.5 + 0.5 * y * y).sin();
            assert_eq!(w.get(i, 0), e);
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(pde_loss(&[Tensor::zeros(3, 1)]).unwrap(), 0.0);
        assert_eq!(pde_loss(&[Tensor::scalar(-3.0)]).unwrap(), 9.0);
        assert_eq!(pde_loss(&[Tensor::filled(2, 2, 1.0)]).unwrap(), 1.0);
        assert!(pde_loss(&[]).is_err());
        assert_eq!(total_loss(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, 4.0, 1.0).unwrap(), 4.0);
        assert_eq!(total_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!(total_loss(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn time_term_ignores_constant_shift() {
        let d = disc(4);
        let heat = PdeSpec::default_for(PdeKind::Heat);
        let u0 = initial_field(&heat, &d, 0.0);
        let u1 = apply_bc(&u0.map(|v| v * 1.01), &heat, 1e-3, &d);
        let r = pde_residual_values(&u0, &u1, 1e-3, 0.0, &d, &heat).unwrap();
        let shift = |u: &Tensor| u.map(|v| v + 2.0);
        let r2 = pde_residual_values(&shift(&u0), &shift(&u1), 1e-3, 0.0, &d, &heat).unwrap();
        for (a, b) in r.data().iter().zip(r2.data()) {
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
        assert_eq!(r.rows(), d.interior.len());
    }

    #[test]
    fn observation_csv_roundtrip() {
        let set = ObservationSet {
            records: vec![
                Observation { x: [0.1, 0.2], t: 0.3, values: vec![0.4] },
                Observation { x: [1.0 / 3.0, 0.7], t: 1e-4, values: vec![-2.5] },
            ],
        };
        let back = ObservationSet::from_csv(&set.to_csv(1)).unwrap();
        assert_eq!(back, set);
        assert!(ObservationSet::from_csv("x,y,u\n1,2,3\n").is_err());
        assert!(ObservationSet::from_csv("x,y,t,u\n1,2,3\n").is_err());
    }

    #[test]
    fn data_loss_examples() {
        let d = disc(5);
        let fields: Vec<Tensor> = (0..4).map(|s| Tensor::from_fn(d.node_count(), 1, |i, _| (i as f64 * 0.37 + s as f64).sin())).collect();
        let dt = 0.1;
        let mut exact = ObservationSet::default();
        let mut offset = ObservationSet::default();
        for s in 0..4 {
            for i in (0..d.node_count()).step_by(3) {
                let y = fields[s].get(i, 0);
                exact.records.push(Observation { x: d.coords[i], t: dt * s as f64, values: vec![y] });
                offset.records.push(Observation { x: d.coords[i], t: dt * s as f64, values: vec![y + 0.1] });
            }
        }
        assert!(data_loss(&fields, &exact, &d.coords, 0.0, dt, 6).unwrap() < 1e-20);
        assert!((data_loss(&fields, &offset, &d.coords, 0.0, dt, 6).unwrap() - 0.01).abs() < 1e-12);
        let late = ObservationSet { records: vec![Observation { x: [0.5, 0.5], t: 0.5, values: vec![0.0] }] };
        assert!(data_loss(&fields, &late, &d.coords, 0.0, dt, 6).is_err());
    }

    #[test]
    fn interpolated_observation_gradient() {
        let d = disc(5);
        let fields: Vec<Tensor> = (0..3).map(|s| Tensor::from_fn(d.node_count(), 1, |i, _| (i as f64 * 0.1 - s as f64).cos())).collect();
        let obs = ObservationSet { records: vec![Observation { x: [0.43, 0.61], t: 0.137, values: vec![0.2] }] };
        let op = ObservationOperator::new(&obs, &d.coords, 0.0, 0.1, 2, 6).unwrap();
        let (l0, g) = op.loss_and_grad(&fields);
        for &(s, i, _) in &op.entries[0] {
            let mut f = fields.clone();
            let h = 1e-6;
            let v = f[s].get(i, 0);
            f[s].set(i, 0, v + h);
            let lp = op.loss_and_grad(&f).0;
            f[s].set(i, 0, v - h);
            let lm = op.loss_and_grad(&f).0;
            assert!(((lp - lm) / (2.0 * h) - g[s].get(i, 0)).abs() < 1e-8);
        }
        assert!(l0 > 0.0);
    }
}
