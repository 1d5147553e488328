//! Rollout inference, error metrics, the explicit FitzHugh-Nagumo reference
//! integrator, and CSV field export.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::loss::{apply_bc, build_node_features, initial_field, layout_for, Discretization, LossError};
use crate::model::{Model, ModelError};
use crate::pde::{PdeError, PdeKind, PdeSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("non-finite field at step {step}")]
    NonFinite { step: usize },
    #[error("explicit reference diverged at substep {substep} (max |u| = {norm:e})")]
    Unstable { substep: usize, norm: f64 },
    #[error("series mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("field file {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

/// Fields at times `t0 + k dt`, `k = 0..fields.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSeries {
    pub t0: f64,
    pub dt: f64,
    pub fields: Vec<Tensor>,
}

impl FieldSeries {
    pub fn steps(&self) -> usize {
        self.fields.len().saturating_sub(1)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt * k as f64
    }
}

/// Iterates the model from the initial condition, enforcing the boundary
/// condition after every step. `on_step` sees each new field as it is made.
pub fn rollout_with(
    model: &Model,
    spec: &PdeSpec,
    disc: &Discretization,
    steps: usize,
    dt: f64,
    t0: f64,
    mut on_step: impl FnMut(usize, &Tensor),
) -> Result<FieldSeries, EvalError> {
    let layout = model.layout;
    if layout.components != spec.components() || (layout.source && !spec.has_source()) {
        return Err(EvalError::Mismatch(format!("model layout {:?} does not fit pde {}", layout, spec.kind())));
    }
    let mut u = initial_field(spec, disc, t0);
    on_step(0, &u);
    let mut fields = vec![u.clone()];
    // Edge latents depend only on geometry and parameters.
    let mut et = Tape::new();
    let vars = model.record(&mut et, false);
    let net = model.bind(&vars)?;
    let ef = et.constant(disc.graph.edge_features.clone());
    let e = net.encode_edges(&mut et, ef)?;
    let edges = et.detach(e);
    for s in 0..steps {
        let t = t0 + dt * s as f64;
        let mut tape = Tape::new();
        let vars = model.record(&mut tape, false);
        let net = model.bind(&vars)?;
        let feats = build_node_features(&u, disc.kinds(), &disc.coords, spec, t, &layout)?;
        let fv = tape.constant(feats);
        let uv = tape.constant(u.clone());
        let ev = tape.constant(edges.clone());
        let next = net.step_with_edges(&mut tape, &disc.graph, uv, fv, ev)?;
        u = apply_bc(tape.value(next), spec, t0 + dt * (s + 1) as f64, disc);
        if !u.is_finite() {
            return Err(EvalError::NonFinite { step: s + 1 });
        }
        on_step(s + 1, &u);
        fields.push(u.clone());
    }
    Ok(FieldSeries { t0, dt, fields })
}

pub fn rollout(
    model: &Model,
    spec: &PdeSpec,
    disc: &Discretization,
    steps: usize,
    dt: f64,
    t0: f64,
) -> Result<FieldSeries, EvalError> {
    rollout_with(model, spec, disc, steps, dt, t0, |_, _| {})
}

/// Closed-form solution sampled on the nodes at the series' times.
pub fn analytic_series(spec: &PdeSpec, coords: &[[f64; 2]], steps: usize, dt: f64, t0: f64) -> Result<FieldSeries, EvalError> {
    let n = spec.components();
    let mut fields = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = t0 + dt * k as f64;
        let mut f = Tensor::zeros(coords.len(), n);
        for (i, p) in coords.iter().enumerate() {
            let v = spec
                .analytic(p[0], p[1], t)
                .ok_or_else(|| EvalError::Unsupported(format!("{} has no analytic solution", spec.kind())))?;
            f.row_mut(i).copy_from_slice(&v);
        }
        fields.push(f);
    }
    Ok(FieldSeries { t0, dt, fields })
}

pub fn abs_error(pred: &Tensor, truth: &Tensor) -> Result<Tensor, EvalError> {
    if pred.shape() != truth.shape() {
        return Err(EvalError::Mismatch(format!("shapes {:?} vs {:?}", pred.shape(), truth.shape())));
    }
    Ok(pred.zip_map(truth, |a, b| (a - b).abs()))
}

/// Accumulated RMSE curve over steps `1..=up_to`: entry `t - 1` is
/// `sqrt(sum_{k=1..t} sum_i |pred - truth|^2 / (N t))`. The initial field
/// (step 0) is not counted.
pub fn armse(pred: &FieldSeries, truth: &FieldSeries, up_to: usize) -> Result<Vec<f64>, EvalError> {
    if up_to > pred.steps() || up_to > truth.steps() {
        return Err(EvalError::Mismatch(format!(
            "requested {up_to} steps, series have {} and {}",
            pred.steps(),
            truth.steps()
        )));
    }
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(up_to);
    for k in 1..=up_to {
        let (p, q) = (&pred.fields[k], &truth.fields[k]);
        if p.shape() != q.shape() {
            return Err(EvalError::Mismatch(format!("step {k}: shapes {:?} vs {:?}", p.shape(), q.shape())));
        }
        acc += p.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        out.push((acc / (p.rows() * k) as f64).sqrt());
    }
    Ok(out)
}

pub fn armse_csv(curve: &[f64]) -> String {
    let mut s = String::from("step,armse\n");
    for (k, v) in curve.iter().enumerate() {
        s.push_str(&format!("{},{v:.17e}\n", k + 1));
    }
    s
}

/// Explicit-Euler reference for the FitzHugh-Nagumo system on the mesh,
/// using the same Laplacian stencils, `substeps` sub-steps per output step,
/// and boundary overwrite after every sub-step.
pub fn fn_reference(
    spec: &PdeSpec,
    disc: &Discretization,
    steps: usize,
    dt: f64,
    substeps: usize,
) -> Result<FieldSeries, EvalError> {
    if spec.kind() != PdeKind::FitzHughNagumo {
        return Err(EvalError::Unsupported("fn_reference needs the fn problem".into()));
    }
    let substeps = substeps.max(1);
    let h = dt / substeps as f64;
    let mut u = initial_field(spec, disc, 0.0);
    let start_norm = u.max_abs().max(1.0);
    let zero = Tensor::zeros(disc.node_count(), 2);
    let mut fields = vec![u.clone()];
    let mut count = 0;
    for s in 0..steps {
        for k in 0..substeps {
            let t = dt * s as f64 + h * k as f64;
            let lap = disc.ops.laplacian.apply(&u).map_err(LossError::from)?;
            let rhs = spec.eval_residual_terms(&u, &zero, &zero, &lap, &disc.coords, t)?;
            let mut next = u.clone();
            next.axpy(-h, &rhs);
            u = apply_bc(&next, spec, t + h, disc);
            count += 1;
            let norm = u.max_abs();
            if !norm.is_finite() || norm > 1e6 * start_norm {
                return Err(EvalError::Unstable { substep: count, norm });
            }
        }
        fields.push(u.clone());
    }
    Ok(FieldSeries { t0: 0.0, dt, fields })
}

/// Largest explicit-Euler step `h^2 / (4 gamma)` suggested for the FN reference.
pub fn fn_stable_dt(spec: &PdeSpec, disc: &Discretization) -> Option<f64> {
    let PdeSpec::FitzHughNagumo { gamma_u, gamma_v, .. } = *spec else { return None };
    let h = disc
        .mesh
        .triangles
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| {
            let (p, q) = (disc.coords[a], disc.coords[b]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    Some(h * h / (4.0 * gamma_u.max(gamma_v)))
}

fn step_file(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("step_{k:05}.csv"))
}

/// Writes `step_XXXXX.csv` (`node,x,y,u[,v]`) per field plus `meta.csv`.
pub fn export_fields(series: &FieldSeries, coords: &[[f64; 2]], names: &[&str], dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (k, f) in series.fields.iter().enumerate() {
        let path = step_file(dir, k);
        fs::write(&path, field_csv(f, coords, names)).map_err(io_err(&path))?;
    }
    let meta = dir.join("meta.csv");
    let text = format!("key,value\ndt,{:.17e}\nt0,{:.17e}\nsteps,{}\ncomponents,{}\n", series.dt, series.t0, series.steps(), names.len());
    fs::write(&meta, text).map_err(io_err(&meta))
}

pub fn field_csv(f: &Tensor, coords: &[[f64; 2]], names: &[&str]) -> String {
    let mut s = format!("node,x,y,{}\n", names.join(","));
    for (i, p) in coords.iter().enumerate() {
        s.push_str(&format!("{i},{:.17e},{:.17e}", p[0], p[1]));
        for c in 0..f.cols() {
            s.push_str(&format!(",{:.17e}", f.get(i, c)));
        }
        s.push('\n');
    }
    s
}

/// Reads a directory written by [`export_fields`].
pub fn import_fields(dir: &Path) -> Result<(FieldSeries, Vec<[f64; 2]>), EvalError> {
    let meta_path = dir.join("meta.csv");
    let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let bad = |msg: String| EvalError::Parse { path: meta_path.display().to_string(), msg };
    let mut dt = None;
    let mut t0 = None;
    let mut steps = None;
    for line in meta.lines().skip(1) {
        let Some((k, v)) = line.split_once(',') else { continue };
        match k {
            "dt" => dt = v.parse::<f64>().ok(),
            "t0" => t0 = v.parse::<f64>().ok(),
            "steps" => steps = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (dt, t0, steps) = match (dt, t0, steps) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad("missing dt, t0 or steps".into())),
    };
    let mut fields = Vec::with_capacity(steps + 1);
    let mut coords = Vec::new();
    for k in 0..=steps {
        let path = step_file(dir, k);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let perr = |msg: String| EvalError::Parse { path: path.display().to_string(), msg };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr("empty file".into()))?;
        let n = header.split(',').count().checked_sub(3).filter(|&n| n >= 1).ok_or_else(|| perr("bad header".into()))?;
        let mut rows = Vec::new();
        let mut xy = Vec::new();
        for (ln, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| perr(format!("line {}: {e}", ln + 2)))?;
            if vals.len() != 3 + n {
                return Err(perr(format!("line {}: expected {} fields", ln + 2, 3 + n)));
            }
            xy.push([vals[1], vals[2]]);
            rows.push(vals[3..].to_vec());
        }
        if k == 0 {
            coords = xy;
        }
        fields.push(Tensor::from_rows(&rows).map_err(|e| perr(e.to_string()))?);
    }
    Ok((FieldSeries { t0, dt, fields }, coords))
}

/// Convenience: rollout error curve against the closed-form solution.
pub fn analytic_armse(
    model: &Model,
    spec: &PdeSpec,
    disc: &Discretization,
    steps: usize,
    dt: f64,
) -> Result<Vec<f64>, EvalError> {
    let pred = rollout(model, spec, disc, steps, dt, 0.0)?;
    let truth = analytic_series(spec, &disc.coords, steps, dt, 0.0)?;
    armse(&pred, &truth, steps)
}

/// Layout check helper for callers that construct models by hand.
pub fn layout_matches(model: &Model, spec: &PdeSpec, source_feature: bool) -> bool {
    model.layout == layout_for(spec, source_feature)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(vals: &[f64]) -> FieldSeries {
        FieldSeries { t0: 0.0, dt: 0.1, fields: vals.iter().map(|&v| Tensor::filled(3, 1, v)).collect() }
    }

    #[test]
    fn abs_error_examples() {
        let a = Tensor::column(&[1.0, -2.0]);
        let b = Tensor::column(&[0.0, 1.0]);
        assert_eq!(abs_error(&a, &b).unwrap().data(), &[1.0, 3.0]);
        assert_eq!(abs_error(&a, &b).unwrap(), abs_error(&b, &a).unwrap());
        assert!(abs_error(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(abs_error(&a, &Tensor::zeros(3, 1)).is_err());
    }

    #[test]
    fn armse_examples() {
        let truth = series(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(armse(&truth, &truth, 3).unwrap(), vec![0.0; 3]);
        let off = series(&[0.0, 0.1, 0.1, 0.1]);
        for v in armse(&off, &truth, 3).unwrap() {
            assert!((v - 0.1).abs() < 1e-15);
        }
        let spike = series(&[0.0, 0.0, 1.0, 0.0]);
        let c = armse(&spike, &truth, 3).unwrap();
        assert_eq!(c[0], 0.0);
        assert!((c[1] - (0.5_f64).sqrt()).abs() < 1e-15);
        assert!((c[2] - (1.0_f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(armse(&off, &truth, 4).is_err());
    }

    #[test]
    fn armse_csv_format() {
        let s = armse_csv(&[0.5, 0.25]);
        assert!(s.starts_with("step,armse\n1,"));
        assert_eq!(s.lines().count(), 3);
    }
}
