//! C interface to the solver.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `pignn_*_new`/`load`/`generate` call and released by the matching
//! `pignn_*_free`. Functions return a [`PignnStatus`]; on failure the message
//! is available from [`pignn_last_error`] until the next call on the same
//! thread. Handles are not thread-safe; use each from one thread at a time.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pignn::eval::{analytic_series, armse, rollout, FieldSeries};
use pignn::loss::Discretization;
use pignn::mesh::{generate_mesh, load_mesh, save_mesh, DomainRect, TriMesh};
use pignn::model::Model;
use pignn::pde::{parse_spec, PdeSpec};
use pignn::stencil::DegreePolicy;
use pignn::train::{Checkpoint, TrainConfig, Trainer};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PignnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Triangular mesh with boundary flags.
pub struct PignnMesh {
    mesh: TriMesh,
}

/// Trained (or initialised) model bound to a problem and its mesh.
pub struct PignnSolver {
    model: Model,
    spec: PdeSpec,
    disc: Discretization,
    config: TrainConfig,
    checkpoint: Option<Checkpoint>,
}

/// Sequence of node fields at equally spaced times.
pub struct PignnSeries {
    series: FieldSeries,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(PignnStatus, String);

type Res<T> = Result<T, Failure>;

fn fail<T>(status: PignnStatus, msg: impl Into<String>) -> Res<T> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Res<()>) -> PignnStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PignnStatus::Ok,
        Ok(Err(Failure(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            PignnStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return fail(PignnStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(PignnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Res<&'a T> {
    p.as_ref().map_or_else(|| fail(PignnStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    p.as_mut().map_or_else(|| fail(PignnStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Res<()> {
    if buf.is_null() {
        return fail(PignnStatus::NullPointer, "output buffer is null");
    }
    if len < src.len() {
        return fail(PignnStatus::BufferTooSmall, format!("buffer holds {len} values, {} needed", src.len()));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

fn format_err(e: impl std::fmt::Display) -> Failure {
    Failure(PignnStatus::Format, e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure(PignnStatus::InvalidArgument, e.to_string())
}

fn numerical(e: impl std::fmt::Display) -> Failure {
    Failure(PignnStatus::Numerical, e.to_string())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn pignn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pignn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a jittered mesh of the rectangle `[x0, x1] x [y0, y1]`.
#[no_mangle]
pub unsafe extern "C" fn pignn_mesh_generate(
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    density: usize,
    jitter: f64,
    seed: u64,
    out: *mut *mut PignnMesh,
) -> PignnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mesh = generate_mesh(&DomainRect { x0, y0, x1, y1, density, jitter, seed }).map_err(invalid)?;
        *out = Box::into_raw(Box::new(PignnMesh { mesh }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pignn_mesh_load(path: *const c_char, out: *mut *mut PignnMesh) -> PignnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let mesh = load_mesh(&path).map_err(|e| match e {
            pignn::mesh::MeshError::Io(_) => Failure(PignnStatus::Io, e.to_string()),
            _ => format_err(e),
        })?;
        *out = Box::into_raw(Box::new(PignnMesh { mesh }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pignn_mesh_save(mesh: *const PignnMesh, path: *const c_char) -> PignnStatus {
    guard(|| {
        let m = obj(mesh, "mesh")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_mesh(&m.mesh, &path).map_err(|e| Failure(PignnStatus::Io, e.to_string()))
    })
}

#[no_mangle]
pub unsafe extern "C" fn pignn_mesh_node_count(mesh: *const PignnMesh, out: *mut usize) -> PignnStatus {
    guard(|| {
        *out_ptr(out, "out")? = obj(mesh, "mesh")?.mesh.nodes.len();
        Ok(())
    })
}

/// Copies node coordinates as `x0, y0, x1, y1, ...` (`2 * node_count` values).
#[no_mangle]
pub unsafe extern "C" fn pignn_mesh_coordinates(mesh: *const PignnMesh, buf: *mut f64, len: usize) -> PignnStatus {
    guard(|| {
        let m = obj(mesh, "mesh")?;
        let flat: Vec<f64> = m.mesh.nodes.iter().flat_map(|p| [p[0], p[1]]).collect();
        copy_out(&flat, buf, len)
    })
}

/// Copies boundary flags (1 boundary, 0 interior) into `buf` (`node_count` bytes).
#[no_mangle]
pub unsafe extern "C" fn pignn_mesh_boundary_flags(mesh: *const PignnMesh, buf: *mut u8, len: usize) -> PignnStatus {
    guard(|| {
        let m = obj(mesh, "mesh")?;
        let n = m.mesh.nodes.len();
        if buf.is_null() {
            return fail(PignnStatus::NullPointer, "output buffer is null");
        }
        if len < n {
            return fail(PignnStatus::BufferTooSmall, format!("buffer holds {len} flags, {n} needed"));
        }
        for (i, k) in m.mesh.node_kind.iter().enumerate() {
            *buf.add(i) = u8::from(*k == pignn::mesh::NodeKind::Boundary);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pignn_mesh_free(mesh: *mut PignnMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Loads a training checkpoint; inference uses the best-loss parameters.
#[no_mangle]
pub unsafe extern "C" fn pignn_solver_load(path: *const c_char, out: *mut *mut PignnSolver) -> PignnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let ck = Checkpoint::load(&path).map_err(|e| match e {
            pignn::train::TrainError::Io { .. } => Failure(PignnStatus::Io, e.to_string()),
            _ => format_err(e),
        })?;
        let c = ck.contents().map_err(format_err)?;
        let disc = Discretization::new(&c.mesh, DegreePolicy::Auto).map_err(numerical)?;
        let solver = PignnSolver { model: c.best_model(), spec: c.best_spec(), disc, config: c.config.clone(), checkpoint: Some(ck) };
        *out = Box::into_raw(Box::new(solver));
        Ok(())
    })
}

/// Trains a forward model for `pde` (`heat`, `burgers`, `fn`) on `mesh`.
/// `latent` 0 keeps the default width.
#[no_mangle]
pub unsafe extern "C" fn pignn_solver_train(
    pde: *const c_char,
    mesh: *const PignnMesh,
    epochs: usize,
    steps: usize,
    dt: f64,
    latent: usize,
    seed: u64,
    out: *mut *mut PignnSolver,
) -> PignnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let key = str_arg(pde, "pde")?;
        let m = obj(mesh, "mesh")?;
        let spec = parse_spec(key, &[]).map_err(invalid)?;
        if spec.lambda().is_some() {
            return fail(PignnStatus::InvalidArgument, format!("{key} needs observations; train it from the command line"));
        }
        let mut config = TrainConfig::for_pde(spec.kind());
        config.epochs = epochs;
        config.steps = steps;
        config.dt = dt;
        config.seed = seed;
        if latent > 0 {
            config.model.latent = latent;
            config.model.hidden = vec![latent; config.model.hidden.len()];
        }
        let disc = Discretization::new(&m.mesh, DegreePolicy::Auto).map_err(numerical)?;
        let (model, ck) = {
            let mut t = Trainer::new(spec.clone(), &disc, config.clone(), None).map_err(invalid)?;
            t.train().map_err(numerical)?;
            (t.best_model(), t.to_checkpoint())
        };
        *out = Box::into_raw(Box::new(PignnSolver { model, spec, disc, config, checkpoint: Some(ck) }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pignn_solver_save(solver: *const PignnSolver, path: *const c_char) -> PignnStatus {
    guard(|| {
        let s = obj(solver, "solver")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        match &s.checkpoint {
            Some(c) => c.save(&path).map_err(|e| Failure(PignnStatus::Io, e.to_string())),
            None => fail(PignnStatus::InvalidArgument, "solver has no checkpoint state"),
        }
    })
}

/// Node count, solution components, and training step size.
#[no_mangle]
pub unsafe extern "C" fn pignn_solver_info(
    solver: *const PignnSolver,
    node_count: *mut usize,
    components: *mut usize,
    dt: *mut f64,
) -> PignnStatus {
    guard(|| {
        let s = obj(solver, "solver")?;
        *out_ptr(node_count, "node_count")? = s.disc.node_count();
        *out_ptr(components, "components")? = s.spec.components();
        *out_ptr(dt, "dt")? = s.config.dt;
        Ok(())
    })
}

/// Identified coefficient of an inverse model; `InvalidArgument` otherwise.
#[no_mangle]
pub unsafe extern "C" fn pignn_solver_lambda(solver: *const PignnSolver, out: *mut f64) -> PignnStatus {
    guard(|| {
        let s = obj(solver, "solver")?;
        match s.spec.lambda() {
            Some(k) => {
                *out_ptr(out, "out")? = k;
                Ok(())
            }
            None => fail(PignnStatus::InvalidArgument, "problem has no trainable coefficient"),
        }
    })
}

/// Rolls the model `steps` steps of size `dt` (`dt <= 0`: training step size).
#[no_mangle]
pub unsafe extern "C" fn pignn_solver_rollout(
    solver: *const PignnSolver,
    steps: usize,
    dt: f64,
    out: *mut *mut PignnSeries,
) -> PignnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = obj(solver, "solver")?;
        let dt = if dt > 0.0 { dt } else { s.config.dt };
        let series = rollout(&s.model, &s.spec, &s.disc, steps, dt, s.config.t0).map_err(numerical)?;
        *out = Box::into_raw(Box::new(PignnSeries { series }));
        Ok(())
    })
}

/// Closed-form solution of `pde` on the solver's mesh at the rollout times.
#[no_mangle]
pub unsafe extern "C" fn pignn_solver_analytic(
    solver: *const PignnSolver,
    steps: usize,
    dt: f64,
    out: *mut *mut PignnSeries,
) -> PignnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = obj(solver, "solver")?;
        let dt = if dt > 0.0 { dt } else { s.config.dt };
        let mut spec = s.spec.clone();
        if let PdeSpec::HeatInverse { k, k_boundary } = &mut spec {
            *k = *k_boundary;
        }
        let series = analytic_series(&spec, &s.disc.coords, steps, dt, s.config.t0).map_err(invalid)?;
        *out = Box::into_raw(Box::new(PignnSeries { series }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pignn_solver_free(solver: *mut PignnSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

/// Number of steps after the initial field, node count and components.
#[no_mangle]
pub unsafe extern "C" fn pignn_series_shape(
    series: *const PignnSeries,
    steps: *mut usize,
    node_count: *mut usize,
    components: *mut usize,
) -> PignnStatus {
    guard(|| {
        let s = &obj(series, "series")?.series;
        *out_ptr(steps, "steps")? = s.steps();
        let (r, c) = s.fields.first().map_or((0, 0), |f| f.shape());
        *out_ptr(node_count, "node_count")? = r;
        *out_ptr(components, "components")? = c;
        Ok(())
    })
}

/// Copies field `step` row-major (`node_count * components` values).
#[no_mangle]
pub unsafe extern "C" fn pignn_series_field(series: *const PignnSeries, step: usize, buf: *mut f64, len: usize) -> PignnStatus {
    guard(|| {
        let s = &obj(series, "series")?.series;
        match s.fields.get(step) {
            Some(f) => copy_out(f.data(), buf, len),
            None => fail(PignnStatus::InvalidArgument, format!("step {step} beyond {}", s.steps())),
        }
    })
}

/// aRMSE curve for steps `1..=up_to` into `buf` (`up_to` values).
#[no_mangle]
pub unsafe extern "C" fn pignn_armse(
    pred: *const PignnSeries,
    truth: *const PignnSeries,
    up_to: usize,
    buf: *mut f64,
    len: usize,
) -> PignnStatus {
    guard(|| {
        let p = &obj(pred, "pred")?.series;
        let t = &obj(truth, "truth")?.series;
        let curve = armse(p, t, up_to).map_err(invalid)?;
        copy_out(&curve, buf, len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn pignn_series_free(series: *mut PignnSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}
