//! The four benchmark problems: residual functionals, sources, boundary and
//! initial data, and closed-form solutions where they exist.
//!
//! Residual convention: `R = du/dt + F[u] - f`. Spatial terms come either as
//! precomputed arrays ([`PdeSpec::eval_residual_terms`]) or as sparse operators
//! recorded on a tape ([`PdeSpec::spatial_terms`]).

use std::f64::consts::PI;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{SparseMatrix, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum PdeError {
    #[error("unknown pde '{0}' (expected heat, burgers, fn or heat_inverse)")]
    UnknownPde(String),
    #[error("pde '{pde}' has no parameter '{name}'")]
    UnknownParameter { pde: &'static str, name: String },
    #[error("invalid value {value} for parameter '{name}': {reason}")]
    InvalidParameter { name: String, value: f64, reason: &'static str },
    #[error("non-finite residual at node {0}")]
    NonFinite(usize),
    #[error("{what}: expected {expected} rows/components, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdeKind {
    Heat,
    Burgers,
    FitzHughNagumo,
    HeatInverse,
}

impl PdeKind {
    pub fn key(self) -> &'static str {
        match self {
            PdeKind::Heat => "heat",
            PdeKind::Burgers => "burgers",
            PdeKind::FitzHughNagumo => "fn",
            PdeKind::HeatInverse => "heat_inverse",
        }
    }
}

impl fmt::Display for PdeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for PdeKind {
    type Err = PdeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "heat" => Ok(PdeKind::Heat),
            "burgers" => Ok(PdeKind::Burgers),
            "fn" => Ok(PdeKind::FitzHughNagumo),
            "heat_inverse" => Ok(PdeKind::HeatInverse),
            other => Err(PdeError::UnknownPde(other.to_string())),
        }
    }
}

/// Problem definition with its named parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum PdeSpec {
    /// `u_t = lap u + f`, solution `a sin(b pi (x - d) t + c y^2)`.
    Heat { a: f64, b: f64, c: f64, d: f64 },
    /// Coupled viscous Burgers system.
    Burgers { re: f64 },
    /// FitzHugh-Nagumo reaction-diffusion; `ic = [a, b, c, d]` shapes the initial pulse.
    FitzHughNagumo { gamma_u: f64, gamma_v: f64, alpha: f64, beta: f64, ic: [f64; 4] },
    /// Heat equation with unknown source coefficient `k`; the boundary data
    /// is generated with `k_boundary` (the value to be recovered).
    HeatInverse { k: f64, k_boundary: f64 },
}

/// Sparse maps for the x-derivative, y-derivative and Laplacian.
#[derive(Clone, Debug)]
pub struct DiffOperators {
    pub dx: Rc<SparseMatrix>,
    pub dy: Rc<SparseMatrix>,
    pub laplacian: Rc<SparseMatrix>,
}

pub fn heat_spec(a: f64, b: f64, c: f64, d: f64) -> PdeSpec {
    PdeSpec::Heat { a, b, c, d }
}

pub fn burgers_spec(re: f64) -> Result<PdeSpec, PdeError> {
    if !(re > 0.0) {
        return Err(PdeError::InvalidParameter { name: "re".into(), value: re, reason: "must be positive" });
    }
    Ok(PdeSpec::Burgers { re })
}

pub fn fn_spec(gamma_u: f64, gamma_v: f64, alpha: f64, beta: f64, ic: [f64; 4]) -> Result<PdeSpec, PdeError> {
    for (name, v) in [("gamma_u", gamma_u), ("gamma_v", gamma_v)] {
        if !(v > 0.0) {
            return Err(PdeError::InvalidParameter { name: name.into(), value: v, reason: "must be positive" });
        }
    }
    Ok(PdeSpec::FitzHughNagumo { gamma_u, gamma_v, alpha, beta, ic })
}

pub fn heat_inverse_spec(k_init: f64) -> PdeSpec {
    PdeSpec::HeatInverse { k: k_init, k_boundary: 4.0 }
}

impl PdeSpec {
    /// Default parameters for each problem.
    pub fn default_for(kind: PdeKind) -> Self {
        match kind {
            PdeKind::Heat => heat_spec(4.0, 2.0, 0.5, 0.3),
            PdeKind::Burgers => PdeSpec::Burgers { re: 80.0 },
            PdeKind::FitzHughNagumo => {
                PdeSpec::FitzHughNagumo { gamma_u: 1e-3, gamma_v: 1e-3, alpha: 0.0, beta: 1.0, ic: [1.0, 1.0, 6.0, 0.0] }
            }
            PdeKind::HeatInverse => heat_inverse_spec(8.0),
        }
    }

    pub fn kind(&self) -> PdeKind {
        match self {
            PdeSpec::Heat { .. } => PdeKind::Heat,
            PdeSpec::Burgers { .. } => PdeKind::Burgers,
            PdeSpec::FitzHughNagumo { .. } => PdeKind::FitzHughNagumo,
            PdeSpec::HeatInverse { .. } => PdeKind::HeatInverse,
        }
    }

    pub fn components(&self) -> usize {
        match self {
            PdeSpec::Heat { .. } | PdeSpec::HeatInverse { .. } => 1,
            PdeSpec::Burgers { .. } | PdeSpec::FitzHughNagumo { .. } => 2,
        }
    }

    pub fn component_names(&self) -> &'static [&'static str] {
        if self.components() == 1 {
            &["u"]
        } else {
            &["u", "v"]
        }
    }

    pub fn has_source(&self) -> bool {
        matches!(self, PdeSpec::Heat { .. } | PdeSpec::HeatInverse { .. })
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(&'static str, f64)> {
        match *self {
            PdeSpec::Heat { a, b, c, d } => vec![("a", a), ("b", b), ("c", c), ("d", d)],
            PdeSpec::Burgers { re } => vec![("re", re)],
            PdeSpec::FitzHughNagumo { gamma_u, gamma_v, alpha, beta, ic } => vec![
                ("gamma_u", gamma_u),
                ("gamma_v", gamma_v),
                ("alpha", alpha),
                ("beta", beta),
                ("ic_a", ic[0]),
                ("ic_b", ic[1]),
                ("ic_c", ic[2]),
                ("ic_d", ic[3]),
            ],
            PdeSpec::HeatInverse { k, k_boundary } => vec![("k", k), ("k_boundary", k_boundary)],
        }
    }

    pub fn set_parameter(&mut self, name: &str, value: f64) -> Result<(), PdeError> {
        let key = self.kind().key();
        let slot = match (self, name) {
            (PdeSpec::Heat { a, .. }, "a") => a,
            (PdeSpec::Heat { b, .. }, "b") => b,
            (PdeSpec::Heat { c, .. }, "c") => c,
            (PdeSpec::Heat { d, .. }, "d") => d,
            (PdeSpec::Burgers { re }, "re") => {
                if !(value > 0.0) {
                    return Err(PdeError::InvalidParameter { name: name.into(), value, reason: "must be positive" });
                }
                re
            }
            (PdeSpec::FitzHughNagumo { gamma_u, .. }, "gamma_u") => gamma_u,
            (PdeSpec::FitzHughNagumo { gamma_v, .. }, "gamma_v") => gamma_v,
            (PdeSpec::FitzHughNagumo { alpha, .. }, "alpha") => alpha,
            (PdeSpec::FitzHughNagumo { beta, .. }, "beta") => beta,
            (PdeSpec::FitzHughNagumo { ic, .. }, "ic_a") => &mut ic[0],
            (PdeSpec::FitzHughNagumo { ic, .. }, "ic_b") => &mut ic[1],
            (PdeSpec::FitzHughNagumo { ic, .. }, "ic_c") => &mut ic[2],
            (PdeSpec::FitzHughNagumo { ic, .. }, "ic_d") => &mut ic[3],
            (PdeSpec::HeatInverse { k, .. }, "k") => k,
            (PdeSpec::HeatInverse { k_boundary, .. }, "k_boundary") => k_boundary,
            _ => return Err(PdeError::UnknownParameter { pde: key, name: name.to_string() }),
        };
        if !value.is_finite() {
            return Err(PdeError::InvalidParameter { name: name.into(), value, reason: "must be finite" });
        }
        *slot = value;
        Ok(())
    }

    /// Trainable scalar parameter, if the problem has one.
    pub fn lambda(&self) -> Option<f64> {
        match *self {
            PdeSpec::HeatInverse { k, .. } => Some(k),
            _ => None,
        }
    }

    pub fn set_lambda(&mut self, value: f64) {
        if let PdeSpec::HeatInverse { k, .. } = self {
            *k = value;
        }
    }

    pub fn lambda_name(&self) -> Option<&'static str> {
        self.lambda().map(|_| "k")
    }

    /// Source `f(x, y, t)` per component (zero for source-free problems).
    pub fn source(&self, x: f64, y: f64, t: f64) -> Vec<f64> {
        match *self {
            PdeSpec::Heat { a, b, c, d } => {
                let phi = b * PI * (x - d) * t + c * y * y;
                vec![a * phi.cos() * (b * PI * (x - d) - 2.0 * c) + a * phi.sin() * (b * b * PI * PI * t * t + 4.0 * c * c * y * y)]
            }
            PdeSpec::HeatInverse { k, .. } => vec![inverse_source(k, x, y, t).0],
            _ => vec![0.0; self.components()],
        }
    }

    pub fn boundary(&self, x: f64, y: f64, t: f64) -> Vec<f64> {
        match *self {
            PdeSpec::FitzHughNagumo { .. } => vec![0.0, 0.0],
            PdeSpec::HeatInverse { k_boundary, .. } => vec![(k_boundary * t * x + y).cos()],
            _ => self.analytic(x, y, t).expect("problems with analytic solutions use them as boundary data"),
        }
    }

    pub fn initial(&self, x: f64, y: f64) -> Vec<f64> {
        match *self {
            PdeSpec::FitzHughNagumo { ic: [a, b, c, d], .. } => {
                let g = (-c * (x * x + y * y)).exp();
                vec![(b * PI * x).sin() * (a * PI * (y - d)).cos() * g, (a * PI * (x - d)).cos() * (b * PI * y).sin() * g]
            }
            PdeSpec::HeatInverse { .. } => vec![y.cos()],
            _ => self.analytic(x, y, 0.0).expect("analytic"),
        }
    }

    /// Closed-form solution, where one exists. For the inverse problem it is
    /// evaluated at the current `k`.
    pub fn analytic(&self, x: f64, y: f64, t: f64) -> Option<Vec<f64>> {
        match *self {
            PdeSpec::Heat { a, b, c, d } => Some(vec![a * (b * PI * (x - d) * t + c * y * y).sin()]),
            PdeSpec::Burgers { re } => {
                let s = 1.0 / (4.0 * (1.0 + ((-t - 4.0 * x + 4.0 * y) * re / 32.0).exp()));
                Some(vec![0.75 - s, 0.75 + s])
            }
            PdeSpec::FitzHughNagumo { .. } => None,
            PdeSpec::HeatInverse { k, .. } => Some(vec![(k * t * x + y).cos()]),
        }
    }

    /// Spatial functional plus source, `F[u] - f(x, t)`, from precomputed
    /// derivative arrays (each `N x n`).
    pub fn eval_residual_terms(
        &self,
        u: &Tensor,
        grad_x: &Tensor,
        grad_y: &Tensor,
        lap: &Tensor,
        coords: &[[f64; 2]],
        t: f64,
    ) -> Result<Tensor, PdeError> {
        let n = self.components();
        let rows = coords.len();
        for (what, m) in [("u", u), ("grad_x", grad_x), ("grad_y", grad_y), ("laplacian", lap)] {
            if m.rows() != rows {
                return Err(PdeError::Length { what, expected: rows, got: m.rows() });
            }
            if m.cols() != n {
                return Err(PdeError::Length { what, expected: n, got: m.cols() });
            }
        }
        let mut out = Tensor::zeros(rows, n);
        for i in 0..rows {
            let [x, y] = coords[i];
            let r: Vec<f64> = match *self {
                PdeSpec::Heat { .. } | PdeSpec::HeatInverse { .. } => {
                    vec![-lap.get(i, 0) - self.source(x, y, t)[0]]
                }
                PdeSpec::Burgers { re } => {
                    let (uu, vv) = (u.get(i, 0), u.get(i, 1));
                    (0..2).map(|c| uu * grad_x.get(i, c) + vv * grad_y.get(i, c) - lap.get(i, c) / re).collect()
                }
                PdeSpec::FitzHughNagumo { gamma_u, gamma_v, alpha, beta, .. } => {
                    let (uu, vv) = (u.get(i, 0), u.get(i, 1));
                    vec![
                        -gamma_u * lap.get(i, 0) - uu + uu * uu * uu + vv - alpha,
                        -gamma_v * lap.get(i, 1) - beta * (uu - vv),
                    ]
                }
            };
            for (c, v) in r.into_iter().enumerate() {
                if !v.is_finite() {
                    return Err(PdeError::NonFinite(i));
                }
                out.set(i, c, v);
            }
        }
        Ok(out)
    }

    /// Records `F[u] - f(x, t)` on the tape for a field `u` (`N x n`).
    ///
    /// `lambda` is the trainable parameter as a `1 x 1` variable; when absent
    /// the spec's stored value is used as a constant.
    /// Source column(s) at `t` on the tape; depends on `lambda` for the
    /// inverse problem, constant otherwise.
    pub fn source_var(&self, tape: &mut Tape, coords: &[[f64; 2]], t: f64, lambda: Option<Var>) -> Result<Var, PdeError> {
        match (self, lambda) {
            (PdeSpec::HeatInverse { .. }, Some(kv)) => {
                let kval = tape.value(kv).item();
                let (val, der): (Vec<f64>, Vec<f64>) = coords.iter().map(|p| inverse_source(kval, p[0], p[1], t)).unzip();
                Ok(tape.scalar_map(kv, Tensor::column(&val), Tensor::column(&der))?)
            }
            _ => {
                let n = self.components();
                Ok(tape.constant(Tensor::from_fn(coords.len(), n, |i, c| self.source(coords[i][0], coords[i][1], t)[c])))
            }
        }
    }

    pub fn spatial_terms(
        &self,
        tape: &mut Tape,
        u: Var,
        ops: &DiffOperators,
        coords: &[[f64; 2]],
        t: f64,
        lambda: Option<Var>,
    ) -> Result<Var, PdeError> {
        let rows = coords.len();
        let (ur, uc) = tape.value(u).shape();
        if ur != rows || uc != self.components() {
            return Err(PdeError::Length { what: "u", expected: rows, got: ur });
        }
        let out = match *self {
            PdeSpec::Heat { .. } | PdeSpec::HeatInverse { .. } => {
                let lap = tape.sparse_apply(ops.laplacian.clone(), u)?;
                let f = self.source_var(tape, coords, t, lambda)?;
                let neg = tape.scale(lap, -1.0)?;
                tape.sub(neg, f)?
            }
            PdeSpec::Burgers { re } => {
                let lap = tape.sparse_apply(ops.laplacian.clone(), u)?;
                let gx = tape.sparse_apply(ops.dx.clone(), u)?;
                let gy = tape.sparse_apply(ops.dy.clone(), u)?;
                let uu = tape.select_column(u, 0)?;
                let vv = tape.select_column(u, 1)?;
                let uu2 = tape.concat_columns(&[uu, uu])?;
                let vv2 = tape.concat_columns(&[vv, vv])?;
                let adv_x = tape.mul(uu2, gx)?;
                let adv_y = tape.mul(vv2, gy)?;
                let adv = tape.add(adv_x, adv_y)?;
                let diff = tape.scale(lap, 1.0 / re)?;
                tape.sub(adv, diff)?
            }
            PdeSpec::FitzHughNagumo { gamma_u, gamma_v, alpha, beta, .. } => {
                let lap = tape.sparse_apply(ops.laplacian.clone(), u)?;
                let lu = tape.select_column(lap, 0)?;
                let lv = tape.select_column(lap, 1)?;
                let uu = tape.select_column(u, 0)?;
                let vv = tape.select_column(u, 1)?;
                let u2 = tape.square(uu)?;
                let u3 = tape.mul(u2, uu)?;
                // r_u = -gu lap u - u + u^3 + v - alpha
                let a = tape.scale(lu, -gamma_u)?;
                let a = tape.sub(a, uu)?;
                let a = tape.add(a, u3)?;
                let a = tape.add(a, vv)?;
                let shift = tape.constant(Tensor::filled(rows, 1, alpha));
                let ru = tape.sub(a, shift)?;
                // r_v = -gv lap v - beta (u - v)
                let b = tape.scale(lv, -gamma_v)?;
                let uv = tape.sub(uu, vv)?;
                let buv = tape.scale(uv, beta)?;
                let rv = tape.sub(b, buv)?;
                tape.concat_columns(&[ru, rv])?
            }
        };
        Ok(out)
    }
}

/// Inverse-problem source and its derivative with respect to `k`.
pub fn inverse_source(k: f64, x: f64, y: f64, t: f64) -> (f64, f64) {
    let psi = k * t * x + y;
    let (s, c) = psi.sin_cos();
    let q = k * k * t * t + 1.0;
    let f = -k * x * s + c * q;
    let df = -x * s - k * x * c * t * x - s * t * x * q + c * 2.0 * k * t * t;
    (f, df)
}

/// Parses `pde` plus `name=value` overrides.
pub fn parse_spec(kind: &str, overrides: &[(String, f64)]) -> Result<PdeSpec, PdeError> {
    let mut spec = PdeSpec::default_for(kind.parse()?);
    for (name, value) in overrides {
        spec.set_parameter(name, *value)?;
    }
    Ok(spec)
}
