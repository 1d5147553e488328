//! Rollout training for forward and inverse problems, schedules, and
//! checkpoints.
//!
//! Each step's input is detached from the previous step, so the gradient of
//! the accumulated loss is the sum of per-step gradients. An epoch therefore
//! back-propagates every step on its own short tape and applies one optimizer
//! update at the end. Edge latents depend only on geometry and parameters;
//! they are encoded once per epoch and their accumulated gradient is pushed
//! through the edge encoder afterwards.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{adam_step_grouped, AdamState, Tape, Tensor, TensorError};
use crate::eval::{rollout, EvalError};
use crate::loss::{
    apply_bc_var, initial_field, node_features_var, layout_for, pde_residual, Discretization, LossError, Observation,
    ObservationOperator, ObservationSet,
};
use crate::mesh::{NodeKind, TriMesh};
use crate::model::{Model, ModelConfig, ModelError};
use crate::pde::{PdeError, PdeKind, PdeSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("epoch {epoch}: {source}")]
    Optimizer { epoch: usize, source: TensorError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Time steps per training rollout.
    pub steps: usize,
    pub dt: f64,
    pub t0: f64,
    pub lr_start: f64,
    pub lr_floor: f64,
    pub lr_decay: f64,
    pub lr_interval: usize,
    /// Base learning rate of the PDE-parameter group (same decay law).
    pub lambda_lr: f64,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub seed: u64,
    pub model: ModelConfig,
    /// Append the source term to the node features when the problem has one.
    pub source_feature: bool,
    /// Start from the identity step by zeroing the decoder's last layer.
    pub zero_decoder_output: bool,
    /// Nodes per space-time interpolation stencil for the data loss.
    pub interp_neighbors: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            steps: 10,
            dt: 1e-3,
            t0: 0.0,
            lr_start: 1e-3,
            lr_floor: 1e-7,
            lr_decay: 0.99,
            lr_interval: 10,
            lambda_lr: 5e-2,
            gamma_start: 0.9,
            gamma_end: 0.5,
            seed: 0,
            model: ModelConfig::default(),
            source_feature: true,
            zero_decoder_output: true,
            interp_neighbors: 6,
        }
    }
}

impl TrainConfig {
    /// Paper schedule for a problem: 50 steps of 1e-4 for heat, 10 of 1e-3 otherwise.
    pub fn for_pde(kind: PdeKind) -> Self {
        let mut c = Self::default();
        if kind == PdeKind::Heat {
            c.steps = 50;
            c.dt = 1e-4;
        }
        c
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr_start >= self.lr_floor && self.lr_floor > 0.0) {
            return bad("need lr_start >= lr_floor > 0");
        }
        if self.lr_interval == 0 || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr decay must be in (0, 1] with a positive interval");
        }
        if !(0.0..=1.0).contains(&self.gamma_start) || !(0.0..=1.0).contains(&self.gamma_end) {
            return bad("gamma endpoints must lie in [0, 1]");
        }
        if self.lambda_lr < 0.0 {
            return bad("lambda_lr must be non-negative");
        }
        self.model.validate()?;
        Ok(())
    }
}

/// `max(lr_floor, lr_start * decay^floor(epoch / interval))`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let k = (epoch / config.lr_interval) as i32;
    (config.lr_start * config.lr_decay.powi(k)).max(config.lr_floor)
}

fn lambda_lr(epoch: usize, config: &TrainConfig) -> f64 {
    let k = (epoch / config.lr_interval) as i32;
    (config.lambda_lr * config.lr_decay.powi(k)).max(config.lr_floor.min(config.lambda_lr))
}

/// Data-loss weight: linear from `gamma_start` to `gamma_end` over the first
/// half of training, then constant.
pub fn gamma_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let half = config.epochs as f64 / 2.0;
    let frac = if half <= 0.0 { 1.0 } else { (epoch as f64 / half).min(1.0) };
    config.gamma_start + (config.gamma_end - config.gamma_start) * frac
}

/// Warns when `dt` is far above the diffusive scale `h^2`.
pub fn check_stability(config: &TrainConfig, mesh: &TriMesh) -> Option<String> {
    let h = mesh
        .triangles
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| {
            let (p, q) = (mesh.nodes[a], mesh.nodes[b]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / (3 * mesh.triangles.len().max(1)) as f64;
    (config.dt > 10.0 * h * h).then(|| format!("dt = {} exceeds 10 (dx)^2 = {:.3e}; expect a stiff rollout", config.dt, 10.0 * h * h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_pde: f64,
    pub loss_data: f64,
    pub lr: f64,
    pub gamma: f64,
    pub lambda: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let with_k = history.first().is_some_and(|r| r.lambda.is_some());
    let mut s = String::from("epoch,loss_total,loss_pde,loss_data,lr,gamma");
    if with_k {
        s.push_str(",k");
    }
    s.push('\n');
    for r in history {
        s.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.epoch, r.loss_total, r.loss_pde, r.loss_data, r.lr, r.gamma
        ));
        if let Some(k) = r.lambda {
            s.push_str(&format!(",{k:.17e}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub loss: f64,
    pub params: Vec<Tensor>,
    pub lambda: Option<f64>,
}

/// Loss values and parameter gradients at the current parameters.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub loss_total: f64,
    pub loss_pde: f64,
    pub loss_data: f64,
    pub gamma: f64,
    pub grads: Vec<Tensor>,
    pub lambda_grad: Option<f64>,
}

/// Training state for one model on one problem.
pub struct Trainer<'d> {
    pub spec: PdeSpec,
    pub disc: &'d Discretization,
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
    observations: Option<ObservationOperator>,
}

impl<'d> Trainer<'d> {
    /// Fresh model. `observations` switches on the data loss and, when the
    /// problem has a trainable parameter, its identification.
    pub fn new(
        spec: PdeSpec,
        disc: &'d Discretization,
        config: TrainConfig,
        observations: Option<&ObservationSet>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let layout = layout_for(&spec, config.source_feature);
        let mut model = Model::init(layout, config.model.clone(), config.seed)?;
        if config.zero_decoder_output {
            model.zero_decoder_output();
        }
        Self::with_model(spec, disc, config, model, observations)
    }

    pub fn with_model(
        spec: PdeSpec,
        disc: &'d Discretization,
        config: TrainConfig,
        model: Model,
        observations: Option<&ObservationSet>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if model.layout != layout_for(&spec, config.source_feature) {
            return Err(TrainError::Config("model feature layout does not match the problem".into()));
        }
        let observations = match observations {
            Some(o) if !o.is_empty() => Some(ObservationOperator::new(
                o,
                &disc.coords,
                config.t0,
                config.dt,
                config.steps,
                config.interp_neighbors,
            )?),
            Some(_) => return Err(TrainError::Config("observation set is empty".into())),
            None => None,
        };
        let adam = AdamState::new(&Self::optimizer_shapes(&model, &spec));
        Ok(Self { spec, disc, config, model, adam, epoch: 0, best: None, history: Vec::new(), observations })
    }

    fn optimizer_shapes(model: &Model, spec: &PdeSpec) -> Vec<Tensor> {
        let mut p = model.params.clone();
        if spec.lambda().is_some() {
            p.push(Tensor::scalar(0.0));
        }
        p
    }

    fn inverse(&self) -> bool {
        self.observations.is_some()
    }

    pub fn lambda(&self) -> Option<f64> {
        self.spec.lambda()
    }

    /// Physics and data loss at the current parameters with their gradients.
    pub fn evaluate(&self) -> Result<LossEvaluation, TrainError> {
        let cfg = &self.config;
        let disc = self.disc;
        let model = &self.model;
        let steps = cfg.steps;
        let gamma = if self.inverse() { gamma_schedule(self.epoch, cfg) } else { 0.0 };
        let n = self.spec.components();
        let pde_scale = (1.0 - gamma) / (steps * disc.interior.len() * n) as f64;
        let train_lambda = self.inverse() && self.spec.lambda().is_some();

        // Data-loss gradients need the whole rollout first.
        let (loss_data, data_grads) = match &self.observations {
            Some(op) => {
                let series = rollout(model, &self.spec, disc, steps, cfg.dt, cfg.t0)?;
                let (l, g) = op.loss_and_grad(&series.fields);
                (l, Some(g))
            }
            None => (0.0, None),
        };

        let mut etape = Tape::new();
        let evars = model.record(&mut etape, true);
        let enet = model.bind(&evars)?;
        let ef = etape.constant(disc.graph.edge_features.clone());
        let e0 = enet.encode_edges(&mut etape, ef)?;
        let e0_val = etape.detach(e0);

        let mut grads: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let mut e_grad = Tensor::zeros(e0_val.rows(), e0_val.cols());
        let mut lambda_grad = 0.0;
        let mut pde_sum = 0.0;
        let layout = model.layout;
        let mut u = initial_field(&self.spec, disc, cfg.t0);
        for s in 0..steps {
            let t = cfg.t0 + cfg.dt * s as f64;
            let mut tape = Tape::new();
            let vars = model.record(&mut tape, true);
            let net = model.bind(&vars)?;
            let lam = if train_lambda { Some(tape.param(Tensor::scalar(self.spec.lambda().unwrap_or(0.0)))) } else { None };
            let e = tape.leaf(e0_val.clone(), true);
            let fv = node_features_var(&mut tape, &u, disc, &self.spec, t, &layout, lam)?;
            let uv = tape.constant(u.clone());
            let raw = net.step_with_edges(&mut tape, &disc.graph, uv, fv, e)?;
            let next = apply_bc_var(&mut tape, raw, &self.spec, t + cfg.dt, disc)?;
            let r = pde_residual(&mut tape, &u, next, cfg.dt, t, disc, &self.spec, lam).map_err(|e| match e {
                LossError::NonFinite { .. } => TrainError::NonFiniteLoss { epoch: self.epoch, step: s },
                e => e.into(),
            })?;
            let sq = tape.square(r)?;
            let ssum = tape.sum_all(sq)?;
            let step_pde = tape.value(ssum).item();
            if !step_pde.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch: self.epoch, step: s });
            }
            pde_sum += step_pde;
            let mut loss = tape.scale(ssum, pde_scale)?;
            if let Some(g) = &data_grads {
                if gamma > 0.0 {
                    let gs = tape.constant(g[s + 1].clone());
                    let prod = tape.mul(next, gs)?;
                    let sur = tape.sum_all(prod)?;
                    let sur = tape.scale(sur, gamma)?;
                    loss = tape.add(loss, sur)?;
                }
            }
            let mut gr = tape.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(&vars) {
                if let Some(g) = gr.get(*v) {
                    acc.axpy(1.0, g);
                }
            }
            e_grad.axpy(1.0, &gr.take(e));
            if let Some(l) = lam {
                lambda_grad += gr.wrt(l).item();
            }
            u = tape.detach(next);
        }
        let eg = etape.backward_seeded(e0, e_grad)?;
        for i in model.edge_encoder_range() {
            if let Some(g) = eg.get(evars[i]) {
                grads[i].axpy(1.0, g);
            }
        }
        let loss_pde = pde_sum / (steps * disc.interior.len() * n) as f64;
        let loss_total = (1.0 - gamma) * loss_pde + gamma * loss_data;
        if !loss_total.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch: self.epoch, step: steps });
        }
        Ok(LossEvaluation {
            loss_total,
            loss_pde,
            loss_data,
            gamma,
            grads,
            lambda_grad: train_lambda.then_some(lambda_grad),
        })
    }

    /// One epoch: evaluate, record, update once.
    pub fn run_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let eval = self.evaluate()?;
        let lr = lr_schedule(self.epoch, &self.config);
        let record = EpochRecord {
            epoch: self.epoch,
            loss_total: eval.loss_total,
            loss_pde: eval.loss_pde,
            loss_data: eval.loss_data,
            lr,
            gamma: eval.gamma,
            lambda: self.spec.lambda().filter(|_| self.inverse()),
        };
        if self.best.as_ref().is_none_or(|b| eval.loss_total < b.loss) {
            self.best = Some(BestSnapshot {
                epoch: self.epoch,
                loss: eval.loss_total,
                params: self.model.params.clone(),
                lambda: self.spec.lambda(),
            });
        }
        let mut params = std::mem::take(&mut self.model.params);
        let mut grads = eval.grads;
        let mut lrs = vec![lr; params.len()];
        let has_lambda = self.spec.lambda().is_some();
        if has_lambda {
            params.push(Tensor::scalar(self.spec.lambda().unwrap_or(0.0)));
            grads.push(Tensor::scalar(eval.lambda_grad.unwrap_or(0.0)));
            lrs.push(if self.inverse() { lambda_lr(self.epoch, &self.config) } else { 0.0 });
        }
        let res = adam_step_grouped(&mut params, &grads, &mut self.adam, &lrs);
        if has_lambda {
            let k = params.pop().expect("lambda slot").item();
            if res.is_ok() {
                self.spec.set_lambda(k);
            }
        }
        self.model.params = params;
        res.map_err(|source| TrainError::Optimizer { epoch: self.epoch, source })?;
        self.epoch += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    /// Runs until `config.epochs` epochs are complete.
    pub fn train(&mut self) -> Result<(), TrainError> {
        self.train_with(|_| {})
    }

    pub fn train_with(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<(), TrainError> {
        if let Some(w) = check_stability(&self.config, &self.disc.mesh) {
            warn!("{w}");
        }
        while self.epoch < self.config.epochs {
            let r = self.run_epoch()?;
            if r.epoch % 100 == 0 {
                info!("epoch {} loss {:.4e} (pde {:.4e}, data {:.4e}) k {:?}", r.epoch, r.loss_total, r.loss_pde, r.loss_data, r.lambda);
            } else {
                debug!("epoch {} loss {:.4e}", r.epoch, r.loss_total);
            }
            on_epoch(&r);
        }
        Ok(())
    }

    /// Model holding the best-loss parameters seen so far (current ones if none).
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.params = b.params.clone();
        }
        m
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push("config", encode_config(&self.config));
        let kind = match self.spec.kind() {
            PdeKind::Heat => 0.0,
            PdeKind::Burgers => 1.0,
            PdeKind::FitzHughNagumo => 2.0,
            PdeKind::HeatInverse => 3.0,
        };
        c.push("pde.kind", vec![kind]);
        c.push("pde.params", self.spec.parameters().iter().map(|p| p.1).collect());
        c.push("mesh.nodes", self.disc.mesh.nodes.iter().flat_map(|p| [p[0], p[1]]).collect());
        c.push("mesh.triangles", self.disc.mesh.triangles.iter().flat_map(|t| t.map(|i| i as f64)).collect());
        c.push(
            "mesh.kinds",
            self.disc.mesh.node_kind.iter().map(|k| if *k == NodeKind::Boundary { 1.0 } else { 0.0 }).collect(),
        );
        c.push("state.epoch", vec![self.epoch as f64]);
        c.push("state.inverse", vec![if self.inverse() { 1.0 } else { 0.0 }]);
        c.push("adam.step", vec![self.adam.step as f64]);
        let names = self.model.param_names();
        for (i, name) in names.iter().enumerate() {
            c.push(&format!("param.{name}"), self.model.params[i].data().to_vec());
            c.push(&format!("adam.m.{name}"), self.adam.first[i].data().to_vec());
            c.push(&format!("adam.v.{name}"), self.adam.second[i].data().to_vec());
        }
        if self.spec.lambda().is_some() {
            let i = names.len();
            c.push("adam.m.lambda", self.adam.first[i].data().to_vec());
            c.push("adam.v.lambda", self.adam.second[i].data().to_vec());
        }
        if let Some(b) = &self.best {
            c.push("best.epoch", vec![b.epoch as f64]);
            c.push("best.loss", vec![b.loss]);
            if let Some(k) = b.lambda {
                c.push("best.lambda", vec![k]);
            }
            for (name, p) in names.iter().zip(&b.params) {
                c.push(&format!("best.param.{name}"), p.data().to_vec());
            }
        }
        c.push("history", self.history.iter().flat_map(encode_record).collect());
        c
    }

    /// Restores a trainer saved by [`Trainer::to_checkpoint`]. The caller
    /// supplies the discretization (see [`CheckpointContents::mesh`]) and,
    /// for inverse runs, the observations.
    pub fn from_checkpoint(
        ck: &CheckpointContents,
        disc: &'d Discretization,
        observations: Option<&ObservationSet>,
    ) -> Result<Self, TrainError> {
        let mut t = Self::with_model(ck.spec.clone(), disc, ck.config.clone(), ck.model.clone(), observations)?;
        t.adam = ck.adam.clone();
        t.epoch = ck.epoch;
        t.best = ck.best.clone();
        t.history = ck.history.clone();
        Ok(t)
    }
}

fn encode_record(r: &EpochRecord) -> [f64; 8] {
    [
        r.epoch as f64,
        r.loss_total,
        r.loss_pde,
        r.loss_data,
        r.lr,
        r.gamma,
        if r.lambda.is_some() { 1.0 } else { 0.0 },
        r.lambda.unwrap_or(0.0),
    ]
}

fn encode_config(c: &TrainConfig) -> Vec<f64> {
    let mut v = vec![
        c.epochs as f64,
        c.steps as f64,
        c.dt,
        c.t0,
        c.lr_start,
        c.lr_floor,
        c.lr_decay,
        c.lr_interval as f64,
        c.lambda_lr,
        c.gamma_start,
        c.gamma_end,
        (c.seed >> 32) as f64,
        (c.seed & 0xffff_ffff) as f64,
        if c.source_feature { 1.0 } else { 0.0 },
        if c.zero_decoder_output { 1.0 } else { 0.0 },
        c.interp_neighbors as f64,
        c.model.latent as f64,
        c.model.blocks as f64,
        c.model.hidden.len() as f64,
    ];
    v.extend(c.model.hidden.iter().map(|&h| h as f64));
    v
}

fn decode_config(v: &[f64]) -> Result<TrainConfig, TrainError> {
    let bad = || TrainError::Checkpoint("malformed config entry".into());
    if v.len() < 19 {
        return Err(bad());
    }
    let nh = v[18] as usize;
    if v.len() != 19 + nh {
        return Err(bad());
    }
    Ok(TrainConfig {
        epochs: v[0] as usize,
        steps: v[1] as usize,
        dt: v[2],
        t0: v[3],
        lr_start: v[4],
        lr_floor: v[5],
        lr_decay: v[6],
        lr_interval: v[7] as usize,
        lambda_lr: v[8],
        gamma_start: v[9],
        gamma_end: v[10],
        seed: ((v[11] as u64) << 32) | v[12] as u64,
        source_feature: v[13] != 0.0,
        zero_decoder_output: v[14] != 0.0,
        interp_neighbors: v[15] as usize,
        model: ModelConfig { latent: v[16] as usize, blocks: v[17] as usize, hidden: v[19..].iter().map(|&h| h as usize).collect() },
    })
}

const MAGIC: &[u8; 4] = b"PGNN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned container of named `f64` arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: &str, values: Vec<f64>) {
        self.entries.push((name.to_string(), values));
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    fn require(&self, name: &str) -> Result<&[f64], TrainError> {
        self.get(name).ok_or_else(|| TrainError::Checkpoint(format!("missing entry '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, vals) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(TrainError::Checkpoint("bad magic (not a checkpoint file)".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| TrainError::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let n = cur.u64()? as usize;
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| TrainError::Checkpoint("length overflow".into()))?)?;
            let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            entries.push((name, vals));
        }
        if cur.pos != bytes.len() {
            return Err(TrainError::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let io = |source| TrainError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Decodes the typed training state.
    pub fn contents(&self) -> Result<CheckpointContents, TrainError> {
        let config = decode_config(self.require("config")?)?;
        let kind = match self.require("pde.kind")?.first().copied() {
            Some(k) if k == 0.0 => PdeKind::Heat,
            Some(k) if k == 1.0 => PdeKind::Burgers,
            Some(k) if k == 2.0 => PdeKind::FitzHughNagumo,
            Some(k) if k == 3.0 => PdeKind::HeatInverse,
            _ => return Err(TrainError::Checkpoint("unknown pde kind".into())),
        };
        let mut spec = PdeSpec::default_for(kind);
        let names: Vec<&str> = spec.parameters().iter().map(|p| p.0).collect();
        let vals = self.require("pde.params")?;
        if vals.len() != names.len() {
            return Err(TrainError::Checkpoint("pde parameter count mismatch".into()));
        }
        for (n, v) in names.iter().zip(vals) {
            spec.set_parameter(n, *v)?;
        }
        let nodes: Vec<[f64; 2]> = self.require("mesh.nodes")?.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let triangles: Vec<[usize; 3]> =
            self.require("mesh.triangles")?.chunks_exact(3).map(|c| [c[0] as usize, c[1] as usize, c[2] as usize]).collect();
        let node_kind: Vec<NodeKind> = self
            .require("mesh.kinds")?
            .iter()
            .map(|&k| if k != 0.0 { NodeKind::Boundary } else { NodeKind::Interior })
            .collect();
        let mesh = TriMesh { nodes, triangles, node_kind };
        mesh.validate().map_err(|e| TrainError::Checkpoint(format!("mesh: {e}")))?;

        let layout = layout_for(&spec, config.source_feature);
        let template = Model::init(layout, config.model.clone(), 0)?;
        let pnames = template.param_names();
        let read = |prefix: &str| -> Result<Vec<Tensor>, TrainError> {
            pnames
                .iter()
                .zip(&template.params)
                .map(|(n, p)| {
                    let v = self.require(&format!("{prefix}{n}"))?;
                    Tensor::from_vec(p.rows(), p.cols(), v.to_vec()).map_err(TrainError::from)
                })
                .collect()
        };
        let model = Model::from_params(layout, config.model.clone(), read("param.")?)?;
        let mut first = read("adam.m.")?;
        let mut second = read("adam.v.")?;
        if spec.lambda().is_some() {
            first.push(Tensor::from_vec(1, 1, self.require("adam.m.lambda")?.to_vec())?);
            second.push(Tensor::from_vec(1, 1, self.require("adam.v.lambda")?.to_vec())?);
        }
        let adam = AdamState { first, second, step: self.require("adam.step")?[0] as u64 };
        let best = match self.get("best.epoch") {
            Some(e) => Some(BestSnapshot {
                epoch: e[0] as usize,
                loss: self.require("best.loss")?[0],
                params: read("best.param.")?,
                lambda: self.get("best.lambda").map(|v| v[0]),
            }),
            None => None,
        };
        let history = self
            .require("history")?
            .chunks_exact(8)
            .map(|r| EpochRecord {
                epoch: r[0] as usize,
                loss_total: r[1],
                loss_pde: r[2],
                loss_data: r[3],
                lr: r[4],
                gamma: r[5],
                lambda: (r[6] != 0.0).then_some(r[7]),
            })
            .collect();
        Ok(CheckpointContents {
            config,
            spec,
            mesh,
            model,
            adam,
            epoch: self.require("state.epoch")?[0] as usize,
            inverse: self.get("state.inverse").is_some_and(|v| v[0] != 0.0),
            best,
            history,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Typed view of a checkpoint.
#[derive(Clone, Debug)]
pub struct CheckpointContents {
    pub config: TrainConfig,
    pub spec: PdeSpec,
    pub mesh: TriMesh,
    pub model: Model,
    pub adam: AdamState,
    pub epoch: usize,
    pub inverse: bool,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
}

impl CheckpointContents {
    /// Model with the best-loss parameters, the one used for inference.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.params = b.params.clone();
        }
        m
    }

    /// Problem with the parameter value at the best-loss epoch.
    pub fn best_spec(&self) -> PdeSpec {
        let mut s = self.spec.clone();
        if let Some(k) = self.best.as_ref().and_then(|b| b.lambda) {
            s.set_lambda(k);
        }
        s
    }
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_model: Model,
    pub final_model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub final_lambda: Option<f64>,
}

fn outcome(t: &Trainer<'_>) -> TrainOutcome {
    TrainOutcome {
        best_model: t.best_model(),
        final_model: t.model.clone(),
        history: t.history.clone(),
        best_epoch: t.best.as_ref().map_or(0, |b| b.epoch),
        final_lambda: t.lambda(),
    }
}

/// Samples `count` distinct interior nodes (seeded, uniform) and records the
/// closed-form solution of `truth` there at every step time `t0 + s dt`,
/// `s = 1..=steps`.
pub fn sample_observations(
    truth: &PdeSpec,
    disc: &Discretization,
    count: usize,
    steps: usize,
    dt: f64,
    t0: f64,
    seed: u64,
) -> Result<ObservationSet, TrainError> {
    if count == 0 || count > disc.interior.len() {
        return Err(TrainError::Config(format!(
            "cannot sample {count} observation nodes from {} interior nodes",
            disc.interior.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = rand::seq::index::sample(&mut rng, disc.interior.len(), count);
    let mut records = Vec::with_capacity(count * steps);
    for s in 1..=steps {
        let t = t0 + dt * s as f64;
        for i in nodes.iter() {
            let x = disc.coords[disc.interior[i]];
            let values = truth
                .analytic(x[0], x[1], t)
                .ok_or_else(|| TrainError::Config(format!("{} has no closed-form solution", truth.kind())))?;
            records.push(Observation { x, t, values });
        }
    }
    Ok(ObservationSet { records })
}

/// Physics-only training (no observations, parameters frozen).
pub fn train_forward(spec: &PdeSpec, disc: &Discretization, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(spec.clone(), disc, config.clone(), None)?;
    t.train()?;
    Ok(outcome(&t))
}

/// Joint fit of network and PDE parameter to physics plus observations.
pub fn train_inverse(
    spec: &PdeSpec,
    disc: &Discretization,
    observations: &ObservationSet,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if spec.lambda().is_none() {
        return Err(TrainError::Config(format!("{} has no trainable parameter", spec.kind())));
    }
    let mut t = Trainer::new(spec.clone(), disc, config.clone(), Some(observations))?;
    t.train()?;
    Ok(outcome(&t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-3);
        assert_eq!(lr_schedule(9, &c), 1e-3);
        assert!((lr_schedule(10, &c) - 0.99e-3).abs() < 1e-18);
        assert_eq!(lr_schedule(1_000_000, &c), 1e-7);
    }

    #[test]
    fn gamma_endpoints() {
        let c = TrainConfig { epochs: 100, ..TrainConfig::default() };
        assert_eq!(gamma_schedule(0, &c), 0.9);
        assert!((gamma_schedule(25, &c) - 0.7).abs() < 1e-12);
        assert!((gamma_schedule(50, &c) - 0.5).abs() < 1e-12);
        assert!((gamma_schedule(99, &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { dt: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_start: 1e-8, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig { seed: u64::MAX - 3, ..TrainConfig::default() };
        assert_eq!(decode_config(&encode_config(&c)).unwrap(), c);
    }

    #[test]
    fn checkpoint_bytes_roundtrip_and_errors() {
        let mut c = Checkpoint::default();
        c.push("a", vec![1.0, f64::MIN_POSITIVE, -0.0]);
        c.push("empty", vec![]);
        let b = c.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back.to_bytes(), b);
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut ver = b.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(TrainError::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn history_header() {
        let r = EpochRecord { epoch: 0, loss_total: 1.0, loss_pde: 1.0, loss_data: 0.0, lr: 1e-3, gamma: 0.0, lambda: Some(8.0) };
        let s = history_csv(&[r]);
        assert!(s.starts_with("epoch,loss_total,loss_pde,loss_data,lr,gamma,k\n0,"));
    }
}
