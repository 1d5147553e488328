//! Encoder-processor-decoder graph network predicting per-node increments.
//!
//! All parameters live in one flat list of tensors (weights `in x out`,
//! biases `1 x out`) so the optimizer and checkpoint code can treat them
//! uniformly; [`Net`] binds a recorded copy of that list to a tape.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::mesh::Graph;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected width {expected}, got {got}")]
    Width { what: &'static str, expected: usize, got: usize },
    #[error("parameter list has {got} tensors, model needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Composition of the per-node input features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    /// Solution components `n`.
    pub components: usize,
    /// Whether the source term `f(x, t)` (one value per component) is appended.
    pub source: bool,
}

impl FeatureLayout {
    pub const NODE_TYPE_WIDTH: usize = 2;
    pub const EDGE_WIDTH: usize = 3;

    pub fn node_width(&self) -> usize {
        self.components + Self::NODE_TYPE_WIDTH + if self.source { self.components } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent: usize,
    pub hidden: Vec<usize>,
    /// Number of GN blocks `L`.
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { latent: 128, hidden: vec![128, 128], blocks: 1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent == 0 || self.hidden.contains(&0) {
            return Err(ModelError::Config("widths must be positive".into()));
        }
        if self.blocks == 0 {
            return Err(ModelError::Config("at least one GN block is required".into()));
        }
        Ok(())
    }
}

/// Location of one MLP inside the flat parameter list.
#[derive(Clone, Debug, PartialEq)]
struct MlpSlot {
    name: String,
    offset: usize,
    dims: Vec<usize>,
}

impl MlpSlot {
    fn layers(&self) -> usize {
        self.dims.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layout: FeatureLayout,
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    slots: Vec<MlpSlot>,
}

fn mlp_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

fn build_slots(layout: &FeatureLayout, config: &ModelConfig) -> Vec<MlpSlot> {
    let l = config.latent;
    let mut specs = vec![
        ("node_encoder".to_string(), mlp_dims(layout.node_width(), &config.hidden, l)),
        ("edge_encoder".to_string(), mlp_dims(FeatureLayout::EDGE_WIDTH, &config.hidden, l)),
    ];
    for b in 0..config.blocks {
        specs.push((format!("block{b}.edge"), mlp_dims(3 * l, &config.hidden, l)));
        specs.push((format!("block{b}.node"), mlp_dims(2 * l, &config.hidden, l)));
    }
    specs.push(("decoder".to_string(), mlp_dims(l, &config.hidden, layout.components)));
    let mut offset = 0;
    specs
        .into_iter()
        .map(|(name, dims)| {
            let slot = MlpSlot { name, offset, dims };
            offset += 2 * slot.layers();
            slot
        })
        .collect()
}

const NODE_ENCODER: usize = 0;
const EDGE_ENCODER: usize = 1;

fn block_edge(b: usize) -> usize {
    2 + 2 * b
}

fn block_node(b: usize) -> usize {
    3 + 2 * b
}

impl Model {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(layout: FeatureLayout, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let slots = build_slots(&layout, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for slot in &slots {
            for w in slot.dims.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                params.push(Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound)));
                params.push(Tensor::zeros(1, fan_out));
            }
        }
        Ok(Self { layout, config, params, slots })
    }

    /// Rebuilds a model around an existing parameter list, checking shapes.
    pub fn from_params(layout: FeatureLayout, config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut m = Self::init(layout, config, 0)?;
        if params.len() != m.params.len() {
            return Err(ModelError::ParamCount { expected: m.params.len(), got: params.len() });
        }
        for (p, q) in m.params.iter().zip(&params) {
            if p.shape() != q.shape() {
                return Err(TensorError::shape("model parameter", p.shape(), q.shape()).into());
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.params.len());
        for slot in &self.slots {
            for k in 0..slot.layers() {
                names.push(format!("{}.l{k}.w", slot.name));
                names.push(format!("{}.l{k}.b", slot.name));
            }
        }
        names
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Sets the decoder's output layer to zero so the step starts as the identity map.
    pub fn zero_decoder_output(&mut self) {
        let slot = self.slots.last().expect("decoder slot");
        let last = slot.offset + 2 * (slot.layers() - 1);
        for t in &mut self.params[last..last + 2] {
            t.data_mut().fill(0.0);
        }
    }

    /// Zeroes every decoder weight and bias.
    pub fn zero_decoder(&mut self) {
        let slot = self.slots.last().expect("decoder slot");
        let range = slot.offset..slot.offset + 2 * slot.layers();
        for t in &mut self.params[range] {
            t.data_mut().fill(0.0);
        }
    }

    /// Records the parameters on `tape`, as trainable leaves or as constants.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    /// Parameter indices belonging to the edge encoder.
    pub fn edge_encoder_range(&self) -> std::ops::Range<usize> {
        let s = &self.slots[EDGE_ENCODER];
        s.offset..s.offset + 2 * s.layers()
    }

    pub fn bind<'a>(&'a self, vars: &'a [Var]) -> Result<Net<'a>, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::ParamCount { expected: self.params.len(), got: vars.len() });
        }
        Ok(Net { model: self, vars })
    }
}

/// Sender/receiver index arrays shared by every step on a fixed graph.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub node_count: usize,
    pub senders: Rc<[usize]>,
    pub receivers: Rc<[usize]>,
    /// `E x 3` rows of `[dx, dy, |d|]`.
    pub edge_features: Tensor,
}

impl GraphIndex {
    pub fn new(graph: &Graph) -> Self {
        let edge_features = Tensor::from_fn(graph.edge_count(), 3, |r, c| {
            let f = &graph.edge_features[r];
            match c {
                0 => f.displacement[0],
                1 => f.displacement[1],
                _ => f.distance,
            }
        });
        Self {
            node_count: graph.node_count,
            senders: graph.senders().into(),
            receivers: graph.receivers().into(),
            edge_features,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.senders.len()
    }
}

/// Model parameters bound to a tape.
pub struct Net<'a> {
    model: &'a Model,
    vars: &'a [Var],
}

/// Node and edge latents of a graph.
#[derive(Clone, Copy, Debug)]
pub struct Latent {
    pub nodes: Var,
    pub edges: Var,
}

impl<'a> Net<'a> {
    fn layer(&self, slot: usize, k: usize) -> (Var, Var) {
        let o = self.model.slots[slot].offset + 2 * k;
        (self.vars[o], self.vars[o + 1])
    }

    fn mlp_from(&self, tape: &mut Tape, slot: usize, start: usize, mut x: Var) -> Result<Var, ModelError> {
        let layers = self.model.slots[slot].layers();
        for k in start..layers {
            let (w, b) = self.layer(slot, k);
            let z = tape.matmul(x, w)?;
            let z = tape.add_broadcast(z, b)?;
            x = if k + 1 < layers { tape.relu(z)? } else { z };
        }
        Ok(x)
    }

    fn mlp(&self, tape: &mut Tape, slot: usize, x: Var) -> Result<Var, ModelError> {
        self.mlp_from(tape, slot, 0, x)
    }

    fn check_width(&self, tape: &Tape, v: Var, what: &'static str, expected: usize) -> Result<(), ModelError> {
        let got = tape.value(v).cols();
        if got != expected {
            return Err(ModelError::Width { what, expected, got });
        }
        Ok(())
    }

    pub fn encode_nodes(&self, tape: &mut Tape, node_features: Var) -> Result<Var, ModelError> {
        self.check_width(tape, node_features, "node features", self.model.layout.node_width())?;
        self.mlp(tape, NODE_ENCODER, node_features)
    }

    pub fn encode_edges(&self, tape: &mut Tape, edge_features: Var) -> Result<Var, ModelError> {
        self.check_width(tape, edge_features, "edge features", FeatureLayout::EDGE_WIDTH)?;
        self.mlp(tape, EDGE_ENCODER, edge_features)
    }

    pub fn encode(&self, tape: &mut Tape, node_features: Var, edge_features: Var) -> Result<Latent, ModelError> {
        Ok(Latent { nodes: self.encode_nodes(tape, node_features)?, edges: self.encode_edges(tape, edge_features)? })
    }

    /// One message-passing round: edge update from `[e_ij, v_i, v_j]`
    /// (sender `i`, receiver `j`), sum into receivers, node update from
    /// `[aggregate, v]`.
    pub fn gn_block(&self, tape: &mut Tape, block: usize, g: &GraphIndex, x: Latent) -> Result<Latent, ModelError> {
        let l = self.model.config.latent;
        self.check_width(tape, x.nodes, "node latents", l)?;
        self.check_width(tape, x.edges, "edge latents", l)?;
        let slot = block_edge(block);
        // First layer of the edge MLP split by input block: concat([e, v_s, v_r]) W
        // equals e W_e + (v W_s)[senders] + (v W_r)[receivers].
        let (w, b) = self.layer(slot, 0);
        let we = tape.slice_rows(w, 0, l)?;
        let ws = tape.slice_rows(w, l, 2 * l)?;
        let wr = tape.slice_rows(w, 2 * l, 3 * l)?;
        let ze = tape.matmul(x.edges, we)?;
        let ps = tape.matmul(x.nodes, ws)?;
        let pr = tape.matmul(x.nodes, wr)?;
        let zs = tape.gather_rows(ps, g.senders.clone())?;
        let zr = tape.gather_rows(pr, g.receivers.clone())?;
        let z = tape.add(ze, zs)?;
        let z = tape.add(z, zr)?;
        let z = tape.add_broadcast(z, b)?;
        let edges = if self.model.slots[slot].layers() > 1 {
            let h = tape.relu(z)?;
            self.mlp_from(tape, slot, 1, h)?
        } else {
            z
        };
        let agg = tape.scatter_sum_rows(edges, g.receivers.clone(), g.node_count)?;
        let inp = tape.concat_columns(&[agg, x.nodes])?;
        let nodes = self.mlp(tape, block_node(block), inp)?;
        Ok(Latent { nodes, edges })
    }

    pub fn process(&self, tape: &mut Tape, g: &GraphIndex, mut x: Latent) -> Result<Latent, ModelError> {
        for b in 0..self.model.config.blocks {
            x = self.gn_block(tape, b, g, x)?;
        }
        Ok(x)
    }

    pub fn decode(&self, tape: &mut Tape, nodes: Var) -> Result<Var, ModelError> {
        self.check_width(tape, nodes, "node latents", self.model.config.latent)?;
        let slot = self.model.slots.len() - 1;
        self.mlp(tape, slot, nodes)
    }

    /// `u + decode(process(encode(...)))` with precomputed edge latents.
    pub fn step_with_edges(
        &self,
        tape: &mut Tape,
        g: &GraphIndex,
        u: Var,
        node_features: Var,
        edge_latent: Var,
    ) -> Result<Var, ModelError> {
        self.check_width(tape, u, "solution", self.model.layout.components)?;
        let nodes = self.encode_nodes(tape, node_features)?;
        let out = self.process(tape, g, Latent { nodes, edges: edge_latent })?;
        let h = self.decode(tape, out.nodes)?;
        Ok(tape.add(u, h)?)
    }

    /// Full step including the edge encoder.
    pub fn step(&self, tape: &mut Tape, g: &GraphIndex, u: Var, node_features: Var) -> Result<Var, ModelError> {
        let ef = tape.constant(g.edge_features.clone());
        let e = self.encode_edges(tape, ef)?;
        self.step_with_edges(tape, g, u, node_features, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat_layout() -> FeatureLayout {
        FeatureLayout { components: 1, source: true }
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = Model::init(heat_layout(), ModelConfig::default(), 3).unwrap();
        let b = Model::init(heat_layout(), ModelConfig::default(), 3).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, Model::init(heat_layout(), ModelConfig::default(), 4).unwrap().params);
        assert_eq!(heat_layout().node_width(), 4);
        // per MLP (in, 128, 128, out): in*128 + 128 + 128*128 + 128 + 128*out + out
        let mlp = |i: usize, o: usize| i * 128 + 128 + 128 * 128 + 128 + 128 * o + o;
        let expected = mlp(4, 128) + mlp(3, 128) + mlp(384, 128) + mlp(256, 128) + mlp(128, 1);
        assert_eq!(a.parameter_count(), expected);
        assert_eq!(a.param_names().len(), a.params.len());
    }

    #[test]
    fn glorot_bounds() {
        let m = Model::init(heat_layout(), ModelConfig::default(), 1).unwrap();
        let names = m.param_names();
        for (p, n) in m.params.iter().zip(&names) {
            if n.ends_with(".b") {
                assert!(p.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = (6.0 / (p.rows() + p.cols()) as f64).sqrt();
                assert!(p.data().iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = Model::init(heat_layout(), ModelConfig::default(), 1).unwrap();
        let mut p = m.params.clone();
        assert!(Model::from_params(heat_layout(), ModelConfig::default(), p.clone()).is_ok());
        p.pop();
        assert!(Model::from_params(heat_layout(), ModelConfig::default(), p).is_err());
        assert!(ModelConfig { blocks: 0, ..ModelConfig::default() }.validate().is_err());
    }
}
