//! Two-stage graph encoder and residual decoder.
//!
//! The encoder first embeds places (graph attention over one-hot categories)
//! and transit times (two-layer perceptron over transit vectors) separately,
//! with a linear head on each producing category and time-bin logits. Three
//! fusion layers then pass messages between the two, and an edge-attention
//! readout pools the result into a fixed-size user embedding. The decoder maps
//! the embedding and both head outputs to joint category-by-bin logits, laid
//! out as `category * bins + bin`.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::graph::{real, MobilityGraph};

/// Added to every node message so the aggregation never sees an all-zero set.
pub const MESSAGE_EPS: f64 = 1e-7;
/// Floor on the message norm in the update rescaling.
pub const NORM_FLOOR: f64 = 1e-12;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const FUSION_LAYERS: usize = 3;
pub const RESIDUAL_UNITS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub categories: usize,
    pub bins: usize,
    /// Width of node and edge embeddings.
    pub hidden: usize,
    /// Width of the user embedding.
    pub embed: usize,
    /// Hidden width of the readout attention perceptron.
    pub attn_hidden: usize,
    pub decoder_hidden: usize,
    pub heads: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            categories: 10,
            bins: 48,
            hidden: 64,
            embed: 24,
            attn_hidden: 16,
            decoder_hidden: 128,
            heads: 4,
        }
    }
}

impl ModelDims {
    pub fn joint(&self) -> usize {
        self.categories * self.bins
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [
            self.categories,
            self.bins,
            self.hidden,
            self.embed,
            self.attn_hidden,
            self.decoder_hidden,
            self.heads,
        ];
        if all.contains(&0) {
            return Err(ModelError::Dims("all dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::Dims(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid dimensions: {0}")]
    Dims(String),
    #[error("graph does not match the model: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error("checkpoint tensor `{name}`: {reason}")]
    CheckpointTensor { name: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Positions of one fusion layer's tensors within [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionSlots {
    pub node1_w: usize,
    pub node1_b: usize,
    pub node2_w: usize,
    pub node2_b: usize,
    pub message_w: usize,
    pub message_b: usize,
    pub edge1_w: usize,
    pub edge1_b: usize,
    pub edge2_w: usize,
    pub edge2_b: usize,
    pub temperature: usize,
    pub scale: usize,
}

/// Positions of every named tensor within [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slots {
    pub gat_w: usize,
    pub gat_src: usize,
    pub gat_dst: usize,
    pub time1_w: usize,
    pub time1_b: usize,
    pub time2_w: usize,
    pub time2_b: usize,
    pub weight_w: usize,
    pub weight_b: usize,
    pub head_s_w: usize,
    pub head_s_b: usize,
    pub time_gate: usize,
    pub head_t_w: usize,
    pub head_t_b: usize,
    pub fusion: Vec<FusionSlots>,
    pub attn1_w: usize,
    pub attn1_b: usize,
    pub attn2_w: usize,
    pub attn2_b: usize,
    pub triple_w: usize,
    pub triple_b: usize,
    pub dec_in_w: usize,
    pub dec_in_b: usize,
    /// `[w1, b1, w2, b2]` per residual unit.
    pub residual: Vec<[usize; 4]>,
    pub dec_out_w: usize,
    pub dec_out_b: usize,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    /// Weight `[fan_in, fan_out]` and zero bias `[fan_out]`.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(
            format!("{name}.w"),
            vec![fan_in, fan_out],
            Init::Xavier { fan_in, fan_out },
        );
        let b = self.add(format!("{name}.b"), vec![fan_out], Init::Zeros);
        (w, b)
    }
}

fn layout(dims: &ModelDims) -> (Layout, Slots) {
    let (d, cs, ct) = (dims.hidden, dims.categories, dims.bins);
    let per_head = d / dims.heads;
    let mut l = Layout {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let gat_w = l.add(
        "spatial.w".into(),
        vec![cs, d],
        Init::Xavier {
            fan_in: cs,
            fan_out: d,
        },
    );
    let head_vec = Init::Xavier {
        fan_in: per_head,
        fan_out: 1,
    };
    let gat_src = l.add(
        "spatial.att_src".into(),
        vec![dims.heads, per_head],
        head_vec,
    );
    let gat_dst = l.add(
        "spatial.att_dst".into(),
        vec![dims.heads, per_head],
        head_vec,
    );
    let (time1_w, time1_b) = l.linear("temporal.l1", ct, d);
    let (time2_w, time2_b) = l.linear("temporal.l2", d, d);
    let (weight_w, weight_b) = l.linear("weights", 3, d);
    let (head_s_w, head_s_b) = l.linear("head_s", d, cs);
    let time_gate = l.add("head_t.gate".into(), vec![d], Init::Ones);
    let (head_t_w, head_t_b) = l.linear("head_t", d, ct);
    let fusion = (0..FUSION_LAYERS)
        .map(|i| {
            let (node1_w, node1_b) = l.linear(&format!("fusion{i}.node1"), d, d);
            let (node2_w, node2_b) = l.linear(&format!("fusion{i}.node2"), d, d);
            let (message_w, message_b) = l.linear(&format!("fusion{i}.edge_msg"), 2 * d, d);
            let (edge1_w, edge1_b) = l.linear(&format!("fusion{i}.edge1"), d, d);
            let (edge2_w, edge2_b) = l.linear(&format!("fusion{i}.edge2"), d, d);
            let temperature = l.add(format!("fusion{i}.beta"), vec![], Init::Ones);
            let scale = l.add(format!("fusion{i}.scale"), vec![], Init::Ones);
            FusionSlots {
                node1_w,
                node1_b,
                node2_w,
                node2_b,
                message_w,
                message_b,
                edge1_w,
                edge1_b,
                edge2_w,
                edge2_b,
                temperature,
                scale,
            }
        })
        .collect();
    let (attn1_w, attn1_b) = l.linear("readout.att1", 3, dims.attn_hidden);
    let (attn2_w, attn2_b) = l.linear("readout.att2", dims.attn_hidden, 1);
    let (triple_w, triple_b) = l.linear("readout.triple", 3 * d, dims.embed);
    let (dec_in_w, dec_in_b) = l.linear("decoder.in", dims.embed + cs + ct, dims.decoder_hidden);
    let residual = (0..RESIDUAL_UNITS)
        .map(|i| {
            let (w1, b1) = l.linear(
                &format!("decoder.res{i}.l1"),
                dims.decoder_hidden,
                dims.decoder_hidden,
            );
            let (w2, b2) = l.linear(
                &format!("decoder.res{i}.l2"),
                dims.decoder_hidden,
                dims.decoder_hidden,
            );
            [w1, b1, w2, b2]
        })
        .collect();
    let (dec_out_w, dec_out_b) = l.linear("decoder.out", dims.decoder_hidden, dims.joint());
    let slots = Slots {
        gat_w,
        gat_src,
        gat_dst,
        time1_w,
        time1_b,
        time2_w,
        time2_b,
        weight_w,
        weight_b,
        head_s_w,
        head_s_b,
        time_gate,
        head_t_w,
        head_t_b,
        fusion,
        attn1_w,
        attn1_b,
        attn2_w,
        attn2_b,
        triple_w,
        triple_b,
        dec_in_w,
        dec_in_b,
        residual,
        dec_out_w,
        dec_out_b,
    };
    (l, slots)
}

/// All trainable tensors, in a fixed order, with their names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub slots: Slots,
}

/// Xavier-uniform weights, zero biases, unit temperatures, scales and time
/// gate. Deterministic per seed.
pub fn init_params(seed: u64, dims: ModelDims) -> Result<ModelParams, ModelError> {
    dims.validate()?;
    let (l, slots) = layout(&dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = l
        .shapes
        .iter()
        .zip(&l.inits)
        .map(|(shape, init)| {
            let n: usize = shape.iter().product();
            let values = match *init {
                Init::Xavier { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Tensor::new(shape.clone(), values, true)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModelParams {
        dims,
        names: l.names,
        tensors,
        slots,
    })
}

impl ModelParams {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor on `tape`; with `track` the tape records their
    /// gradients.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.zero_grad();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect()
    }
}

/// Graph arrays in the form the forward pass consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInputs {
    pub num_nodes: usize,
    pub categories: usize,
    pub bins: usize,
    /// One-hot categories, `num_nodes × categories`.
    pub node_features: Vec<f64>,
    /// Transit vectors, `edges × bins`.
    pub transit: Vec<f64>,
    /// Normalized weight triples, `edges × 3`.
    pub weights: Vec<f64>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Attention pairs `(target, source)`: each node with itself and every
    /// distinct in-neighbor.
    pub attention_pairs: Vec<(usize, usize)>,
}

impl GraphInputs {
    pub fn from_graph(g: &MobilityGraph) -> Self {
        let n = g.nodes.len();
        let mut node_features = vec![0.0; n * g.num_categories];
        for (i, node) in g.nodes.iter().enumerate() {
            node_features[i * g.num_categories + node.category] = 1.0;
        }
        let transit = g
            .edges
            .iter()
            .flat_map(|e| e.transit_vector(g.num_bins))
            .collect();
        let weights = g.normalized_weights.iter().flatten().copied().collect();
        let src = g.edges.iter().map(|e| e.src).collect();
        let dst = g.edges.iter().map(|e| e.dst).collect();
        let mut incoming: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        for e in &g.edges {
            incoming[e.dst].insert(e.src);
        }
        let attention_pairs = incoming
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
            .collect();
        Self {
            num_nodes: n,
            categories: g.num_categories,
            bins: g.num_bins,
            node_features,
            transit,
            weights,
            src,
            dst,
            attention_pairs,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    fn check(&self, dims: &ModelDims) -> Result<(), ModelError> {
        if self.categories != dims.categories || self.bins != dims.bins {
            return Err(ModelError::Input(format!(
                "graph has {} categories and {} bins, model expects {} and {}",
                self.categories, self.bins, dims.categories, dims.bins
            )));
        }
        if self.num_nodes == 0 || self.num_edges() == 0 {
            return Err(ModelError::Input(
                "graph needs at least one node and one edge".into(),
            ));
        }
        Ok(())
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `x` as a single-row matrix.
fn row(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let n = tape.value(x).len();
    tape.reshape(x, [1, n])
}

/// `x` as a single-column matrix.
fn column(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let n = tape.value(x).len();
    tape.reshape(x, [n, 1])
}

fn constant(tape: &mut Tape, shape: Vec<usize>, values: Vec<f64>) -> Result<Var, TensorError> {
    Ok(tape.constant(Tensor::new(shape, values, false)?))
}

/// Multi-head graph attention over in-neighbors plus self, heads
/// concatenated. Returns `nodes × hidden`.
pub fn spatial_block(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    g: &GraphInputs,
) -> Result<Var, TensorError> {
    let s = &params.slots;
    let (heads, hidden) = (params.dims.heads, params.dims.hidden);
    let per_head = hidden / heads;
    let n = g.num_nodes;
    let x = constant(tape, vec![n, g.categories], g.node_features.clone())?;
    let wh = tape.matmul(x, p[s.gat_w])?;
    // Row `node * heads + k` holds head k's slice of the node's projection.
    let wh = tape.reshape(wh, [n * heads, per_head])?;
    let head_of: Vec<usize> = (0..n * heads).map(|r| r % heads).collect();
    let a_dst = tape.gather_rows(p[s.gat_dst], &head_of)?;
    let a_src = tape.gather_rows(p[s.gat_src], &head_of)?;
    let t = tape.mul(wh, a_dst)?;
    let score_dst = tape.sum(t, Some(1))?;
    let t = tape.mul(wh, a_src)?;
    let score_src = tape.sum(t, Some(1))?;

    let mut target_rows = Vec::with_capacity(g.attention_pairs.len() * heads);
    let mut source_rows = Vec::with_capacity(g.attention_pairs.len() * heads);
    for &(i, j) in &g.attention_pairs {
        for k in 0..heads {
            target_rows.push(i * heads + k);
            source_rows.push(j * heads + k);
        }
    }
    let sd = tape.gather_rows(score_dst, &target_rows)?;
    let ss = tape.gather_rows(score_src, &source_rows)?;
    let raw = tape.add(sd, ss)?;
    let raw = tape.leaky_relu(raw, LEAKY_SLOPE)?;
    let alpha = tape.segment_softmax(raw, &target_rows)?;
    let alpha = column(tape, alpha)?;
    let msgs = tape.gather_rows(wh, &source_rows)?;
    let weighted = tape.mul(msgs, alpha)?;
    let agg = tape.segment_sum(weighted, &target_rows, n * heads)?;
    tape.reshape(agg, [n, hidden])
}

/// Two-layer perceptron over transit vectors. Returns `edges × hidden`.
pub fn temporal_block(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    g: &GraphInputs,
) -> Result<Var, TensorError> {
    let s = &params.slots;
    let e = constant(tape, vec![g.num_edges(), g.bins], g.transit.clone())?;
    let h = linear(tape, e, p[s.time1_w], p[s.time1_b])?;
    let h = tape.relu(h)?;
    linear(tape, h, p[s.time2_w], p[s.time2_b])
}

/// Linear projection of the normalized weight triples, `edges × hidden`.
pub fn weight_projection(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    g: &GraphInputs,
) -> Result<Var, TensorError> {
    let s = &params.slots;
    let w = constant(tape, vec![g.num_edges(), 3], g.weights.clone())?;
    linear(tape, w, p[s.weight_w], p[s.weight_b])
}

/// Category logits from the mean node embedding.
pub fn head_spatial(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    nodes: Var,
) -> Result<Var, TensorError> {
    let s = &params.slots;
    let pooled = tape.mean(nodes, Some(0))?;
    let pooled = row(tape, pooled)?;
    let y = linear(tape, pooled, p[s.head_s_w], p[s.head_s_b])?;
    let n = params.dims.categories;
    tape.reshape(y, [n])
}

/// Time-bin logits from the gated sum of edge embeddings.
pub fn head_temporal(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    edges: Var,
) -> Result<Var, TensorError> {
    let s = &params.slots;
    let gated = tape.mul(edges, p[s.time_gate])?;
    let pooled = tape.sum(gated, Some(0))?;
    let pooled = row(tape, pooled)?;
    let y = linear(tape, pooled, p[s.head_t_w], p[s.head_t_b])?;
    let n = params.dims.bins;
    tape.reshape(y, [n])
}

/// Two-layer perceptron with a hidden rectifier.
fn mlp2(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var, TensorError> {
    let h = linear(tape, x, w1, b1)?;
    let h = tape.relu(h)?;
    linear(tape, h, w2, b2)
}

/// `x + scale * (|x| / max(|m|, floor)) * m`, row by row.
fn rescaled_sum(tape: &mut Tape, x: Var, m: Var, scale: Var) -> Result<Var, TensorError> {
    let xn = tape.row_norms(x)?;
    let mn = tape.row_norms(m)?;
    let mn = tape.clamp_min(mn, NORM_FLOOR)?;
    let ratio = tape.div(xn, mn)?;
    let ratio = column(tape, ratio)?;
    let ratio = tape.mul(ratio, scale)?;
    let t = tape.mul(ratio, m)?;
    tape.add(x, t)
}

/// Aggregated node messages, `nodes × hidden`. Each message is scored by
/// the mean of its entries times the layer temperature and softmaxed over
/// the messages arriving at the same node; nodes without incoming edges get
/// a zero row.
pub fn aggregate_messages(
    tape: &mut Tape,
    messages: Var,
    temperature: Var,
    dst: &[usize],
    num_nodes: usize,
) -> Result<Var, TensorError> {
    let score = tape.mean(messages, Some(1))?;
    let score = tape.mul(score, temperature)?;
    let weight = tape.segment_softmax(score, dst)?;
    let weight = column(tape, weight)?;
    let weighted = tape.mul(messages, weight)?;
    tape.segment_sum(weighted, dst, num_nodes)
}

/// One message-passing layer updating node and edge embeddings together.
/// Returns `(nodes', edges')`.
#[allow(clippy::too_many_arguments)]
pub fn fusion_layer(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    layer: usize,
    nodes: Var,
    edges: Var,
    weights: Var,
    g: &GraphInputs,
) -> Result<(Var, Var), TensorError> {
    let s = &params.slots.fusion[layer];
    let h_src = tape.gather_rows(nodes, &g.src)?;
    let h_dst = tape.gather_rows(nodes, &g.dst)?;

    let m = tape.add(h_src, edges)?;
    let m = tape.add(m, weights)?;
    let m = tape.relu(m)?;
    let m = tape.add_scalar(m, MESSAGE_EPS)?;
    let m_v = aggregate_messages(tape, m, p[s.temperature], &g.dst, g.num_nodes)?;
    let x = rescaled_sum(tape, nodes, m_v, p[s.scale])?;
    let nodes_next = mlp2(
        tape,
        x,
        p[s.node1_w],
        p[s.node1_b],
        p[s.node2_w],
        p[s.node2_b],
    )?;

    let pair = tape.concat(&[h_dst, h_src], 1)?;
    let m_e = linear(tape, pair, p[s.message_w], p[s.message_b])?;
    let m_e = tape.relu(m_e)?;
    let x = rescaled_sum(tape, edges, m_e, p[s.scale])?;
    let edges_next = mlp2(
        tape,
        x,
        p[s.edge1_w],
        p[s.edge1_b],
        p[s.edge2_w],
        p[s.edge2_b],
    )?;
    Ok((nodes_next, edges_next))
}

/// Edge attention weights over the normalized weight triples, shape
/// `[edges]`, summing to one.
pub fn readout_attention(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    g: &GraphInputs,
) -> Result<Var, TensorError> {
    let s = &params.slots;
    let w = constant(tape, vec![g.num_edges(), 3], g.weights.clone())?;
    let score = mlp2(
        tape,
        w,
        p[s.attn1_w],
        p[s.attn1_b],
        p[s.attn2_w],
        p[s.attn2_b],
    )?;
    let score = tape.reshape(score, [g.num_edges()])?;
    tape.segment_softmax(score, &vec![0; g.num_edges()])
}

/// Attention-weighted sum of per-edge `(destination, edge, source)`
/// embeddings projected to the user embedding width.
pub fn readout(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    nodes: Var,
    edges: Var,
    g: &GraphInputs,
) -> Result<Var, TensorError> {
    let s = &params.slots;
    let a = readout_attention(tape, p, params, g)?;
    let a = column(tape, a)?;
    let h_dst = tape.gather_rows(nodes, &g.dst)?;
    let h_src = tape.gather_rows(nodes, &g.src)?;
    let triple = tape.concat(&[h_dst, edges, h_src], 1)?;
    let m = linear(tape, triple, p[s.triple_w], p[s.triple_b])?;
    let weighted = tape.mul(m, a)?;
    tape.sum(weighted, Some(0))
}

/// Joint logits from the user embedding and both head outputs.
pub fn decode(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    embedding: Var,
    phi_s: Var,
    phi_t: Var,
) -> Result<Var, TensorError> {
    let s = &params.slots;
    let z = tape.concat(&[embedding, phi_s, phi_t], 0)?;
    let z = row(tape, z)?;
    let mut x = linear(tape, z, p[s.dec_in_w], p[s.dec_in_b])?;
    for &[w1, b1, w2, b2] in &s.residual {
        let r = mlp2(tape, x, p[w1], p[b1], p[w2], p[b2])?;
        x = tape.add(x, r)?;
    }
    let y = linear(tape, x, p[s.dec_out_w], p[s.dec_out_b])?;
    let n = params.dims.joint();
    tape.reshape(y, [n])
}

/// Handles to every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub nodes: Var,
    pub edges: Var,
    pub weights: Var,
    pub fused_nodes: Var,
    pub fused_edges: Var,
    pub phi_s: Var,
    pub phi_t: Var,
    pub embedding: Var,
    pub phi_st: Var,
}

/// Records the full forward pass on `tape` with parameter handles `p`.
pub fn forward_on_tape(
    tape: &mut Tape,
    p: &[Var],
    params: &ModelParams,
    g: &GraphInputs,
) -> Result<ForwardVars, ModelError> {
    g.check(&params.dims)?;
    let nodes = spatial_block(tape, p, params, g)?;
    let edges = temporal_block(tape, p, params, g)?;
    let phi_s = head_spatial(tape, p, params, nodes)?;
    let phi_t = head_temporal(tape, p, params, edges)?;
    let weights = weight_projection(tape, p, params, g)?;
    let (mut v, mut e) = (nodes, edges);
    for layer in 0..FUSION_LAYERS {
        (v, e) = fusion_layer(tape, p, params, layer, v, e, weights, g)?;
    }
    let embedding = readout(tape, p, params, v, e, g)?;
    let phi_st = decode(tape, p, params, embedding, phi_s, phi_t)?;
    Ok(ForwardVars {
        nodes,
        edges,
        weights,
        fused_nodes: v,
        fused_edges: e,
        phi_s,
        phi_t,
        embedding,
        phi_st,
    })
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardState {
    /// Decoupled node embeddings, `nodes × hidden`.
    pub nodes: Tensor,
    /// Decoupled edge embeddings, `edges × hidden`.
    pub edges: Tensor,
    pub weights: Tensor,
    pub fused_nodes: Tensor,
    pub fused_edges: Tensor,
    pub phi_s: Vec<f64>,
    pub phi_t: Vec<f64>,
    pub embedding: Vec<f64>,
    pub phi_st: Vec<f64>,
}

impl ForwardState {
    pub fn is_finite(&self) -> bool {
        [
            &self.nodes,
            &self.edges,
            &self.weights,
            &self.fused_nodes,
            &self.fused_edges,
        ]
        .iter()
        .all(|t| t.is_finite())
            && [&self.phi_s, &self.phi_t, &self.embedding, &self.phi_st]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn detached(tape: &Tape, v: Var) -> Tensor {
    let mut t = tape.value(v).clone();
    t.set_requires_grad(false);
    t
}

/// Forward pass without gradient tracking.
pub fn forward(g: &GraphInputs, params: &ModelParams) -> Result<ForwardState, ModelError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let f = forward_on_tape(&mut tape, &p, params, g)?;
    Ok(ForwardState {
        nodes: detached(&tape, f.nodes),
        edges: detached(&tape, f.edges),
        weights: detached(&tape, f.weights),
        fused_nodes: detached(&tape, f.fused_nodes),
        fused_edges: detached(&tape, f.fused_edges),
        phi_s: tape.values(f.phi_s).to_vec(),
        phi_t: tape.values(f.phi_t).to_vec(),
        embedding: tape.values(f.embedding).to_vec(),
        phi_st: tape.values(f.phi_st).to_vec(),
    })
}

/// Writes parameters in the `STPARAMS 1` text format: one line per tensor
/// with its name, comma-joined shape (`-` for a scalar) and values.
pub fn save_params<W: Write>(mut w: W, params: &ModelParams) -> io::Result<()> {
    writeln!(w, "STPARAMS 1")?;
    let dims = &params.dims;
    writeln!(
        w,
        "dims {} {} {} {} {} {} {}",
        dims.categories,
        dims.bins,
        dims.hidden,
        dims.embed,
        dims.attn_hidden,
        dims.decoder_hidden,
        dims.heads
    )?;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        write_tensor_line(&mut w, name, t.shape(), t.values())?;
    }
    Ok(())
}

pub(crate) fn write_tensor_line<W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    values: &[f64],
) -> io::Result<()> {
    let shape = if shape.is_empty() {
        "-".to_string()
    } else {
        shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    };
    write!(w, "{name} {shape}")?;
    for v in values {
        write!(w, " {}", real(*v))?;
    }
    writeln!(w)
}

/// One parsed `name shape values…` line.
pub(crate) struct TensorLine {
    pub line: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub(crate) fn parse_tensor_line(line: usize, text: &str) -> Result<TensorLine, ModelError> {
    let bad = |reason: String| ModelError::Checkpoint { line, reason };
    let mut parts = text.split_whitespace();
    let name = parts
        .next()
        .ok_or_else(|| bad("empty line".into()))?
        .to_string();
    let shape_text = parts
        .next()
        .ok_or_else(|| bad(format!("`{name}` has no shape")))?;
    let shape = if shape_text == "-" {
        Vec::new()
    } else {
        shape_text
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("`{name}` has malformed shape `{shape_text}`")))?
    };
    let values = parts
        .map(|s| s.parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad(format!("`{name}` has a malformed value")))?;
    let expected: usize = shape.iter().product();
    if values.len() != expected {
        return Err(ModelError::CheckpointTensor {
            name,
            reason: format!(
                "shape {shape:?} needs {expected} values, found {}",
                values.len()
            ),
        });
    }
    Ok(TensorLine {
        line,
        name,
        shape,
        values,
    })
}

pub(crate) fn parse_dims(line: usize, text: &str) -> Result<ModelDims, ModelError> {
    let nums: Vec<usize> = text
        .split_whitespace()
        .skip(1)
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| ModelError::Checkpoint {
            line,
            reason: "malformed dims line".into(),
        })?;
    let [categories, bins, hidden, embed, attn_hidden, decoder_hidden, heads] = nums[..] else {
        return Err(ModelError::Checkpoint {
            line,
            reason: format!("dims line needs 7 values, found {}", nums.len()),
        });
    };
    let dims = ModelDims {
        categories,
        bins,
        hidden,
        embed,
        attn_hidden,
        decoder_hidden,
        heads,
    };
    dims.validate()?;
    Ok(dims)
}

/// Fills a freshly laid-out parameter set from tensor lines, checking every
/// name and shape.
pub(crate) fn params_from_lines(
    dims: ModelDims,
    lines: Vec<TensorLine>,
) -> Result<ModelParams, ModelError> {
    let mut params = init_params(0, dims)?;
    if lines.len() != params.tensors.len() {
        return Err(ModelError::Checkpoint {
            line: lines.last().map_or(1, |l| l.line),
            reason: format!(
                "expected {} tensors, found {}",
                params.tensors.len(),
                lines.len()
            ),
        });
    }
    for (i, l) in lines.into_iter().enumerate() {
        if l.name != params.names[i] {
            return Err(ModelError::CheckpointTensor {
                name: l.name,
                reason: format!("expected `{}` at position {i}", params.names[i]),
            });
        }
        if l.shape != params.tensors[i].shape() {
            return Err(ModelError::CheckpointTensor {
                name: l.name,
                reason: format!(
                    "shape {:?}, expected {:?}",
                    l.shape,
                    params.tensors[i].shape()
                ),
            });
        }
        params.tensors[i] = Tensor::new(l.shape, l.values, true)?;
    }
    Ok(params)
}

pub fn load_params<R: BufRead>(reader: R) -> Result<ModelParams, ModelError> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = |line| ModelError::Checkpoint {
        line,
        reason: "expected `STPARAMS 1` header".into(),
    };
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == "STPARAMS 1" => {}
        Some((_, Err(e))) => return Err(e.into()),
        _ => return Err(header(1)),
    }
    let dims = match lines.next() {
        Some((n, Ok(t))) if t.starts_with("dims ") => parse_dims(n, &t)?,
        Some((_, Err(e))) => return Err(e.into()),
        _ => {
            return Err(ModelError::Checkpoint {
                line: 2,
                reason: "expected dims line".into(),
            })
        }
    };
    let mut tensors = Vec::new();
    for (n, text) in lines {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        tensors.push(parse_tensor_line(n, &text)?);
    }
    params_from_lines(dims, tensors)
}
