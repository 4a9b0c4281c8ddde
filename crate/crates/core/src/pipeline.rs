//! Glue shared by the command line and the end-to-end checks: graph
//! building over a corpus, dataset splits, per-head scoring and embedding
//! export.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::autodiff::{grad_check_staged, Coverage, GradCheckReport, Tape, TensorError, Var};
use crate::eval::{
    multilabel_metrics, multilabel_metrics_sets, sigmoid, softmax, top_k, EvalError, MetricsReport,
};
use crate::exec::Exec;
use crate::graph::{build_graph, GraphEdge, GraphError, GraphNode, MobilityGraph};
use crate::ingest::UserHistory;
use crate::loss::{build_targets, total_loss_on_tape, ClassPriors, DbLossConfig, LossError};
use crate::model::{
    decode, forward, forward_on_tape, init_params, ForwardState, ForwardVars, GraphInputs,
    ModelDims, ModelError, ModelParams,
};
use crate::train::{carve_validation, split_dataset, Example, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("split file line {line}: {reason}")]
    Split { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub fn build_graphs(
    histories: &[UserHistory],
    categories: usize,
    exec: Exec,
) -> Result<Vec<MobilityGraph>, GraphError> {
    exec.map(histories, |h| build_graph(h, categories))
        .into_iter()
        .collect()
}

/// Indices into the corpus for each role, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let (train, test) = split_dataset(n, cfg.split_ratio, cfg.seed)?;
        let (mut train, mut val) = carve_validation(&train, cfg.val_ratio, cfg.seed);
        let mut test = test;
        for set in [&mut train, &mut val, &mut test] {
            set.sort_unstable();
        }
        Ok(Self { train, val, test })
    }

    pub fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
        idx.iter().map(|&i| items[i].clone()).collect()
    }

    /// Writes `user_id,role` lines in corpus order.
    pub fn write<W: Write>(&self, mut w: W, ids: &[String]) -> io::Result<()> {
        let mut role = vec![""; ids.len()];
        for (set, name) in [
            (&self.train, "train"),
            (&self.val, "val"),
            (&self.test, "test"),
        ] {
            for &i in set {
                role[i] = name;
            }
        }
        writeln!(w, "user_id,role")?;
        for (id, r) in ids.iter().zip(role) {
            writeln!(w, "{id},{r}")?;
        }
        Ok(())
    }

    /// Reads a split written by [`Split::write`], matching users by id.
    pub fn read<R: Read>(mut r: R, ids: &[String]) -> Result<Self, PipelineError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut split = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = |reason: String| PipelineError::Split {
                line: i + 1,
                reason,
            };
            let (id, role) = line
                .split_once(',')
                .ok_or_else(|| bad("expected `user_id,role`".into()))?;
            let Some(idx) = ids.iter().position(|x| x == id) else {
                continue;
            };
            match role.trim() {
                "train" => split.train.push(idx),
                "val" => split.val.push(idx),
                "test" => split.test.push(idx),
                "" => {}
                other => return Err(bad(format!("unknown role `{other}`"))),
            }
        }
        Ok(split)
    }
}

pub fn forward_all(
    params: &ModelParams,
    examples: &[Example],
    exec: Exec,
) -> Result<Vec<ForwardState>, ModelError> {
    exec.map(examples, |ex| forward(&ex.inputs, params))
        .into_iter()
        .collect()
}

/// Probability thresholds per head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub spatial: f64,
    pub temporal: f64,
    pub joint: f64,
}

impl Thresholds {
    /// 0.5 for the sigmoid heads and the uniform level `1 / cells` for the
    /// softmax joint head.
    pub fn standard(joint_cells: usize) -> Self {
        Self {
            spatial: 0.5,
            temporal: 0.5,
            joint: 1.0 / joint_cells as f64,
        }
    }

    pub fn uniform(tau: f64) -> Self {
        Self {
            spatial: tau,
            temporal: tau,
            joint: tau,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadReports {
    pub spatial: MetricsReport,
    pub temporal: MetricsReport,
    pub joint: MetricsReport,
    /// Every user predicted as the `k` joint cells most frequent in training.
    pub joint_baseline: MetricsReport,
    pub baseline_k: usize,
}

/// Joint cells most often present among training users, with `k` the
/// rounded mean number of cells per training user.
pub fn prior_baseline(train: &[Example]) -> (Vec<bool>, usize) {
    let cells = train.first().map_or(0, |e| e.targets.joint.len());
    let mut counts = vec![0.0; cells];
    let mut total = 0.0;
    for e in train {
        for (c, y) in counts.iter_mut().zip(&e.targets.joint) {
            *c += y;
        }
        total += e.targets.joint.iter().sum::<f64>();
    }
    let k = (total / train.len().max(1) as f64).round() as usize;
    (top_k(&counts, k), k)
}

pub fn evaluate_heads(
    params: &ModelParams,
    train: &[Example],
    test: &[Example],
    tau: Thresholds,
    exec: Exec,
) -> Result<HeadReports, PipelineError> {
    let states = forward_all(params, test, exec)?;
    let ids: Vec<String> = test.iter().map(|e| e.id.clone()).collect();
    let collect =
        |f: fn(&Example) -> &Vec<f64>| test.iter().map(|e| f(e).clone()).collect::<Vec<_>>();
    let spatial = multilabel_metrics(
        &ids,
        &states.iter().map(|s| sigmoid(&s.phi_s)).collect::<Vec<_>>(),
        &collect(|e| &e.targets.spatial),
        tau.spatial,
    )?;
    let temporal = multilabel_metrics(
        &ids,
        &states.iter().map(|s| sigmoid(&s.phi_t)).collect::<Vec<_>>(),
        &collect(|e| &e.targets.temporal),
        tau.temporal,
    )?;
    let joint_targets = collect(|e| &e.targets.joint);
    let joint = multilabel_metrics(
        &ids,
        &states
            .iter()
            .map(|s| softmax(&s.phi_st))
            .collect::<Vec<_>>(),
        &joint_targets,
        tau.joint,
    )?;
    let (base, baseline_k) = prior_baseline(train);
    let joint_baseline = multilabel_metrics_sets(&ids, &vec![base; test.len()], &joint_targets)?;
    Ok(HeadReports {
        spatial,
        temporal,
        joint,
        joint_baseline,
        baseline_k,
    })
}

pub fn embeddings(
    params: &ModelParams,
    examples: &[Example],
    exec: Exec,
) -> Result<Vec<Vec<f64>>, ModelError> {
    Ok(forward_all(params, examples, exec)?
        .into_iter()
        .map(|s| s.embedding)
        .collect())
}

/// Three locations visited in a cycle, with distinct bins and weights.
pub fn three_node_graph(categories: usize, bins: usize) -> Result<MobilityGraph, GraphError> {
    let node = |index: usize, category: usize| GraphNode {
        index,
        location_key: format!("loc{index}"),
        category: category % categories,
    };
    let edge = |src, dst, dep: usize, arr: usize, frequency, distance_m, duration_min| GraphEdge {
        src,
        dst,
        departure_bin: dep * bins / 48,
        arrival_bin: arr * bins / 48,
        frequency,
        distance_m,
        duration_min,
    };
    MobilityGraph::from_parts(
        "gradcheck".into(),
        categories,
        bins,
        vec![node(0, 0), node(1, 2), node(2, 5)],
        vec![
            edge(0, 1, 16, 18, 3, 1200.0, 45.0),
            edge(1, 2, 20, 22, 1, 5400.0, 70.0),
            edge(2, 0, 30, 36, 2, 3100.0, 180.0),
        ],
    )
}

/// Compares backpropagated gradients of the total loss on `graph` with
/// central differences of step `h`, for model parameters drawn from `seed`.
pub fn gradient_check(
    graph: &MobilityGraph,
    dims: ModelDims,
    seed: u64,
    loss: &DbLossConfig,
    h: f64,
    coverage: Coverage,
    exec: Exec,
) -> Result<GradCheckReport, PipelineError> {
    let params = init_params(seed, dims)?;
    let inputs = GraphInputs::from_graph(graph);
    let targets = build_targets(graph);
    let priors = ClassPriors::from_targets(std::slice::from_ref(&targets))?;
    let model_err = |e: ModelError| match e {
        ModelError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "forward",
            detail: other.to_string(),
        },
    };
    let loss_err = |e: LossError| match e {
        LossError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "loss",
            detail: other.to_string(),
        },
    };
    let f = |tape: &mut Tape, p: &[Var]| -> Result<Var, TensorError> {
        let fv = forward_on_tape(tape, p, &params, &inputs).map_err(model_err)?;
        total_loss_on_tape(tape, &fv, &targets, &priors, loss).map_err(loss_err)
    };

    // Decoder entries only move the decoder output, so they are differenced
    // on the cached decoder inputs.
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let fv = forward_on_tape(&mut tape, &p, &params, &inputs)?;
    let cached = [fv.embedding, fv.phi_s, fv.phi_t].map(|v| tape.value(v).clone());
    let g = |tape: &mut Tape, p: &[Var]| -> Result<Var, TensorError> {
        let [embedding, phi_s, phi_t] = cached.clone().map(|t| tape.constant(t));
        let phi_st = decode(tape, p, &params, embedding, phi_s, phi_t)?;
        let fv = ForwardVars {
            nodes: embedding,
            edges: embedding,
            weights: embedding,
            fused_nodes: embedding,
            fused_edges: embedding,
            phi_s,
            phi_t,
            embedding,
            phi_st,
        };
        total_loss_on_tape(tape, &fv, &targets, &priors, loss).map_err(loss_err)
    };
    let mut decoder = vec![false; params.tensors.len()];
    let s = &params.slots;
    for i in [s.dec_in_w, s.dec_in_b, s.dec_out_w, s.dec_out_b]
        .into_iter()
        .chain(s.residual.iter().flatten().copied())
    {
        decoder[i] = true;
    }
    Ok(grad_check_staged(
        f,
        g,
        &decoder,
        &params.tensors,
        h,
        coverage,
        exec,
    )?)
}
