//! Deterministic mini-batch training with early stopping and resumable state.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{optimizer_step, AdamConfig, OptimState, Tape, Tensor, TensorError};
use crate::exec::Exec;
use crate::graph::{real, MobilityGraph};
use crate::loss::{
    build_targets, total_loss, total_loss_on_tape, ClassPriors, DbLossConfig, DistributionTargets,
    LossError,
};
use crate::model::{
    forward, forward_on_tape, init_params, load_params, params_from_lines, parse_dims,
    parse_tensor_line, save_params, write_tensor_line, GraphInputs, ModelDims, ModelError,
    ModelParams,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("need at least {need} graphs, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("non-finite loss on graph {graph} in epoch {epoch}")]
    NonFinite { graph: String, epoch: usize },
    #[error("graph {graph}: {source}")]
    Graph { graph: String, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("state line {line}: {reason}")]
    State { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub split_ratio: f64,
    /// Share of the training split held out for early stopping.
    pub val_ratio: f64,
    pub dims: ModelDims,
    pub loss: DbLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            split_ratio: 0.8,
            val_ratio: 0.1,
            dims: ModelDims::default(),
            loss: DbLossConfig::default(),
        }
    }
}

/// Keys accepted in config files, with their meaning.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "seed for initialization, splits and shuffling"),
    ("learning_rate", "Adam step size"),
    ("batch_size", "graphs per optimizer step"),
    ("max_epochs", "upper bound on training epochs"),
    (
        "patience",
        "epochs without validation improvement before stopping",
    ),
    (
        "split_ratio",
        "training share of the train/test split, in (0, 1)",
    ),
    (
        "val_ratio",
        "share of the training split held out for stopping, in [0, 1)",
    ),
    ("hidden", "node and edge embedding width"),
    ("embed", "user embedding width"),
    ("attn_hidden", "hidden width of the readout attention"),
    ("decoder_hidden", "decoder width"),
    ("heads", "graph attention heads"),
    ("categories", "number of place categories"),
    ("bins", "number of time bins"),
    ("lambda", "negative-term scale of the balanced loss"),
    ("kappa", "prior log-odds shift scale"),
    ("rebalance_floor", "floor of the re-balancing weight"),
    (
        "rebalance_sharpness",
        "sharpness of the re-balancing sigmoid",
    ),
    ("rebalance_center", "center of the re-balancing sigmoid"),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, TrainError> {
    value.parse().map_err(|_| TrainError::Config {
        line,
        reason: format!("`{key}` has invalid value `{value}`"),
    })
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), TrainError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v, line)?,
            "learning_rate" => self.learning_rate = parse_num(key, v, line)?,
            "batch_size" => self.batch_size = parse_num(key, v, line)?,
            "max_epochs" => self.max_epochs = parse_num(key, v, line)?,
            "patience" => self.patience = parse_num(key, v, line)?,
            "split_ratio" => self.split_ratio = parse_num(key, v, line)?,
            "val_ratio" => self.val_ratio = parse_num(key, v, line)?,
            "hidden" => self.dims.hidden = parse_num(key, v, line)?,
            "embed" => self.dims.embed = parse_num(key, v, line)?,
            "attn_hidden" => self.dims.attn_hidden = parse_num(key, v, line)?,
            "decoder_hidden" => self.dims.decoder_hidden = parse_num(key, v, line)?,
            "heads" => self.dims.heads = parse_num(key, v, line)?,
            "categories" => self.dims.categories = parse_num(key, v, line)?,
            "bins" => self.dims.bins = parse_num(key, v, line)?,
            "lambda" => self.loss.lambda = parse_num(key, v, line)?,
            "kappa" => self.loss.kappa = parse_num(key, v, line)?,
            "rebalance_floor" => self.loss.rebalance_floor = parse_num(key, v, line)?,
            "rebalance_sharpness" => self.loss.rebalance_sharpness = parse_num(key, v, line)?,
            "rebalance_center" => self.loss.rebalance_center = parse_num(key, v, line)?,
            other => {
                return Err(TrainError::Config {
                    line,
                    reason: format!("unknown key `{other}`"),
                })
            }
        }
        Ok(())
    }

    /// Reads `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::Config {
                line: i + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k, v, i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: &str| TrainError::Config {
            line: 0,
            reason: reason.into(),
        };
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(bad("split_ratio must lie in (0, 1)"));
        }
        if !(self.val_ratio >= 0.0 && self.val_ratio < 1.0) {
            return Err(bad("val_ratio must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(bad("batch_size and max_epochs must be positive"));
        }
        self.dims.validate().map_err(|e| bad(&e.to_string()))?;
        self.loss.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(())
    }

    /// Every setting as `key = value` lines, parseable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let l = &self.loss;
        let mut s = String::new();
        let pairs: [(&str, String); 19] = [
            ("seed", self.seed.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("split_ratio", self.split_ratio.to_string()),
            ("val_ratio", self.val_ratio.to_string()),
            ("hidden", d.hidden.to_string()),
            ("embed", d.embed.to_string()),
            ("attn_hidden", d.attn_hidden.to_string()),
            ("decoder_hidden", d.decoder_hidden.to_string()),
            ("heads", d.heads.to_string()),
            ("categories", d.categories.to_string()),
            ("bins", d.bins.to_string()),
            ("lambda", l.lambda.to_string()),
            ("kappa", l.kappa.to_string()),
            ("rebalance_floor", l.rebalance_floor.to_string()),
            ("rebalance_sharpness", l.rebalance_sharpness.to_string()),
            ("rebalance_center", l.rebalance_center.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Seeded shuffle followed by a prefix split of `round(ratio * n)` items,
/// kept within `1..n` so neither side is empty. Returns index lists.
pub fn split_dataset(
    n: usize,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if n < 2 {
        return Err(TrainError::TooFew { need: 2, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(k);
    Ok((idx, test))
}

/// Holds out `round(ratio * n)` of a training split for early stopping,
/// never leaving the fitting part empty.
pub fn carve_validation(train: &[usize], ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = train.to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_7a11));
    let v = ((ratio * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
    let val = idx.split_off(idx.len() - v);
    (idx, val)
}

/// One graph prepared for training.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub inputs: GraphInputs,
    pub targets: DistributionTargets,
}

impl Example {
    pub fn from_graph(g: &MobilityGraph) -> Self {
        Self {
            id: g.user_id.clone(),
            inputs: GraphInputs::from_graph(g),
            targets: build_targets(g),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Equal to the training loss when there is no validation set.
    pub val_loss: f64,
    /// Wall-clock time, kept in memory only.
    pub seconds: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.to_bits() == b.val_loss.to_bits()
                    && a.grad_norm_mean.to_bits() == b.grad_norm_mean.to_bits()
                    && a.grad_norm_max.to_bits() == b.grad_norm_max.to_bits()
            })
    }

    /// Per-epoch losses and gradient norms. Wall-clock times are left out so
    /// identical runs write identical logs; see [`TrainLog::write_timing_csv`].
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,grad_norm_mean,grad_norm_max")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.epoch,
                real(e.train_loss),
                real(e.val_loss),
                real(e.grad_norm_mean),
                real(e.grad_norm_max)
            )?;
        }
        Ok(())
    }

    pub fn write_timing_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,seconds")?;
        for e in &self.epochs {
            writeln!(w, "{},{:.3}", e.epoch, e.seconds)?;
        }
        Ok(())
    }
}

/// Total loss and its gradient with respect to every parameter tensor.
pub fn loss_and_gradient(
    params: &ModelParams,
    ex: &Example,
    priors: &ClassPriors,
    cfg: &DbLossConfig,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let f =
        forward_on_tape(&mut tape, &p, params, &ex.inputs).map_err(|source| TrainError::Graph {
            graph: ex.id.clone(),
            source,
        })?;
    let loss = total_loss_on_tape(&mut tape, &f, &ex.targets, priors, cfg)?;
    let value = tape.values(loss)[0];
    tape.backward(loss)?;
    let grads = p
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((value, grads))
}

/// Mean total loss over `set`, without gradients.
pub fn mean_loss(
    params: &ModelParams,
    set: &[Example],
    priors: &ClassPriors,
    cfg: &DbLossConfig,
    exec: Exec,
) -> Result<f64, TrainError> {
    let losses = exec.map(set, |ex| -> Result<f64, TrainError> {
        let st = forward(&ex.inputs, params).map_err(|source| TrainError::Graph {
            graph: ex.id.clone(),
            source,
        })?;
        Ok(total_loss(&st, &ex.targets, priors, cfg)?.total)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / set.len().max(1) as f64)
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optim: OptimState,
    pub best: ModelParams,
    pub best_loss: f64,
    pub epochs_done: usize,
    pub stale_epochs: usize,
    pub log: TrainLog,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = init_params(cfg.seed, cfg.dims)?;
        Ok(Self {
            optim: OptimState::for_params(&params.tensors),
            best: params.clone(),
            params,
            best_loss: f64::INFINITY,
            epochs_done: 0,
            stale_epochs: 0,
            log: TrainLog::default(),
        })
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.epochs_done >= cfg.max_epochs
            || (self.epochs_done > 0 && self.stale_epochs >= cfg.patience.max(1))
    }
}

/// Result of a training call.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation loss.
    pub params: ModelParams,
    pub log: TrainLog,
    pub state: TrainState,
    /// Backward passes per graph id during this call.
    pub backward_counts: BTreeMap<String, u64>,
    pub stopped_early: bool,
}

/// Per-epoch shuffling stream, independent of how many epochs ran before.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains from scratch.
pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome, TrainError> {
    resume(TrainState::new(cfg)?, train_set, val_set, cfg, exec, None)
}

/// Continues `state` for at most `epoch_budget` further epochs (unbounded
/// when `None`), stopping at `max_epochs` or when patience runs out.
pub fn resume(
    mut state: TrainState,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
    epoch_budget: Option<usize>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::TooFew { need: 1, got: 0 });
    }
    let targets: Vec<DistributionTargets> = train_set.iter().map(|e| e.targets.clone()).collect();
    let priors = ClassPriors::from_targets(&targets)?;
    let adam = cfg.adam();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut ran = 0;

    while !state.finished(cfg) && epoch_budget.is_none_or(|b| ran < b) {
        let epoch = state.epochs_done;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));

        let mut loss_sum = 0.0;
        let mut norms = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let members: Vec<&Example> = batch.iter().map(|&i| &train_set[i]).collect();
            let results = exec.map(&members, |ex| {
                loss_and_gradient(&state.params, ex, &priors, &cfg.loss)
            });
            let mut total: Vec<Vec<f64>> = state
                .params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect();
            for (ex, r) in members.iter().zip(results) {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        graph: ex.id.clone(),
                        epoch,
                    });
                }
                *counts.entry(ex.id.clone()).or_default() += 1;
                loss_sum += loss;
                for (acc, g) in total.iter_mut().zip(&grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let norm = total.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    graph: members[0].id.clone(),
                    epoch,
                });
            }
            norms.push(norm);
            for (t, g) in state.params.tensors.iter_mut().zip(total) {
                t.set_grad(g)?;
            }
            optimizer_step(&mut state.params.tensors, &mut state.optim, &adam)?;
            state.params.tensors.iter_mut().for_each(Tensor::zero_grad);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mean_loss(&state.params, val_set, &priors, &cfg.loss, exec)?
        };
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite {
                graph: "validation set".into(),
                epoch,
            });
        }
        if val_loss < state.best_loss {
            state.best_loss = val_loss;
            state.best = state.params.clone();
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        state.log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
            grad_norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
            grad_norm_max: norms.iter().copied().fold(0.0, f64::max),
        });
        state.epochs_done += 1;
        ran += 1;
    }
    let stopped_early = state.epochs_done < cfg.max_epochs && state.finished(cfg);
    Ok(TrainOutcome {
        params: state.best.clone(),
        log: state.log.clone(),
        state,
        backward_counts: counts,
        stopped_early,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    save_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, TrainError> {
    Ok(load_params(BufReader::new(File::open(path)?))?)
}

/// Writes a resumable state: parameters, moment estimates and best
/// parameters as named tensors, plus the counters and the log without
/// wall-clock times.
pub fn save_state<W: Write>(mut w: W, s: &TrainState) -> io::Result<()> {
    writeln!(w, "STPARAMS 1")?;
    let d = &s.params.dims;
    writeln!(
        w,
        "dims {} {} {} {} {} {} {}",
        d.categories, d.bins, d.hidden, d.embed, d.attn_hidden, d.decoder_hidden, d.heads
    )?;
    writeln!(
        w,
        "state {} {} {} {}",
        s.epochs_done,
        s.stale_epochs,
        s.optim.step,
        real(s.best_loss)
    )?;
    for e in &s.log.epochs {
        writeln!(
            w,
            "log {} {} {} {} {}",
            e.epoch,
            real(e.train_loss),
            real(e.val_loss),
            real(e.grad_norm_mean),
            real(e.grad_norm_max)
        )?;
    }
    let sections: [(&str, Vec<&[f64]>); 4] = [
        (
            "param",
            s.params.tensors.iter().map(Tensor::values).collect(),
        ),
        ("best", s.best.tensors.iter().map(Tensor::values).collect()),
        (
            "m",
            s.optim.first_moment.iter().map(Vec::as_slice).collect(),
        ),
        (
            "v",
            s.optim.second_moment.iter().map(Vec::as_slice).collect(),
        ),
    ];
    for (prefix, values) in sections {
        for ((name, t), vals) in s.params.names.iter().zip(&s.params.tensors).zip(values) {
            write_tensor_line(&mut w, &format!("{prefix}:{name}"), t.shape(), vals)?;
        }
    }
    Ok(())
}

pub fn load_state<R: BufRead>(reader: R) -> Result<TrainState, TrainError> {
    let bad = |line: usize, reason: &str| TrainError::State {
        line,
        reason: reason.into(),
    };
    let mut dims = None;
    let mut counters = None;
    let mut log = TrainLog::default();
    let mut sections: BTreeMap<&'static str, Vec<crate::model::TensorLine>> = BTreeMap::new();
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text?;
        let t = text.trim();
        if line == 1 {
            if t != "STPARAMS 1" {
                return Err(bad(1, "expected `STPARAMS 1` header"));
            }
            continue;
        }
        if t.is_empty() {
            continue;
        }
        if t.starts_with("dims ") {
            dims = Some(parse_dims(line, t)?);
        } else if let Some(rest) = t.strip_prefix("state ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(line, "state line needs 4 fields"));
            }
            let parsed = (
                f[0].parse::<usize>(),
                f[1].parse::<usize>(),
                f[2].parse::<u64>(),
                f[3].parse::<f64>(),
            );
            match parsed {
                (Ok(a), Ok(b), Ok(c), Ok(d)) => counters = Some((a, b, c, d)),
                _ => return Err(bad(line, "malformed state line")),
            }
        } else if let Some(rest) = t.strip_prefix("log ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad(line, "log line needs 5 fields"));
            }
            let nums: Result<Vec<f64>, _> = f[1..].iter().map(|x| x.parse::<f64>()).collect();
            let (Ok(epoch), Ok(n)) = (f[0].parse::<usize>(), nums) else {
                return Err(bad(line, "malformed log line"));
            };
            log.epochs.push(EpochRecord {
                epoch,
                train_loss: n[0],
                val_loss: n[1],
                seconds: 0.0,
                grad_norm_mean: n[2],
                grad_norm_max: n[3],
            });
        } else {
            let mut tl = parse_tensor_line(line, t)?;
            let (prefix, name) = tl
                .name
                .split_once(':')
                .ok_or_else(|| bad(line, "tensor name lacks a section prefix"))?;
            let key = match prefix {
                "param" => "param",
                "best" => "best",
                "m" => "m",
                "v" => "v",
                _ => return Err(bad(line, &format!("unknown section `{prefix}`"))),
            };
            tl.name = name.to_string();
            sections.entry(key).or_default().push(tl);
        }
    }
    let dims = dims.ok_or_else(|| bad(2, "missing dims line"))?;
    let (epochs_done, stale_epochs, step, best_loss) =
        counters.ok_or_else(|| bad(3, "missing state line"))?;
    let mut take = |k: &str| sections.remove(k).unwrap_or_default();
    let params = params_from_lines(dims, take("param"))?;
    let best = params_from_lines(dims, take("best"))?;
    let m = params_from_lines(dims, take("m"))?;
    let v = params_from_lines(dims, take("v"))?;
    Ok(TrainState {
        optim: OptimState {
            first_moment: m.tensors.into_iter().map(Tensor::into_values).collect(),
            second_moment: v.tensors.into_iter().map(Tensor::into_values).collect(),
            step,
        },
        params,
        best,
        best_loss,
        epochs_done,
        stale_epochs,
        log,
    })
}
