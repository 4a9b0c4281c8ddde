//! Prediction metrics, distribution distances, embedding correlations,
//! mobility indexes and latent response summaries.

use std::collections::BTreeSet;
use std::io::{self, Write};

use thiserror::Error;

use crate::exec::Exec;
use crate::graph::{real, MobilityGraph};
use crate::ingest::UserHistory;

/// Floor applied to the mean movement similarity before its logarithm.
pub const SIMILARITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("{0} is all zeros")]
    ZeroMass(&'static str),
    #[error("{0} is constant; correlation undefined")]
    Constant(&'static str),
    #[error("need at least {need} {what}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub user_id: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Corpus means of per-user example-based scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Users without any positive label, left out of the means.
    pub excluded: usize,
    pub per_user: Vec<UserMetrics>,
}

/// Example-based scores of one predicted set against one target set.
/// `None` when the target set is empty.
pub fn set_metrics(predicted: &[bool], truth: &[bool]) -> Option<(f64, f64, f64, f64)> {
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in predicted.iter().zip(truth) {
        inter += usize::from(a && b);
        p += usize::from(a);
        t += usize::from(b);
    }
    if t == 0 {
        return None;
    }
    let union = p + t - inter;
    let accuracy = inter as f64 / union as f64;
    let precision = if p == 0 { 0.0 } else { inter as f64 / p as f64 };
    let recall = inter as f64 / t as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Some((accuracy, precision, recall, f1))
}

/// Scores predicted label sets against binary targets.
pub fn multilabel_metrics_sets(
    ids: &[String],
    predicted: &[Vec<bool>],
    targets: &[Vec<f64>],
) -> Result<MetricsReport, EvalError> {
    if ids.len() != predicted.len() || ids.len() != targets.len() {
        return Err(EvalError::Length(predicted.len(), targets.len()));
    }
    let mut per_user = Vec::new();
    let mut excluded = 0;
    for ((id, p), y) in ids.iter().zip(predicted).zip(targets) {
        if p.len() != y.len() {
            return Err(EvalError::Length(p.len(), y.len()));
        }
        let truth: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
        match set_metrics(p, &truth) {
            Some((accuracy, precision, recall, f1)) => per_user.push(UserMetrics {
                user_id: id.clone(),
                accuracy,
                precision,
                recall,
                f1,
            }),
            None => excluded += 1,
        }
    }
    let n = per_user.len().max(1) as f64;
    let mean = |f: fn(&UserMetrics) -> f64| per_user.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        accuracy: mean(|u| u.accuracy),
        precision: mean(|u| u.precision),
        recall: mean(|u| u.recall),
        f1: mean(|u| u.f1),
        excluded,
        per_user,
    })
}

/// Predicts every label whose probability is at least `tau`.
pub fn multilabel_metrics(
    ids: &[String],
    probabilities: &[Vec<f64>],
    targets: &[Vec<f64>],
    tau: f64,
) -> Result<MetricsReport, EvalError> {
    let predicted: Vec<Vec<bool>> = probabilities
        .iter()
        .map(|p| p.iter().map(|&x| x >= tau).collect())
        .collect();
    multilabel_metrics_sets(ids, &predicted, targets)
}

pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Marks the `k` entries with the largest scores, ties broken by index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = vec![false; scores.len()];
    for &i in idx.iter().take(k) {
        out[i] = true;
    }
    out
}

fn normalized(v: &[f64], what: &'static str) -> Result<Vec<f64>, EvalError> {
    if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(EvalError::Invalid(format!(
            "{what} must be finite and non-negative"
        )));
    }
    let s: f64 = v.iter().sum();
    if s <= 0.0 {
        return Err(EvalError::ZeroMass(what));
    }
    Ok(v.iter().map(|x| x / s).collect())
}

/// Base-2 Jensen-Shannon distance of two (unnormalized) distributions.
pub fn jensen_distance(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::Length(p.len(), q.len()));
    }
    let p = normalized(p, "first distribution")?;
    let q = normalized(q, "second distribution")?;
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).log2();
        }
    }
    Ok(js.clamp(0.0, 1.0).sqrt())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pearson correlation; an error when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::TooFew {
            what: "pairs",
            need: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(EvalError::Constant("first variable"));
    }
    if syy == 0.0 {
        return Err(EvalError::Constant("second variable"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Visit-frequency distributions of one user's graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyDistributions {
    /// Origin and destination categories, weighted by edge frequency.
    pub spatial: Vec<f64>,
    /// Departure and arrival bins, weighted by edge frequency.
    pub temporal: Vec<f64>,
    /// `(destination category, arrival bin)` at `category * bins + bin`.
    pub joint: Vec<f64>,
}

pub fn frequency_distributions(g: &MobilityGraph) -> FrequencyDistributions {
    let (cs, ct) = (g.num_categories, g.num_bins);
    let mut f = FrequencyDistributions {
        spatial: vec![0.0; cs],
        temporal: vec![0.0; ct],
        joint: vec![0.0; cs * ct],
    };
    for e in &g.edges {
        let w = f64::from(e.frequency);
        let (cs_src, cs_dst) = (g.nodes[e.src].category, g.nodes[e.dst].category);
        f.spatial[cs_src] += w;
        f.spatial[cs_dst] += w;
        f.temporal[e.departure_bin] += w;
        f.temporal[e.arrival_bin] += w;
        f.joint[cs_dst * ct + e.arrival_bin] += w;
    }
    f
}

/// Distances of one unordered user pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDistances {
    pub a: usize,
    pub b: usize,
    pub d_rep: f64,
    pub d_true: f64,
}

/// Euclidean embedding distance and Jensen distribution distance for every
/// pair `i < j`, in row-major order, with their Pearson correlation.
pub fn similarity_correlation(
    embeddings: &[Vec<f64>],
    distributions: &[Vec<f64>],
    exec: Exec,
) -> Result<(f64, Vec<PairDistances>), EvalError> {
    let n = embeddings.len();
    if n != distributions.len() {
        return Err(EvalError::Length(n, distributions.len()));
    }
    if n < 3 {
        return Err(EvalError::TooFew {
            what: "users",
            need: 3,
            got: n,
        });
    }
    let rows = exec.map_range(n, |i| -> Result<Vec<PairDistances>, EvalError> {
        ((i + 1)..n)
            .map(|j| {
                Ok(PairDistances {
                    a: i,
                    b: j,
                    d_rep: euclidean(&embeddings[i], &embeddings[j]),
                    d_true: jensen_distance(&distributions[i], &distributions[j])?,
                })
            })
            .collect()
    });
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for r in rows {
        pairs.extend(r?);
    }
    let x: Vec<f64> = pairs.iter().map(|p| p.d_rep).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.d_true).collect();
    let r = pearson(&x, &y).map_err(|e| match e {
        EvalError::Constant("first variable") => EvalError::Constant("embedding distance"),
        EvalError::Constant(_) => EvalError::Constant("distribution distance"),
        other => other,
    })?;
    Ok((r, pairs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub r_s: f64,
    pub r_t: f64,
    pub r_st: f64,
    pub pair_count: usize,
    /// `(a, b, d_rep, d_s, d_t, d_st)` per pair.
    pub pairs: Vec<(usize, usize, f64, f64, f64, f64)>,
}

pub fn correlation_report(
    embeddings: &[Vec<f64>],
    freqs: &[FrequencyDistributions],
    exec: Exec,
) -> Result<CorrelationReport, EvalError> {
    let pick = |f: fn(&FrequencyDistributions) -> &Vec<f64>| {
        freqs.iter().map(|x| f(x).clone()).collect::<Vec<_>>()
    };
    let (r_s, ps) = similarity_correlation(embeddings, &pick(|f| &f.spatial), exec)?;
    let (r_t, pt) = similarity_correlation(embeddings, &pick(|f| &f.temporal), exec)?;
    let (r_st, pst) = similarity_correlation(embeddings, &pick(|f| &f.joint), exec)?;
    let pairs = ps
        .iter()
        .zip(&pt)
        .zip(&pst)
        .map(|((s, t), st)| (s.a, s.b, s.d_rep, s.d_true, t.d_true, st.d_true))
        .collect::<Vec<_>>();
    Ok(CorrelationReport {
        r_s,
        r_t,
        r_st,
        pair_count: pairs.len(),
        pairs,
    })
}

/// `sqrt(n_t² + n_s²)` on normalized inputs.
pub fn index_st1(n_t: f64, n_s: f64) -> f64 {
    n_t.hypot(n_s)
}

/// Average daily movement count and average daily number of distinct
/// categories.
pub fn daily_activity(h: &UserHistory) -> (f64, f64) {
    let days = h.trajectories.len().max(1) as f64;
    let moves: usize = h.trajectories.iter().map(|t| t.movements()).sum();
    let cats: usize = h
        .trajectories
        .iter()
        .map(|t| {
            t.visits
                .iter()
                .map(|v| v.category)
                .collect::<BTreeSet<_>>()
                .len()
        })
        .sum();
    (moves as f64 / days, cats as f64 / days)
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// The diversity index of every user, with both inputs min-max normalized
/// over the corpus (a constant input normalizes to zero).
pub fn index_st1_corpus(histories: &[UserHistory]) -> Vec<f64> {
    let (t, s): (Vec<f64>, Vec<f64>) = histories.iter().map(daily_activity).unzip();
    let (t, s) = (min_max(&t), min_max(&s));
    t.iter().zip(&s).map(|(&a, &b)| index_st1(a, b)).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Log of the mean over movements of their mean cosine similarity to every
/// other movement, floored at [`SIMILARITY_FLOOR`].
pub fn index_st2_features(features: &[Vec<f64>]) -> Result<f64, EvalError> {
    let n = features.len();
    if n < 2 {
        return Err(EvalError::TooFew {
            what: "movements",
            need: 2,
            got: n,
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        let s: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| cosine(&features[i], &features[j]))
            .sum();
        total += s / (n - 1) as f64;
    }
    Ok((total / n as f64).clamp(SIMILARITY_FLOOR, 1.0).ln())
}

/// Origin one-hot, destination one-hot and transit vector of every movement.
pub fn movement_features(h: &UserHistory, categories: usize, bins: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for day in &h.trajectories {
        for pair in day.visits.windows(2) {
            let mut f = vec![0.0; 2 * categories + bins];
            f[pair[0].category] = 1.0;
            f[categories + pair[1].category] = 1.0;
            f[2 * categories + pair[0].bin()] = 1.0;
            f[2 * categories + pair[1].bin()] = 1.0;
            out.push(f);
        }
    }
    out
}

pub fn index_st2(h: &UserHistory, categories: usize, bins: usize) -> Result<f64, EvalError> {
    index_st2_features(&movement_features(h, categories, bins))
}

/// Mean min-max-scaled embedding per index bin.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMatrix {
    pub bins: usize,
    pub dims: usize,
    /// Row-major `bins × dims`; `None` for a bin without users.
    pub cells: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Lower edge of each bin followed by the upper edge of the last.
    pub edges: Vec<f64>,
}

/// Groups users into `num_bins` equal-width intervals of their index value
/// and averages their scaled embeddings.
pub fn response_matrix(
    embeddings: &[Vec<f64>],
    index: &[f64],
    num_bins: usize,
) -> Result<ResponseMatrix, EvalError> {
    if embeddings.len() != index.len() {
        return Err(EvalError::Length(embeddings.len(), index.len()));
    }
    if embeddings.is_empty() {
        return Err(EvalError::TooFew {
            what: "users",
            need: 1,
            got: 0,
        });
    }
    if num_bins == 0 {
        return Err(EvalError::Invalid("need at least one bin".into()));
    }
    let dims = embeddings[0].len();
    if let Some(e) = embeddings.iter().find(|e| e.len() != dims) {
        return Err(EvalError::Length(e.len(), dims));
    }
    let lo = index.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = index.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(EvalError::Invalid("index values must be finite".into()));
    }
    if num_bins > 1 && hi <= lo {
        return Err(EvalError::Constant("index values"));
    }
    let columns: Vec<Vec<f64>> = (0..dims)
        .map(|j| min_max(&embeddings.iter().map(|e| e[j]).collect::<Vec<_>>()))
        .collect();
    let bin_of = |x: f64| {
        if hi <= lo {
            0
        } else {
            (((x - lo) / (hi - lo) * num_bins as f64) as usize).min(num_bins - 1)
        }
    };
    let mut sums = vec![0.0; num_bins * dims];
    let mut counts = vec![0usize; num_bins];
    for (u, &x) in index.iter().enumerate() {
        let b = bin_of(x);
        counts[b] += 1;
        for j in 0..dims {
            sums[b * dims + j] += columns[j][u];
        }
    }
    let cells = (0..num_bins * dims)
        .map(|k| {
            let c = counts[k / dims];
            (c > 0).then(|| sums[k] / c as f64)
        })
        .collect();
    let width = (hi - lo) / num_bins as f64;
    let edges = (0..=num_bins)
        .map(|b| {
            if b == num_bins {
                hi
            } else {
                lo + width * b as f64
            }
        })
        .collect();
    Ok(ResponseMatrix {
        bins: num_bins,
        dims,
        cells,
        counts,
        edges,
    })
}

/// Linear-interpolation quantile of sorted data (`(n - 1) * p` positions).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// `(row, value)` outside `[q1 - 1.5 IQR, q3 + 1.5 IQR]`.
    pub outliers: Vec<(usize, f64)>,
}

pub fn embedding_stats(embeddings: &[Vec<f64>]) -> Result<Vec<DimensionStats>, EvalError> {
    let first = embeddings.first().ok_or(EvalError::TooFew {
        what: "embeddings",
        need: 1,
        got: 0,
    })?;
    (0..first.len())
        .map(|j| {
            let col: Vec<f64> = embeddings.iter().map(|e| e[j]).collect();
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            let (q1, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.75));
            let iqr = q3 - q1;
            let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
            Ok(DimensionStats {
                min: sorted[0],
                q1,
                median: quantile(&sorted, 0.5),
                q3,
                max: sorted[sorted.len() - 1],
                mean: col.iter().sum::<f64>() / col.len() as f64,
                outliers: col
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v < lo || v > hi)
                    .map(|(i, &v)| (i, v))
                    .collect(),
            })
        })
        .collect()
}

pub fn write_metrics<W: Write>(mut w: W, head: &str, m: &MetricsReport) -> io::Result<()> {
    writeln!(w, "head,user_id,accuracy,precision,recall,f1")?;
    for u in &m.per_user {
        writeln!(
            w,
            "{head},{},{},{},{},{}",
            u.user_id,
            real(u.accuracy),
            real(u.precision),
            real(u.recall),
            real(u.f1)
        )?;
    }
    Ok(())
}

pub fn write_pairs<W: Write>(
    mut w: W,
    ids: &[String],
    report: &CorrelationReport,
) -> io::Result<()> {
    writeln!(w, "user_a,user_b,d_rep,d_s,d_t,d_st")?;
    for &(a, b, r, s, t, st) in &report.pairs {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            ids[a],
            ids[b],
            real(r),
            real(s),
            real(t),
            real(st)
        )?;
    }
    Ok(())
}

pub fn write_response_matrix<W: Write>(mut w: W, m: &ResponseMatrix) -> io::Result<()> {
    let header: Vec<String> = (0..m.dims).map(|j| format!("h{j}")).collect();
    writeln!(w, "bin_low\tbin_high\tusers\t{}", header.join("\t"))?;
    for b in 0..m.bins {
        write!(
            w,
            "{}\t{}\t{}",
            real(m.edges[b]),
            real(m.edges[b + 1]),
            m.counts[b]
        )?;
        for j in 0..m.dims {
            match m.cells[b * m.dims + j] {
                Some(v) => write!(w, "\t{}", real(v))?,
                None => write!(w, "\tNA")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_embedding_stats<W: Write>(mut w: W, stats: &[DimensionStats]) -> io::Result<()> {
    writeln!(w, "dim,min,q1,median,q3,max,mean,outliers")?;
    for (j, s) in stats.iter().enumerate() {
        let rows: Vec<String> = s.outliers.iter().map(|(r, _)| r.to_string()).collect();
        writeln!(
            w,
            "h{j},{},{},{},{},{},{},{}",
            real(s.min),
            real(s.q1),
            real(s.median),
            real(s.q3),
            real(s.max),
            real(s.mean),
            rows.join(";")
        )?;
    }
    Ok(())
}

/// `user_id,h0..h{d-1}` table.
pub fn write_embeddings<W: Write>(
    mut w: W,
    ids: &[String],
    embeddings: &[Vec<f64>],
) -> io::Result<()> {
    let d = embeddings.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..d).map(|j| format!("h{j}")).collect();
    writeln!(w, "user_id,{}", header.join(","))?;
    for (id, e) in ids.iter().zip(embeddings) {
        let vals: Vec<String> = e.iter().map(|&v| real(v)).collect();
        writeln!(w, "{id},{}", vals.join(","))?;
    }
    Ok(())
}
