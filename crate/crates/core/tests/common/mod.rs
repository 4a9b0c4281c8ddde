#![allow(clippy::needless_range_loop)]
//! Independent reference implementations used by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, TimeZone, Timelike};
use rand::seq::SliceRandom;
use rand::Rng;
use trajgraph::graph::{GraphEdge, GraphNode, MobilityGraph};
use trajgraph::ingest::CheckinRecord;
use trajgraph::model::{ModelParams, FUSION_LAYERS, RESIDUAL_UNITS};

// ---------------------------------------------------------------- records

/// Up to `max_records` check-ins of one user over a few days at a handful of
/// venues, each venue with a fixed position and raw category.
pub fn random_user_records<R: Rng>(
    rng: &mut R,
    user: &str,
    max_records: usize,
) -> Vec<CheckinRecord> {
    let raw = [
        "Home (private)",
        "University",
        "Restaurant",
        "Train Station",
        "Office",
        "Park",
        "Unknown thing",
    ];
    let venues: Vec<(String, f64, f64, &str)> = (0..rng.gen_range(1..=8))
        .map(|v| {
            (
                format!("{user}-v{v}"),
                35.6 + rng.gen_range(0.0..0.2),
                139.6 + rng.gen_range(0.0..0.2),
                raw[rng.gen_range(0..raw.len())],
            )
        })
        .collect();
    let offset = FixedOffset::east_opt(rng.gen_range(-12..=12) * 3600).unwrap();
    let start = NaiveDate::from_ymd_opt(2012, 4, 3).unwrap();
    let days = rng.gen_range(1..=6);
    let n = rng.gen_range(1..=max_records);
    let mut out: Vec<CheckinRecord> = (0..n)
        .map(|_| {
            let day = start + Duration::days(rng.gen_range(0..days));
            let minute = rng.gen_range(0..24 * 60);
            let ts = offset
                .from_local_datetime(&day.and_hms_opt(0, 0, 0).unwrap())
                .unwrap()
                + Duration::minutes(minute);
            let (id, lat, lon, cat) = venues[rng.gen_range(0..venues.len())].clone();
            CheckinRecord {
                user_id: user.to_string(),
                timestamp: ts,
                latitude: lat,
                longitude: lon,
                venue_id: Some(id),
                raw_category: Some(cat.to_string()),
            }
        })
        .collect();
    out.shuffle(rng);
    out
}

fn half_hour(ts: &DateTime<FixedOffset>) -> usize {
    (ts.hour() as usize * 2) + (ts.minute() as usize / 30)
}

/// One merged transition as recounted from records.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub count: u32,
    pub total_seconds: i64,
}

/// Transitions keyed by `(origin venue, destination venue, departure bin,
/// arrival bin)`, recounted from raw records: records sorted by instant
/// (ties by offset, venue, category and position),
/// cut at local midnight, consecutive repeats (same venue and half hour, or
/// same instant) merged, and days with a single stop discarded.
pub fn recount_transitions(
    records: &[CheckinRecord],
) -> BTreeMap<(String, String, usize, usize), Transition> {
    let mut sorted: Vec<&CheckinRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (
            a.timestamp,
            a.timestamp.offset().local_minus_utc(),
            &a.venue_id,
            &a.raw_category,
        )
            .cmp(&(
                b.timestamp,
                b.timestamp.offset().local_minus_utc(),
                &b.venue_id,
                &b.raw_category,
            ))
            .then(a.latitude.total_cmp(&b.latitude))
            .then(a.longitude.total_cmp(&b.longitude))
    });
    let mut days: Vec<Vec<&CheckinRecord>> = Vec::new();
    for r in sorted {
        let same_day = days
            .last()
            .and_then(|d| d.last())
            .is_some_and(|p| p.timestamp.date_naive() == r.timestamp.date_naive());
        if !same_day {
            days.push(vec![r]);
            continue;
        }
        let day = days.last_mut().unwrap();
        let prev = *day.last().unwrap();
        let repeat = (prev.venue_id == r.venue_id
            && half_hour(&prev.timestamp) == half_hour(&r.timestamp))
            || prev.timestamp == r.timestamp;
        if !repeat {
            day.push(r);
        }
    }
    let mut out: BTreeMap<(String, String, usize, usize), Transition> = BTreeMap::new();
    for day in days.iter().filter(|d| d.len() >= 2) {
        for w in day.windows(2) {
            let key = (
                w[0].venue_id.clone().unwrap(),
                w[1].venue_id.clone().unwrap(),
                half_hour(&w[0].timestamp),
                half_hour(&w[1].timestamp),
            );
            let t = out.entry(key).or_insert(Transition {
                count: 0,
                total_seconds: 0,
            });
            t.count += 1;
            t.total_seconds += (w[1].timestamp - w[0].timestamp).num_seconds();
        }
    }
    out
}

/// The graph's edges keyed like [`recount_transitions`].
pub fn graph_transitions(g: &MobilityGraph) -> BTreeMap<(String, String, usize, usize), u32> {
    g.edges
        .iter()
        .map(|e| {
            (
                (
                    g.nodes[e.src].location_key.clone(),
                    g.nodes[e.dst].location_key.clone(),
                    e.departure_bin,
                    e.arrival_bin,
                ),
                e.frequency,
            )
        })
        .collect()
}

// ---------------------------------------------------------------- graphs

/// A graph with random categories, bins and weights, assembled directly.
pub fn random_graph<R: Rng>(
    rng: &mut R,
    categories: usize,
    bins: usize,
    max_nodes: usize,
) -> MobilityGraph {
    let n = rng.gen_range(1..=max_nodes);
    let nodes: Vec<GraphNode> = (0..n)
        .map(|i| GraphNode {
            index: i,
            location_key: format!("n{i}"),
            category: rng.gen_range(0..categories),
        })
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    let mut edges = Vec::new();
    for _ in 0..rng.gen_range(1..=3 * n) {
        let dep = rng.gen_range(0..bins);
        let arr = rng.gen_range(dep..bins);
        let (src, dst) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if seen.insert((src, dst, dep, arr)) {
            edges.push(GraphEdge {
                src,
                dst,
                departure_bin: dep,
                arrival_bin: arr,
                frequency: rng.gen_range(1..6),
                distance_m: rng.gen_range(0.0..20_000.0),
                duration_min: rng.gen_range(5.0..300.0),
            });
        }
    }
    MobilityGraph::from_parts("random".into(), categories, bins, nodes, edges).unwrap()
}

/// Relabels nodes by a random permutation and shuffles the edge list.
pub fn permute_graph<R: Rng>(rng: &mut R, g: &MobilityGraph) -> MobilityGraph {
    let n = g.nodes.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut nodes = g.nodes.clone();
    for (old, node) in g.nodes.iter().enumerate() {
        nodes[perm[old]] = GraphNode {
            index: perm[old],
            ..node.clone()
        };
    }
    let mut edges: Vec<GraphEdge> = g
        .edges
        .iter()
        .map(|e| GraphEdge {
            src: perm[e.src],
            dst: perm[e.dst],
            ..e.clone()
        })
        .collect();
    edges.shuffle(rng);
    MobilityGraph::from_parts(
        g.user_id.clone(),
        g.num_categories,
        g.num_bins,
        nodes,
        edges,
    )
    .unwrap()
}

// ---------------------------------------------------------------- model

struct Weights<'a>(&'a ModelParams);

impl Weights<'_> {
    fn get(&self, name: &str) -> &[f64] {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
            .values()
    }

    /// `x · W + b` with `W` stored row-major as `[in, out]`.
    fn affine(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w = self.get(&format!("{prefix}.w"));
        let b = self.get(&format!("{prefix}.b"));
        let out = b.len();
        assert_eq!(w.len(), x.len() * out, "{prefix}");
        (0..out)
            .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[i * out + j]).sum::<f64>())
            .collect()
    }

    fn two_layer(&self, first: &str, second: &str, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .affine(first, x)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        self.affine(second, &h)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn rescale(x: &[f64], m: &[f64], s: f64) -> Vec<f64> {
    let ratio = s * norm(x) / norm(m).max(1e-12);
    x.iter().zip(m).map(|(a, b)| a + ratio * b).collect()
}

/// Reference outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Reference {
    pub phi_s: Vec<f64>,
    pub phi_t: Vec<f64>,
    pub embedding: Vec<f64>,
    pub phi_st: Vec<f64>,
}

/// Straight-line forward pass over one graph, node by node and edge by
/// edge, reading parameters by name.
pub fn reference_forward(p: &ModelParams, g: &MobilityGraph) -> Reference {
    let w = Weights(p);
    let dims = p.dims;
    let (d, heads) = (dims.hidden, dims.heads);
    let dh = d / heads;
    let n = g.nodes.len();

    // Spatial attention over self and distinct in-neighbors.
    let proj: Vec<Vec<f64>> = g
        .nodes
        .iter()
        .map(|node| w.get("spatial.w")[node.category * d..(node.category + 1) * d].to_vec())
        .collect();
    let (a_src, a_dst) = (w.get("spatial.att_src"), w.get("spatial.att_dst"));
    let mut spatial = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut sources = vec![i];
        for e in &g.edges {
            if e.dst == i && !sources.contains(&e.src) {
                sources.push(e.src);
            }
        }
        for k in 0..heads {
            let slice = |v: &[f64]| v[k * dh..(k + 1) * dh].to_vec();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let target = dot(&slice(&proj[i]), &a_dst[k * dh..(k + 1) * dh]);
            let scores: Vec<f64> = sources
                .iter()
                .map(|&j| {
                    let s = target + dot(&slice(&proj[j]), &a_src[k * dh..(k + 1) * dh]);
                    if s > 0.0 {
                        s
                    } else {
                        0.2 * s
                    }
                })
                .collect();
            let alpha = softmax(&scores);
            for (&j, a) in sources.iter().zip(alpha) {
                for c in 0..dh {
                    spatial[i][k * dh + c] += a * proj[j][k * dh + c];
                }
            }
        }
    }

    // Temporal encoding of each edge's departure and arrival.
    let temporal: Vec<Vec<f64>> = g
        .edges
        .iter()
        .map(|e| {
            let mut t = vec![0.0; g.num_bins];
            t[e.departure_bin] = 1.0;
            t[e.arrival_bin] = 1.0;
            w.two_layer("temporal.l1", "temporal.l2", &t)
        })
        .collect();
    let weights: Vec<Vec<f64>> = g
        .normalized_weights
        .iter()
        .map(|x| w.affine("weights", x))
        .collect();

    let mean_node: Vec<f64> = (0..d)
        .map(|c| spatial.iter().map(|v| v[c]).sum::<f64>() / n as f64)
        .collect();
    let phi_s = w.affine("head_s", &mean_node);
    let gate = w.get("head_t.gate");
    let gated: Vec<f64> = (0..d)
        .map(|c| gate[c] * temporal.iter().map(|v| v[c]).sum::<f64>())
        .collect();
    let phi_t = w.affine("head_t", &gated);

    let (mut nodes, mut edges) = (spatial, temporal);
    for layer in 0..FUSION_LAYERS {
        let name = |s: &str| format!("fusion{layer}.{s}");
        let beta = w.get(&name("beta"))[0];
        let scale = w.get(&name("scale"))[0];
        let messages: Vec<Vec<f64>> = g
            .edges
            .iter()
            .enumerate()
            .map(|(k, e)| {
                (0..d)
                    .map(|c| (nodes[e.src][c] + edges[k][c] + weights[k][c]).max(0.0) + 1e-7)
                    .collect()
            })
            .collect();
        let mut next_nodes = Vec::with_capacity(n);
        for v in 0..n {
            let incoming: Vec<usize> = (0..g.edges.len())
                .filter(|&k| g.edges[k].dst == v)
                .collect();
            let mut agg = vec![0.0; d];
            if !incoming.is_empty() {
                let scores: Vec<f64> = incoming
                    .iter()
                    .map(|&k| beta * messages[k].iter().sum::<f64>() / d as f64)
                    .collect();
                for (&k, a) in incoming.iter().zip(softmax(&scores)) {
                    for c in 0..d {
                        agg[c] += a * messages[k][c];
                    }
                }
            }
            let x = rescale(&nodes[v], &agg, scale);
            next_nodes.push(w.two_layer(&name("node1"), &name("node2"), &x));
        }
        let next_edges: Vec<Vec<f64>> = g
            .edges
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let pair: Vec<f64> = nodes[e.dst].iter().chain(&nodes[e.src]).copied().collect();
                let m: Vec<f64> = w
                    .affine(&name("edge_msg"), &pair)
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                let x = rescale(&edges[k], &m, scale);
                w.two_layer(&name("edge1"), &name("edge2"), &x)
            })
            .collect();
        nodes = next_nodes;
        edges = next_edges;
    }

    let scores: Vec<f64> = g
        .normalized_weights
        .iter()
        .map(|x| w.two_layer("readout.att1", "readout.att2", x)[0])
        .collect();
    let attention = softmax(&scores);
    let mut embedding = vec![0.0; dims.embed];
    for (k, e) in g.edges.iter().enumerate() {
        let triple: Vec<f64> = nodes[e.dst]
            .iter()
            .chain(&edges[k])
            .chain(&nodes[e.src])
            .copied()
            .collect();
        for (acc, v) in embedding
            .iter_mut()
            .zip(w.affine("readout.triple", &triple))
        {
            *acc += attention[k] * v;
        }
    }

    let z: Vec<f64> = embedding
        .iter()
        .chain(&phi_s)
        .chain(&phi_t)
        .copied()
        .collect();
    let mut x = w.affine("decoder.in", &z);
    for r in 0..RESIDUAL_UNITS {
        let res = w.two_layer(
            &format!("decoder.res{r}.l1"),
            &format!("decoder.res{r}.l2"),
            &x,
        );
        x = x.iter().zip(res).map(|(a, b)| a + b).collect();
    }
    let phi_st = w.affine("decoder.out", &x);
    Reference {
        phi_s,
        phi_t,
        embedding,
        phi_st,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- metrics

/// Base-2 Jensen-Shannon distance through entropies:
/// `sqrt(H(m) - (H(p) + H(q)) / 2)`.
pub fn jensen_oracle(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let entropy = |v: &[f64]| -> f64 {
        v.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| -x * x.ln() / std::f64::consts::LN_2)
            .sum()
    };
    let pn: Vec<f64> = p.iter().map(|x| x / sp).collect();
    let qn: Vec<f64> = q.iter().map(|x| x / sq).collect();
    let m: Vec<f64> = pn.iter().zip(&qn).map(|(a, b)| (a + b) / 2.0).collect();
    (entropy(&m) - (entropy(&pn) + entropy(&qn)) / 2.0)
        .max(0.0)
        .sqrt()
}

/// Mean product of standard scores.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, sd)
    };
    let ((mx, sx), (my, sy)) = (stats(x), stats(y));
    x.iter()
        .zip(y)
        .map(|(a, b)| ((a - mx) / sx) * ((b - my) / sy))
        .sum::<f64>()
        / n
}

/// Great-circle distance from the chord between unit vectors.
pub fn great_circle_oracle(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let unit = |lat: f64, lon: f64| {
        let (la, lo) = (lat.to_radians(), lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (a, b) = (unit(lat1, lon1), unit(lat2, lon2));
    let chord = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    2.0 * 6_371_000.0 * (chord / 2.0).min(1.0).asin()
}

/// Sample quantile, Hyndman-Fan type 7 in its one-based form.
pub fn quantile_oracle(data: &[f64], p: f64) -> f64 {
    let mut x = data.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let m = 1.0 - p;
    let j = (n * p + m).floor();
    let gamma = n * p + m - j;
    let at = |i: f64| x[(i.clamp(1.0, n) as usize) - 1];
    (1.0 - gamma) * at(j) + gamma * at(j + 1.0)
}

/// Brute-force binary cross-entropy with logits, averaged over labels.
pub fn bce_with_logits(z: &[f64], y: &[f64]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / z.len() as f64
}
