//! Per-user weighted directed spatial-temporal graph.
//!
//! Nodes are distinct places featured by their category; every consecutive
//! pair of visits within a day is a movement, and movements with the same
//! origin, destination, departure bin and arrival bin are merged into a single
//! edge whose frequency counts them.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::ingest::{UserHistory, TIME_BINS};

/// Mean Earth radius used for great-circle distances, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("user {0} has no movements")]
    NoMovements(String),
    #[error("departure bin {departure} after arrival bin {arrival}")]
    BinOrder { departure: usize, arrival: usize },
    #[error("bin {bin} outside 0..{bins}")]
    BinRange { bin: usize, bins: usize },
    #[error("category {category} outside 0..{classes}")]
    CategoryRange { category: usize, classes: usize },
    #[error("line {line}: field `{field}`: {reason}")]
    Parse {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub index: usize,
    pub location_key: String,
    pub category: usize,
}

impl GraphNode {
    /// One-hot category vector of length `classes`.
    pub fn feature(&self, classes: usize) -> Vec<f64> {
        let mut f = vec![0.0; classes];
        f[self.category] = 1.0;
        f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub departure_bin: usize,
    pub arrival_bin: usize,
    pub frequency: u32,
    pub distance_m: f64,
    pub duration_min: f64,
}

impl GraphEdge {
    pub fn transit_vector(&self, bins: usize) -> Vec<f64> {
        encode_transit_vector(self.departure_bin, self.arrival_bin, bins)
            .expect("edge bins validated on construction")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MobilityGraph {
    pub user_id: String,
    pub num_categories: usize,
    pub num_bins: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    /// Per edge `(frequency, distance, duration)` min-max scaled within the
    /// graph.
    pub normalized_weights: Vec<[f64; 3]>,
}

/// Two-hot vector marking departure and arrival bins (a single one when they
/// coincide).
pub fn encode_transit_vector(
    departure: usize,
    arrival: usize,
    bins: usize,
) -> Result<Vec<f64>, GraphError> {
    if arrival < departure {
        return Err(GraphError::BinOrder { departure, arrival });
    }
    if arrival >= bins {
        return Err(GraphError::BinRange { bin: arrival, bins });
    }
    let mut v = vec![0.0; bins];
    v[departure] = 1.0;
    v[arrival] = 1.0;
    Ok(v)
}

/// Great-circle distance in meters.
pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Min-max scaling of each weight channel; a constant channel maps to 1.
pub fn normalize_weights(edges: &[GraphEdge]) -> Vec<[f64; 3]> {
    let channel = |f: &dyn Fn(&GraphEdge) -> f64| -> Vec<f64> {
        let vals: Vec<f64> = edges.iter().map(f).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            vals.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![1.0; vals.len()]
        }
    };
    let freq = channel(&|e| e.frequency as f64);
    let dist = channel(&|e| e.distance_m);
    let dur = channel(&|e| e.duration_min);
    (0..edges.len())
        .map(|i| [freq[i], dist[i], dur[i]])
        .collect()
}

impl MobilityGraph {
    /// Assembles a graph from already merged nodes and edges, validating
    /// indices and bins and computing the normalized weights.
    pub fn from_parts(
        user_id: String,
        num_categories: usize,
        num_bins: usize,
        nodes: Vec<GraphNode>,
        edges: Vec<GraphEdge>,
    ) -> Result<Self, GraphError> {
        for n in &nodes {
            if n.category >= num_categories {
                return Err(GraphError::CategoryRange {
                    category: n.category,
                    classes: num_categories,
                });
            }
        }
        for e in &edges {
            encode_transit_vector(e.departure_bin, e.arrival_bin, num_bins)?;
        }
        let normalized_weights = normalize_weights(&edges);
        Ok(Self {
            user_id,
            num_categories,
            num_bins,
            nodes,
            edges,
            normalized_weights,
        })
    }

    pub fn movement_count(&self) -> u64 {
        self.edges.iter().map(|e| u64::from(e.frequency)).sum()
    }

    /// Largest number of outgoing edges of any node.
    pub fn max_outdegree(&self) -> usize {
        let mut out = vec![0usize; self.nodes.len()];
        for e in &self.edges {
            out[e.src] += 1;
        }
        out.into_iter().max().unwrap_or(0)
    }
}

/// Builds the graph of one user.
///
/// Trajectories are visited in date order so the result does not depend on
/// their order in `history`. Node order follows first appearance; a node's
/// category and coordinates are those of its first visit. Merged edges carry
/// the occurrence count, the distance between first-seen coordinates and the
/// mean transit time.
pub fn build_graph(
    history: &UserHistory,
    num_categories: usize,
) -> Result<MobilityGraph, GraphError> {
    let mut days: Vec<_> = history.trajectories.iter().collect();
    days.sort_by_key(|t| t.date);

    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut node_of: HashMap<&str, usize> = HashMap::new();
    let mut edges: Vec<GraphEdge> = Vec::new();
    let mut seconds: Vec<i64> = Vec::new();
    let mut edge_of: HashMap<(usize, usize, usize, usize), usize> = HashMap::new();

    for day in days {
        let mut ids = Vec::with_capacity(day.visits.len());
        for v in &day.visits {
            let id = *node_of.entry(v.location_key.as_str()).or_insert_with(|| {
                nodes.push(GraphNode {
                    index: nodes.len(),
                    location_key: v.location_key.clone(),
                    category: v.category,
                });
                coords.push((v.latitude, v.longitude));
                nodes.len() - 1
            });
            ids.push(id);
        }
        for (w, pair) in day.visits.windows(2).enumerate() {
            let (src, dst) = (ids[w], ids[w + 1]);
            let (dep, arr) = (pair[0].bin(), pair[1].bin());
            if arr < dep {
                return Err(GraphError::BinOrder {
                    departure: dep,
                    arrival: arr,
                });
            }
            let secs = (pair[1].timestamp - pair[0].timestamp).num_seconds();
            match edge_of.get(&(src, dst, dep, arr)) {
                Some(&i) => {
                    edges[i].frequency += 1;
                    seconds[i] += secs;
                }
                None => {
                    edge_of.insert((src, dst, dep, arr), edges.len());
                    let (a, b) = (coords[src], coords[dst]);
                    edges.push(GraphEdge {
                        src,
                        dst,
                        departure_bin: dep,
                        arrival_bin: arr,
                        frequency: 1,
                        distance_m: haversine(a.0, a.1, b.0, b.1),
                        duration_min: 0.0,
                    });
                    seconds.push(secs);
                }
            }
        }
    }
    if edges.is_empty() {
        return Err(GraphError::NoMovements(history.user_id.clone()));
    }
    for (e, s) in edges.iter_mut().zip(&seconds) {
        e.duration_min = *s as f64 / f64::from(e.frequency) / 60.0;
    }
    MobilityGraph::from_parts(
        history.user_id.clone(),
        num_categories,
        TIME_BINS,
        nodes,
        edges,
    )
}

/// Corpus summary: counts plus node-count and max-outdegree histograms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphStats {
    pub graphs: usize,
    pub nodes: usize,
    pub edges: usize,
    pub movements: u64,
    pub node_histogram: BTreeMap<usize, usize>,
    pub outdegree_histogram: BTreeMap<usize, usize>,
}

pub fn graph_stats(graphs: &[MobilityGraph]) -> GraphStats {
    let mut s = GraphStats {
        graphs: graphs.len(),
        ..GraphStats::default()
    };
    for g in graphs {
        s.nodes += g.nodes.len();
        s.edges += g.edges.len();
        s.movements += g.movement_count();
        *s.node_histogram.entry(g.nodes.len()).or_default() += 1;
        *s.outdegree_histogram.entry(g.max_outdegree()).or_default() += 1;
    }
    s
}

/// Two-column `value<TAB>count` table with a header line.
pub fn write_histogram<W: Write>(
    mut w: W,
    label: &str,
    hist: &BTreeMap<usize, usize>,
) -> io::Result<()> {
    writeln!(w, "{label}\tgraphs")?;
    for (k, v) in hist {
        writeln!(w, "{k}\t{v}")?;
    }
    Ok(())
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c == '%' || c.is_whitespace() {
            let mut buf = [0u8; 4];
            for b in c.encode_utf8(&mut buf).bytes() {
                let _ = write!(out, "%{b:02X}");
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

/// Formats a real with 17 significant digits.
pub(crate) fn real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes one graph in the line-oriented `STGRAPH 1` format.
pub fn serialize_graph<W: Write>(mut w: W, g: &MobilityGraph) -> io::Result<()> {
    writeln!(
        w,
        "STGRAPH 1 {} {} {}",
        escape(&g.user_id),
        g.num_categories,
        g.num_bins
    )?;
    for n in &g.nodes {
        writeln!(
            w,
            "N {} {} {}",
            n.index,
            escape(&n.location_key),
            n.category
        )?;
    }
    for e in &g.edges {
        writeln!(
            w,
            "E {} {} {} {} {} {} {}",
            e.src,
            e.dst,
            e.departure_bin,
            e.arrival_bin,
            e.frequency,
            real(e.distance_m),
            real(e.duration_min)
        )?;
    }
    Ok(())
}

pub fn serialize_graphs<W: Write>(mut w: W, graphs: &[MobilityGraph]) -> io::Result<()> {
    for g in graphs {
        serialize_graph(&mut w, g)?;
    }
    Ok(())
}

struct PendingGraph {
    line: usize,
    user_id: String,
    num_categories: usize,
    num_bins: usize,
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
}

impl PendingGraph {
    fn finish(self) -> Result<MobilityGraph, GraphError> {
        if self.edges.is_empty() {
            return Err(GraphError::Parse {
                line: self.line,
                field: "edges",
                reason: format!("graph of {} has no edges", self.user_id),
            });
        }
        MobilityGraph::from_parts(
            self.user_id,
            self.num_categories,
            self.num_bins,
            self.nodes,
            self.edges,
        )
    }
}

fn field<T: std::str::FromStr>(
    parts: &[&str],
    at: usize,
    line: usize,
    name: &'static str,
) -> Result<T, GraphError> {
    let raw = parts.get(at).ok_or_else(|| GraphError::Parse {
        line,
        field: name,
        reason: "missing".into(),
    })?;
    raw.parse().map_err(|_| GraphError::Parse {
        line,
        field: name,
        reason: format!("cannot parse `{raw}`"),
    })
}

/// Reads every graph in a stream of concatenated `STGRAPH 1` records.
pub fn deserialize_graphs<R: BufRead>(reader: R) -> Result<Vec<MobilityGraph>, GraphError> {
    let mut graphs = Vec::new();
    let mut pending: Option<PendingGraph> = None;
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text?;
        let parts: Vec<&str> = text.split_whitespace().collect();
        let Some(&tag) = parts.first() else { continue };
        let expect_len = |n: usize, field: &'static str| {
            if parts.len() == n {
                Ok(())
            } else {
                Err(GraphError::Parse {
                    line,
                    field,
                    reason: format!("expected {n} fields, got {}", parts.len()),
                })
            }
        };
        match tag {
            "STGRAPH" => {
                expect_len(5, "header")?;
                if parts[1] != "1" {
                    return Err(GraphError::Parse {
                        line,
                        field: "version",
                        reason: format!("unsupported version `{}`", parts[1]),
                    });
                }
                if let Some(p) = pending.take() {
                    graphs.push(p.finish()?);
                }
                pending = Some(PendingGraph {
                    line,
                    user_id: unescape(parts[2]).ok_or_else(|| GraphError::Parse {
                        line,
                        field: "user_id",
                        reason: "bad escape".into(),
                    })?,
                    num_categories: field(&parts, 3, line, "C_s")?,
                    num_bins: field(&parts, 4, line, "C_t")?,
                    nodes: Vec::new(),
                    edges: Vec::new(),
                });
            }
            "N" => {
                expect_len(4, "node")?;
                let g = pending.as_mut().ok_or_else(|| GraphError::Parse {
                    line,
                    field: "header",
                    reason: "node before header".into(),
                })?;
                let index: usize = field(&parts, 1, line, "node index")?;
                if index != g.nodes.len() {
                    return Err(GraphError::Parse {
                        line,
                        field: "node index",
                        reason: format!("expected {}, got {index}", g.nodes.len()),
                    });
                }
                let category: usize = field(&parts, 3, line, "category")?;
                if category >= g.num_categories {
                    return Err(GraphError::Parse {
                        line,
                        field: "category",
                        reason: format!("{category} outside 0..{}", g.num_categories),
                    });
                }
                g.nodes.push(GraphNode {
                    index,
                    location_key: unescape(parts[2]).ok_or_else(|| GraphError::Parse {
                        line,
                        field: "location_key",
                        reason: "bad escape".into(),
                    })?,
                    category,
                });
            }
            "E" => {
                expect_len(8, "edge")?;
                let g = pending.as_mut().ok_or_else(|| GraphError::Parse {
                    line,
                    field: "header",
                    reason: "edge before header".into(),
                })?;
                let edge = GraphEdge {
                    src: field(&parts, 1, line, "src")?,
                    dst: field(&parts, 2, line, "dst")?,
                    departure_bin: field(&parts, 3, line, "bin_dep")?,
                    arrival_bin: field(&parts, 4, line, "bin_arr")?,
                    frequency: field(&parts, 5, line, "frequency")?,
                    distance_m: field(&parts, 6, line, "distance_m")?,
                    duration_min: field(&parts, 7, line, "duration_min")?,
                };
                let n = g.nodes.len();
                let bad = |field: &'static str, reason: String| GraphError::Parse {
                    line,
                    field,
                    reason,
                };
                if edge.src >= n {
                    return Err(bad("src", format!("node {} of {n}", edge.src)));
                }
                if edge.dst >= n {
                    return Err(bad("dst", format!("node {} of {n}", edge.dst)));
                }
                if edge.arrival_bin < edge.departure_bin || edge.arrival_bin >= g.num_bins {
                    return Err(bad(
                        "bin_arr",
                        format!(
                            "departure {} arrival {}",
                            edge.departure_bin, edge.arrival_bin
                        ),
                    ));
                }
                if edge.frequency == 0 {
                    return Err(bad("frequency", "must be positive".into()));
                }
                if !(edge.distance_m >= 0.0) || !edge.distance_m.is_finite() {
                    return Err(bad("distance_m", format!("{}", edge.distance_m)));
                }
                if !(edge.duration_min >= 0.0) || !edge.duration_min.is_finite() {
                    return Err(bad("duration_min", format!("{}", edge.duration_min)));
                }
                g.edges.push(edge);
            }
            other => {
                return Err(GraphError::Parse {
                    line,
                    field: "tag",
                    reason: format!("unknown record `{other}`"),
                })
            }
        }
    }
    if let Some(p) = pending.take() {
        graphs.push(p.finish()?);
    }
    Ok(graphs)
}

/// Reads exactly one graph.
pub fn deserialize_graph(bytes: &[u8]) -> Result<MobilityGraph, GraphError> {
    let mut graphs = deserialize_graphs(bytes)?;
    match graphs.len() {
        1 => Ok(graphs.remove(0)),
        n => Err(GraphError::Parse {
            line: 1,
            field: "header",
            reason: format!("expected one graph, found {n}"),
        }),
    }
}
