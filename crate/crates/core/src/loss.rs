//! Multi-label targets and the distribution-balanced loss.
//!
//! Each head is scored with a re-weighted, bias-shifted binary cross-entropy
//! on its logits. The weight of label `i` grows with how rare it is relative
//! to the other positives of the same instance; the bias shifts each logit by
//! the log-odds of the label's prior so frequent negatives are tolerated.

use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::graph::MobilityGraph;
use crate::model::{ForwardState, ForwardVars};

pub const SPATIAL_WEIGHT: f64 = 0.1;
pub const TEMPORAL_WEIGHT: f64 = 0.1;
pub const JOINT_WEIGHT: f64 = 1.0;
pub const PRIOR_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("logits, targets and priors differ in length ({logits}, {targets}, {priors})")]
    Length {
        logits: usize,
        targets: usize,
        priors: usize,
    },
    #[error("empty input")]
    Empty,
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Binary occurrence targets of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionTargets {
    /// Categories of every node.
    pub spatial: Vec<f64>,
    /// Every departure and arrival bin.
    pub temporal: Vec<f64>,
    /// `(destination category, arrival bin)` of every edge, at
    /// `category * bins + bin`.
    pub joint: Vec<f64>,
}

pub fn build_targets(g: &MobilityGraph) -> DistributionTargets {
    let (cs, ct) = (g.num_categories, g.num_bins);
    let mut t = DistributionTargets {
        spatial: vec![0.0; cs],
        temporal: vec![0.0; ct],
        joint: vec![0.0; cs * ct],
    };
    for n in &g.nodes {
        t.spatial[n.category] = 1.0;
    }
    for e in &g.edges {
        t.temporal[e.departure_bin] = 1.0;
        t.temporal[e.arrival_bin] = 1.0;
        t.joint[g.nodes[e.dst].category * ct + e.arrival_bin] = 1.0;
    }
    t
}

/// Per-label positive rates over a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPriors {
    pub spatial: Vec<f64>,
    pub temporal: Vec<f64>,
    pub joint: Vec<f64>,
}

impl ClassPriors {
    pub fn from_targets(targets: &[DistributionTargets]) -> Result<Self, LossError> {
        let first = targets.first().ok_or(LossError::Empty)?;
        let rate = |pick: fn(&DistributionTargets) -> &Vec<f64>| {
            let mut acc = vec![0.0; pick(first).len()];
            for t in targets {
                for (a, y) in acc.iter_mut().zip(pick(t)) {
                    *a += y;
                }
            }
            acc.iter().map(|a| a / targets.len() as f64).collect()
        };
        Ok(Self {
            spatial: rate(|t| &t.spatial),
            temporal: rate(|t| &t.temporal),
            joint: rate(|t| &t.joint),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbLossConfig {
    /// Scale of the negative term.
    pub lambda: f64,
    /// Scale of the prior log-odds shift.
    pub kappa: f64,
    /// Floor of the re-balancing weight.
    pub rebalance_floor: f64,
    pub rebalance_sharpness: f64,
    pub rebalance_center: f64,
}

impl Default for DbLossConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            kappa: 0.05,
            rebalance_floor: 0.1,
            rebalance_sharpness: 10.0,
            rebalance_center: 0.3,
        }
    }
}

impl DbLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let finite = [
            self.lambda,
            self.kappa,
            self.rebalance_floor,
            self.rebalance_sharpness,
            self.rebalance_center,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || !(self.lambda > 0.0) {
            return Err(LossError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Re-balancing weight per label. All ones when the instance has no
/// positive label.
pub fn rebalance_weights(targets: &[f64], priors: &[f64], cfg: &DbLossConfig) -> Vec<f64> {
    let inv: Vec<f64> = priors
        .iter()
        .map(|p| 1.0 / p.clamp(PRIOR_FLOOR, 1.0 - PRIOR_FLOOR))
        .collect();
    let denom: f64 = inv
        .iter()
        .zip(targets)
        .filter(|(_, &y)| y > 0.5)
        .map(|(i, _)| i)
        .sum();
    if denom == 0.0 {
        return vec![1.0; targets.len()];
    }
    let (lo, hi) = (cfg.rebalance_floor, 1.0 + cfg.rebalance_floor);
    inv.iter()
        .map(|i| {
            let r = i / denom;
            let s = 1.0 / (1.0 + (-cfg.rebalance_sharpness * (r - cfg.rebalance_center)).exp());
            (lo + s).clamp(lo, hi)
        })
        .collect()
}

/// Logit shift `-kappa * ln(1/p - 1)` per label.
pub fn class_bias(priors: &[f64], cfg: &DbLossConfig) -> Vec<f64> {
    priors
        .iter()
        .map(|p| {
            let p = p.clamp(PRIOR_FLOOR, 1.0 - PRIOR_FLOOR);
            -cfg.kappa * (1.0 / p - 1.0).ln()
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check(z: usize, y: usize, p: usize) -> Result<(), LossError> {
    if z != y || z != p {
        return Err(LossError::Length {
            logits: z,
            targets: y,
            priors: p,
        });
    }
    if z == 0 {
        return Err(LossError::Empty);
    }
    Ok(())
}

/// Distribution-balanced loss of one head's logits.
pub fn db_loss(z: &[f64], y: &[f64], priors: &[f64], cfg: &DbLossConfig) -> Result<f64, LossError> {
    check(z.len(), y.len(), priors.len())?;
    let r = rebalance_weights(y, priors, cfg);
    let v = class_bias(priors, cfg);
    let total: f64 = (0..z.len())
        .map(|i| {
            let d = z[i] - v[i];
            r[i] * (y[i] * softplus(-d) + (1.0 - y[i]) / cfg.lambda * softplus(cfg.lambda * d))
        })
        .sum();
    Ok(total / z.len() as f64)
}

/// [`db_loss`] recorded on a tape.
pub fn db_loss_on_tape(
    tape: &mut Tape,
    z: Var,
    y: &[f64],
    priors: &[f64],
    cfg: &DbLossConfig,
) -> Result<Var, LossError> {
    let n = tape.value(z).len();
    check(n, y.len(), priors.len())?;
    let r = rebalance_weights(y, priors, cfg);
    let v = class_bias(priors, cfg);
    let inv_c = 1.0 / n as f64;
    let pos: Vec<f64> = (0..n).map(|i| r[i] * y[i] * inv_c).collect();
    let neg: Vec<f64> = (0..n)
        .map(|i| r[i] * (1.0 - y[i]) / cfg.lambda * inv_c)
        .collect();
    let v = tape.constant(Tensor::vector(v));
    let pos = tape.constant(Tensor::vector(pos));
    let neg = tape.constant(Tensor::vector(neg));
    let d = tape.sub(z, v)?;
    let a = tape.scale(d, -1.0)?;
    let a = tape.softplus(a)?;
    let b = tape.scale(d, cfg.lambda)?;
    let b = tape.softplus(b)?;
    let a = tape.mul(a, pos)?;
    let b = tape.mul(b, neg)?;
    let s = tape.add(a, b)?;
    Ok(tape.sum(s, None)?)
}

/// The three head losses and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub spatial: f64,
    pub temporal: f64,
    pub joint: f64,
    pub total: f64,
}

pub fn combine(spatial: f64, temporal: f64, joint: f64) -> f64 {
    SPATIAL_WEIGHT * spatial + TEMPORAL_WEIGHT * temporal + JOINT_WEIGHT * joint
}

pub fn total_loss(
    state: &ForwardState,
    targets: &DistributionTargets,
    priors: &ClassPriors,
    cfg: &DbLossConfig,
) -> Result<LossParts, LossError> {
    let spatial = db_loss(&state.phi_s, &targets.spatial, &priors.spatial, cfg)?;
    let temporal = db_loss(&state.phi_t, &targets.temporal, &priors.temporal, cfg)?;
    let joint = db_loss(&state.phi_st, &targets.joint, &priors.joint, cfg)?;
    Ok(LossParts {
        spatial,
        temporal,
        joint,
        total: combine(spatial, temporal, joint),
    })
}

pub fn total_loss_on_tape(
    tape: &mut Tape,
    f: &ForwardVars,
    targets: &DistributionTargets,
    priors: &ClassPriors,
    cfg: &DbLossConfig,
) -> Result<Var, LossError> {
    let s = db_loss_on_tape(tape, f.phi_s, &targets.spatial, &priors.spatial, cfg)?;
    let t = db_loss_on_tape(tape, f.phi_t, &targets.temporal, &priors.temporal, cfg)?;
    let j = db_loss_on_tape(tape, f.phi_st, &targets.joint, &priors.joint, cfg)?;
    let s = tape.scale(s, SPATIAL_WEIGHT)?;
    let t = tape.scale(t, TEMPORAL_WEIGHT)?;
    let j = tape.scale(j, JOINT_WEIGHT)?;
    let st = tape.add(s, t)?;
    Ok(tape.add(st, j)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::graph::{GraphEdge, GraphNode};

    /// Unit weights (0.5 + sigmoid(0)), no shift, unit negative scale.
    fn plain() -> DbLossConfig {
        DbLossConfig {
            lambda: 1.0,
            kappa: 0.0,
            rebalance_floor: 0.5,
            rebalance_sharpness: 0.0,
            rebalance_center: 0.0,
        }
    }

    #[test]
    fn analytic_single_label() {
        let cfg = plain();
        let l1 = db_loss(&[0.0], &[1.0], &[0.3], &cfg).unwrap();
        let l0 = db_loss(&[0.0], &[0.0], &[0.3], &cfg).unwrap();
        assert!((l1 - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l0 - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn length_and_empty_errors() {
        let cfg = DbLossConfig::default();
        assert!(matches!(
            db_loss(&[0.0, 1.0], &[1.0], &[0.5], &cfg),
            Err(LossError::Length { .. })
        ));
        assert!(matches!(
            db_loss(&[], &[], &[], &cfg),
            Err(LossError::Empty)
        ));
    }

    #[test]
    fn weights_and_bias() {
        let cfg = DbLossConfig::default();
        assert_eq!(
            rebalance_weights(&[0.0, 0.0], &[0.2, 0.3], &cfg),
            vec![1.0, 1.0]
        );
        let r = rebalance_weights(&[1.0, 1.0, 0.0], &[0.5, 0.5, 0.25], &cfg);
        // r = (2, 2, 4) / 4 = (0.5, 0.5, 1.0)
        let want = |x: f64| 0.1 + 1.0 / (1.0 + (-10.0 * (x - 0.3)).exp());
        assert!((r[0] - want(0.5)).abs() < 1e-15);
        assert!((r[2] - want(1.0)).abs() < 1e-15);
        let v = class_bias(&[0.5, 0.0, 1.0], &cfg);
        assert_eq!(v[0], 0.0);
        assert!((v[1] + 0.05 * (1.0f64 / 1e-4 - 1.0).ln()).abs() < 1e-12);
        assert!((v[2] + v[1]).abs() < 1e-9);
    }

    fn graph() -> MobilityGraph {
        let nodes = [1, 3, 3]
            .iter()
            .enumerate()
            .map(|(i, &c)| GraphNode {
                index: i,
                location_key: format!("k{i}"),
                category: c,
            })
            .collect();
        let e = |src, dst, d, a, f| GraphEdge {
            src,
            dst,
            departure_bin: d,
            arrival_bin: a,
            frequency: f,
            distance_m: 1.0,
            duration_min: 1.0,
        };
        MobilityGraph::from_parts(
            "u".into(),
            10,
            48,
            nodes,
            vec![e(0, 1, 17, 20, 2), e(1, 2, 20, 20, 1)],
        )
        .unwrap()
    }

    #[test]
    fn targets_follow_edges() {
        let t = build_targets(&graph());
        let ones = |v: &[f64]| (0..v.len()).filter(|&i| v[i] == 1.0).collect::<Vec<_>>();
        assert_eq!(ones(&t.spatial), vec![1, 3]);
        assert_eq!(ones(&t.temporal), vec![17, 20]);
        assert_eq!(ones(&t.joint), vec![3 * 48 + 20]);
        let mut g = graph();
        g.edges[0].frequency = 1;
        assert_eq!(build_targets(&g), t);
    }

    #[test]
    fn priors_average_targets() {
        let t = build_targets(&graph());
        let mut u = t.clone();
        u.spatial = vec![0.0; 10];
        let p = ClassPriors::from_targets(&[t, u]).unwrap();
        assert_eq!(p.spatial[1], 0.5);
        assert_eq!(p.temporal[17], 1.0);
        assert!(ClassPriors::from_targets(&[]).is_err());
    }

    #[test]
    fn tape_matches_plain() {
        let cfg = DbLossConfig::default();
        let z = vec![0.3, -2.0, 4.0, 0.0];
        let y = vec![1.0, 0.0, 0.0, 1.0];
        let p = vec![0.2, 0.5, 0.01, 0.9];
        let mut tape = Tape::new();
        let zv = tape.leaf(Tensor::vector(z.clone()));
        let l = db_loss_on_tape(&mut tape, zv, &y, &p, &cfg).unwrap();
        let want = db_loss(&z, &y, &p, &cfg).unwrap();
        assert!((tape.values(l)[0] - want).abs() < 1e-14);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let cfg = DbLossConfig::default();
        let l = db_loss(
            &[50.0, -50.0, 50.0, -50.0],
            &[1.0, 1.0, 0.0, 0.0],
            &[0.5; 4],
            &cfg,
        )
        .unwrap();
        assert!(l.is_finite());
        let l = db_loss(&[700.0, -700.0], &[0.0, 1.0], &[0.5; 2], &cfg).unwrap();
        assert!(l.is_finite());
    }

    fn bce(z: &[f64], y: &[f64]) -> f64 {
        z.iter()
            .zip(y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / z.len() as f64
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(-8.0f64..8.0, n),
                prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n),
                prop::collection::vec(0.0f64..1.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn identity_settings_give_bce((z, y, p) in instance()) {
            let a = db_loss(&z, &y, &p, &plain()).unwrap();
            prop_assert!((a - bce(&z, &y)).abs() < 1e-12);
        }

        #[test]
        fn transliteration_agrees((z, y, p) in instance()) {
            let cfg = DbLossConfig::default();
            let c = z.len() as f64;
            let pc: Vec<f64> = p.iter().map(|p| p.clamp(1e-4, 1.0 - 1e-4)).collect();
            let npos: f64 = (0..z.len()).filter(|&i| y[i] == 1.0).map(|i| 1.0 / pc[i]).sum();
            let mut want = 0.0;
            for i in 0..z.len() {
                let rhat = if npos == 0.0 {
                    1.0
                } else {
                    let r = (1.0 / pc[i]) / npos;
                    0.1 + 1.0 / (1.0 + (-10.0 * (r - 0.3)).exp())
                };
                let v = -0.05 * (1.0 / pc[i] - 1.0).ln();
                let pos = (1.0 + (-(z[i] - v)).exp()).ln();
                let neg = (1.0 + (2.0 * (z[i] - v)).exp()).ln() / 2.0;
                want += rhat * (y[i] * pos + (1.0 - y[i]) * neg);
            }
            want /= c;
            let got = db_loss(&z, &y, &p, &cfg).unwrap();
            prop_assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }

        #[test]
        fn monotone_and_nonnegative((z, y, p) in instance(), k in 0usize..12) {
            let cfg = DbLossConfig::default();
            let k = k % z.len();
            let base = db_loss(&z, &y, &p, &cfg).unwrap();
            prop_assert!(base >= 0.0);
            let mut up = z.clone();
            up[k] += 1e-4;
            let mut down = z.clone();
            down[k] -= 1e-4;
            let slope = db_loss(&up, &y, &p, &cfg).unwrap() - db_loss(&down, &y, &p, &cfg).unwrap();
            if y[k] == 1.0 {
                prop_assert!(slope < 0.0);
            } else {
                prop_assert!(slope > 0.0);
            }
        }
    }
}
