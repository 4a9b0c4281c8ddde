use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{Tensor, TensorError};
use crate::exec::Exec;

/// One perturbed entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntryCheck {
    pub param: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_relative_error: f64,
    /// Largest error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// `(parameter, entry)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    /// Every checked entry, ordered by parameter then entry.
    pub checks: Vec<EntryCheck>,
}

/// Which entries of each parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many entries per tensor, drawn without replacement.
    Sampled {
        per_param: usize,
        seed: u64,
    },
}

/// Entries perturbed on one working copy of the parameters.
const CHUNK: usize = 256;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var), TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.zero_grad();
            t.set_requires_grad(track);
            tape.leaf(t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

fn scalar<F>(f: &F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let (tape, _, out) = evaluate(f, params, false)?;
    Ok(tape.values(out)[0])
}

/// Checks every entry of every parameter. `f` builds a scalar from the
/// parameter handles it is given.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_with(f, params, h, Coverage::All)
}

/// Analytic gradients after the determinism guard, plus the entries to
/// perturb.
#[allow(clippy::type_complexity)]
fn prepare<F>(
    f: &F,
    params: &[Tensor],
    h: f64,
    coverage: Coverage,
) -> Result<(Vec<Vec<f64>>, Vec<(usize, usize)>), TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let (mut tape, vars, out) = evaluate(f, params, true)?;
    let first = tape.values(out)[0];
    let second = scalar(f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut rng = match coverage {
        Coverage::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };
    let mut entries = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        match (coverage, rng.as_mut()) {
            (Coverage::Sampled { per_param, .. }, Some(rng)) if per_param < n => {
                let mut e = sample(rng, n, per_param).into_vec();
                e.sort_unstable();
                entries.extend(e.into_iter().map(|k| (pi, k)));
            }
            _ => entries.extend((0..n).map(|k| (pi, k))),
        }
    }
    Ok((analytic, entries))
}

fn central_difference<F>(
    f: &F,
    work: &mut [Tensor],
    (pi, k): (usize, usize),
    h: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let base = work[pi].values()[k];
    work[pi].values_mut()[k] = base + h;
    let plus = scalar(f, work)?;
    work[pi].values_mut()[k] = base - h;
    let minus = scalar(f, work)?;
    work[pi].values_mut()[k] = base;
    Ok((plus - minus) / (2.0 * h))
}

/// Central differences of `entries` spread over `exec`, using `g` for the
/// parameters flagged in `restricted` and `f` elsewhere.
fn differences<F, G>(
    f: &F,
    g: &G,
    restricted: &[bool],
    params: &[Tensor],
    entries: &[(usize, usize)],
    h: f64,
    exec: Exec,
) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + Sync,
    G: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + Sync,
{
    let chunks: Vec<&[(usize, usize)]> = entries.chunks(CHUNK).collect();
    Ok(exec
        .map(&chunks, |chunk| {
            let mut work = params.to_vec();
            chunk
                .iter()
                .map(|&e| {
                    if restricted.get(e.0).copied().unwrap_or(false) {
                        central_difference(g, &mut work, e, h)
                    } else {
                        central_difference(f, &mut work, e, h)
                    }
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?
        .concat())
}

fn summarize(
    params: usize,
    analytic: &[Vec<f64>],
    entries: &[(usize, usize)],
    numeric: Vec<f64>,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        per_param: vec![0.0; params],
        worst: None,
        entries_checked: entries.len(),
        checks: Vec::with_capacity(entries.len()),
    };
    for (&(pi, k), numeric) in entries.iter().zip(numeric) {
        let a = analytic[pi][k];
        let err = relative_error(a, numeric);
        report.checks.push(EntryCheck {
            param: pi,
            entry: k,
            analytic: a,
            numeric,
            relative_error: err,
        });
        if err > report.per_param[pi] {
            report.per_param[pi] = err;
        }
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((pi, k));
        }
    }
    report
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    coverage: Coverage,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let (analytic, entries) = prepare(&f, params, h, coverage)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let numeric = entries
        .iter()
        .map(|&e| central_difference(&f, &mut work, e, h))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(params.len(), &analytic, &entries, numeric))
}

/// [`grad_check_with`] with the perturbed evaluations spread over `exec`.
/// The report is identical for every executor.
pub fn grad_check_exec<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    coverage: Coverage,
    exec: Exec,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + Sync,
{
    let (analytic, entries) = prepare(&f, params, h, coverage)?;
    let numeric = differences(&f, &f, &[], params, &entries, h, exec)?;
    Ok(summarize(params.len(), &analytic, &entries, numeric))
}

/// [`grad_check_exec`] where the entries of parameters flagged in
/// `restricted` are differenced through `g`, a cheaper evaluation of the
/// same scalar that holds every unflagged parameter at its value in
/// `params`. Analytic gradients always come from `f`, and `g` must match
/// `f` bitwise at `params`.
pub fn grad_check_staged<F, G>(
    f: F,
    g: G,
    restricted: &[bool],
    params: &[Tensor],
    h: f64,
    coverage: Coverage,
    exec: Exec,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + Sync,
    G: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + Sync,
{
    let (analytic, entries) = prepare(&f, params, h, coverage)?;
    let (full, staged) = (scalar(&f, params)?, scalar(&g, params)?);
    if full.to_bits() != staged.to_bits() {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("staged evaluation {staged:e} differs from full evaluation {full:e}"),
        });
    }
    let numeric = differences(&f, &g, restricted, params, &entries, h, exec)?;
    Ok(summarize(params.len(), &analytic, &entries, numeric))
}
