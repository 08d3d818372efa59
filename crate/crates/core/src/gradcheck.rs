//! Central finite-difference verification of tape gradients.
//!
//! The numeric side never touches a backward closure: it only re-runs the
//! forward computation on a gradient-free tape with one coordinate perturbed.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, NdArray};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub rel_tol: f64,
    /// Upper bound on probed coordinates across all inputs.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            rel_tol: 1e-6,
            max_coords: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose two step sizes disagreed, i.e. a kink lies within `eps`.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub failures: Vec<CoordCheck>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Maximum relative error grouped by layer (the path minus its last segment).
    pub fn by_layer(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for r in &self.inputs {
            let layer = r.name.rsplit_once('.').map_or(r.name.as_str(), |(l, _)| l);
            match out.iter_mut().find(|(l, _)| l == layer) {
                Some((_, e)) => *e = e.max(r.max_rel_err),
                None => out.push((layer.to_string(), r.max_rel_err)),
            }
        }
        out
    }

    /// Errors out listing the offending coordinates when the tolerance was breached.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let listed: Vec<String> = self
            .failures
            .iter()
            .take(16)
            .map(|c| {
                format!(
                    "{}[{}]: analytic {:.6e}, numeric {:.6e}, rel {:.3e}",
                    c.input, c.index, c.analytic, c.numeric, c.rel_err
                )
            })
            .collect();
        Err(Error::GradCheck(format!(
            "{} of {} coordinates exceed rel-tol {:e}: {}",
            self.failures.len(),
            self.checked(),
            self.rel_tol,
            listed.join("; ")
        )))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.inputs {
            writeln!(
                f,
                "{:<48} checked {:>4}  skipped {:>3}  max rel err {:.3e}",
                r.name, r.checked, r.skipped, r.max_rel_err
            )?;
        }
        write!(
            f,
            "overall max rel err {:.3e} (tol {:e}): {}",
            self.max_rel_err(),
            self.rel_tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn evaluate<T: Element, F>(f: &F, inputs: &[NdArray<T>]) -> Result<f64>
where
    F: Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    let tape = Tape::no_grad();
    let vars: Vec<Var<T>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().len() != 1 {
        return Err(Error::NonScalarRoot(out.shape().to_vec()));
    }
    Ok(out.value().item().as_f64())
}

/// Compares tape gradients of the scalar `f(inputs)` against central differences.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`, where `floor` is the
/// gradient magnitude at which round-off in the differenced values alone would
/// reach a tenth of `rel_tol`. When the central differences at `eps` and `eps/2`
/// disagree by more than `rel_tol` on that scale, the numeric estimate cannot
/// resolve the tolerance there (a kink inside the difference interval, or
/// round-off) and the coordinate is counted as skipped.
pub fn check_gradients<T: Element, F>(
    f: F,
    inputs: &[(String, NdArray<T>)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<T>> = inputs.iter().map(|(_, x)| tape.leaf(x.clone(), true)).collect();
    let root = f(&tape, &vars)?;
    root.backward()?;
    let f0 = root.value().item().as_f64();
    let analytic: Vec<NdArray<T>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| NdArray::zeros(v.shape())))
        .collect();
    drop(root);
    drop(vars);

    let unit = T::epsilon().as_f64();
    let floor = 10.0 * unit * f0.abs().max(1.0) / (opts.eps * opts.rel_tol);

    let total: usize = inputs.iter().map(|(_, x)| x.len()).sum();
    let mut picks: Vec<usize> = if total <= opts.max_coords {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rand::seq::index::sample(&mut rng, total, opts.max_coords).into_vec()
    };
    picks.sort_unstable();

    let mut values: Vec<NdArray<T>> = inputs.iter().map(|(_, x)| x.clone()).collect();
    let mut reports: Vec<InputReport> = inputs
        .iter()
        .map(|(name, _)| InputReport {
            name: name.clone(),
            ..Default::default()
        })
        .collect();
    let mut failures = Vec::new();
    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, (_, x)| {
            let start = *acc;
            *acc += x.len();
            Some(start)
        })
        .collect();

    for flat in picks {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[which];
        let original = values[which].data()[index];
        let mut probe = |h: f64| -> Result<f64> {
            values[which].data_mut()[index] = original + T::of(h);
            let plus = evaluate(&f, &values)?;
            values[which].data_mut()[index] = original - T::of(h);
            let minus = evaluate(&f, &values)?;
            values[which].data_mut()[index] = original;
            Ok((plus - minus) / (2.0 * h))
        };
        let numeric = probe(opts.eps)?;
        let half = probe(opts.eps / 2.0)?;
        let report = &mut reports[which];
        if (numeric - half).abs() > opts.rel_tol * numeric.abs().max(half.abs()).max(floor) {
            report.skipped += 1;
            continue;
        }
        let a = analytic[which].data()[index].as_f64();
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        let check = CoordCheck {
            input: report.name.clone(),
            index,
            analytic: a,
            numeric,
            rel_err,
        };
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.worst = Some(check.clone());
        }
        if rel_err > opts.rel_tol {
            failures.push(check);
        }
    }
    Ok(GradCheckReport {
        inputs: reports,
        failures,
        rel_tol: opts.rel_tol,
    })
}

/// Fixed pseudo-random projection weights used to reduce a tensor output to a
/// scalar whose gradient exercises every output element.
pub fn projection<T: Element>(shape: &[usize], seed: u64) -> NdArray<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    NdArray::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

/// `sum(out * R)` for a fixed random `R`.
pub fn project<T: Element>(out: &Var<T>, seed: u64) -> Result<Var<T>> {
    let r = out.tape().constant(projection(out.shape(), seed));
    out.mul(&r)?.sum_all()
}
