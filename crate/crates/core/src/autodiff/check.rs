//! Central finite-difference gradient checking (f64 only).

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many entries per parameter (uniformly sampled).
    /// `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Largest elementwise relative error per trainable parameter.
    pub per_param: BTreeMap<String, f64>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// Denominator floor of [`relative_error`] per unit of loss magnitude.
///
/// Rounding noise in `f(p±ε)` grows with |f|: at ε = 1e-5 a loss near 60
/// resolves derivatives only to about 3e-9. Gradient entries below
/// `RELATIVE_ERROR_FLOOR · max(1, |f|)` are therefore compared in absolute
/// terms against that floor.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// Floor for a loss whose value at the checked point is `loss`.
pub fn error_floor(loss: f64) -> f64 {
    RELATIVE_ERROR_FLOOR * loss.abs().max(1.0)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(build: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::inference();
    let loss = build(&mut g, params)?;
    let value = g.value(loss);
    if value.numel() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.data()[0])
}

/// Compares the tape's gradient of `build` against central differences
/// `(f(p+ε) − f(p−ε)) / 2ε` for every unfrozen parameter in `params`.
pub fn grad_check<F>(build: F, params: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let first = eval_loss(&build, params)?;
    let second = eval_loss(&build, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let floor = error_floor(first);

    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let analytic = g.gradients(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for name in params.trainable_names() {
        let numel = params.get(&name)?.numel();
        let zeros = crate::tensor::Tensor::zeros(params.get(&name)?.shape().to_vec());
        let grad = analytic.get(&name).unwrap_or(&zeros);
        let indices: Vec<usize> = match opts.max_entries {
            Some(m) if m < numel => {
                let mut v = sample(&mut rng, numel, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        let mut worst = 0.0f64;
        for i in indices {
            let orig = params.get(&name)?.data()[i];
            work.value_mut(&name)?.data_mut()[i] = orig + opts.eps;
            let plus = eval_loss(&build, &work)?;
            work.value_mut(&name)?.data_mut()[i] = orig - opts.eps;
            let minus = eval_loss(&build, &work)?;
            work.value_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(relative_error(grad.data()[i], numeric, floor));
            report.entries_checked += 1;
        }
        report.per_param.insert(name, worst);
    }
    Ok(report)
}
