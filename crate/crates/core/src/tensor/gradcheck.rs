//! Central finite-difference oracle for reverse-mode gradients (64-bit).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − n| / (|a| + |n| + 1e−12)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Rounding allowance, in units of machine epsilon times `|f|`, granted to
/// each of the two evaluations of a central difference.
pub const ROUNDOFF_ULPS: f64 = 32.0;

/// Bound on the rounding error of `(f(x+h) − f(x−h)) / 2h` when both
/// evaluations carry at most [`ROUNDOFF_ULPS`] relative error.
pub fn roundoff_bound(f_scale: f64, h: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * f_scale.abs() / h
}

/// `max(|a − n| − noise, 0) / (|a| + |n| + 1e−12)`.
pub fn rel_error_above(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Worst agreement found for one checked input.
#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Roundoff allowance applied at the worst element.
    pub noise: f64,
    /// Number of elements compared.
    pub checked: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares analytic gradients of a scalar function of several named
/// inputs against central differences.
///
/// The function receives gradient-tracked copies of the inputs once for the
/// analytic pass and constant copies for every perturbed evaluation, so it
/// must not capture the inputs itself.
pub struct GradCheck {
    inputs: Vec<(String, Tensor<f64>)>,
    step: f64,
    sample: Option<(usize, u64)>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self::new()
    }
}

impl GradCheck {
    pub fn new() -> Self {
        GradCheck {
            inputs: Vec::new(),
            step: DEFAULT_STEP,
            sample: None,
        }
    }

    pub fn input(mut self, name: impl Into<String>, t: &Tensor<f64>) -> Self {
        self.inputs.push((name.into(), t.detach()));
        self
    }

    pub fn step(mut self, h: f64) -> Self {
        self.step = h;
        self
    }

    /// Checks at most `max` seeded-random elements per input.
    pub fn sample(mut self, max: usize, seed: u64) -> Self {
        self.sample = Some((max, seed));
        self
    }

    pub fn run<F>(self, mut f: F) -> Result<GradReport>
    where
        F: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        if self.inputs.is_empty() {
            return Err(Error::Usage("gradient check with no inputs".into()));
        }
        let consts: Vec<Tensor<f64>> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        let params: Vec<Tensor<f64>> = consts.iter().map(|t| t.to_param()).collect();
        let loss = f(&params)?;
        let base = loss.item()?;
        let again = f(&consts)?.item()?;
        if base.to_bits() != again.to_bits() {
            return Err(Error::Usage(format!(
                "function is not deterministic: {} then {}",
                base, again
            )));
        }
        if loss.node().is_some() {
            loss.backward()?;
        }
        let h = self.step;
        let mut rng = self.sample.map(|(_, s)| ChaCha8Rng::seed_from_u64(s));
        let mut report = GradReport::default();
        for (k, (name, _)) in self.inputs.iter().enumerate() {
            let numel = consts[k].numel();
            let analytic = params[k].grad().unwrap_or_else(|| vec![0.0; numel]);
            let indices: Vec<usize> = match (self.sample, rng.as_mut()) {
                (Some((max, _)), Some(rng)) if max < numel => {
                    let mut idx = rand::seq::index::sample(rng, numel, max).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..numel).collect(),
            };
            let mut entry = InputReport {
                name: name.clone(),
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
                noise: 0.0,
                checked: indices.len(),
            };
            let mut args = consts.clone();
            for &i in &indices {
                let mut plus = consts[k].to_vec();
                plus[i] += h;
                args[k] = Tensor::new(consts[k].shape(), plus)?;
                let fp = f(&args)?.item()?;
                let mut minus = consts[k].to_vec();
                minus[i] -= h;
                args[k] = Tensor::new(consts[k].shape(), minus)?;
                let fm = f(&args)?.item()?;
                let numeric = (fp - fm) / (2.0 * h);
                let noise = roundoff_bound(fp.abs().max(fm.abs()), h);
                let err = rel_error_above(analytic[i], numeric, noise);
                if err > entry.max_rel_error || !err.is_finite() {
                    entry.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                    entry.worst_index = i;
                    entry.analytic = analytic[i];
                    entry.numeric = numeric;
                    entry.noise = noise;
                }
            }
            report.inputs.push(entry);
        }
        Ok(report)
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and
/// central differences with step `h`, over every element of `x`.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let report = GradCheck::new().input("x", x).step(h).run(|v| f(&v[0]))?;
    Ok(report.max_rel_error())
}
