//! Central finite-difference verification of tape gradients (f64 only).

mod suite;

pub use suite::{run_suite, SuiteOptions};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are compared on an absolute scale.
    pub floor: f64,
    /// Checks at most this many elements per input (evenly strided).
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-5,
            floor: 1e-3,
            max_elements: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub label: String,
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err={:.3e} tol={:.0e} {}",
            self.label,
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Builds the graph under test from leaves bound to `inputs`.
pub trait GraphFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> GraphFn for F {}

/// Scalarizes the graph output with a fixed random projection and compares
/// analytic gradients against central differences for every input.
pub fn grad_check(
    label: &str,
    inputs: &[(&str, Tensor<f64>)],
    build: impl GraphFn,
    cfg: GradCheckConfig,
) -> Result<GradReport> {
    let projection = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    };

    let evaluate = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let r = tape.constant(projection.clone());
    let weighted = tape.mul(&out, &r)?;
    let loss = tape.sum_all(&weighted);
    tape.backward(loss)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let n = t.len();
        let stride = match cfg.max_elements {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst = 0.0f64;
        let mut checked = 0;
        for j in (0..n).step_by(stride) {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + cfg.step;
            let plus = evaluate(&values)?;
            values[i].data_mut()[j] = orig - cfg.step;
            let minus = evaluate(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
        reports.push(InputReport {
            name: name.to_string(),
            max_rel_error: worst,
            checked,
        });
    }
    Ok(GradReport {
        label: label.to_string(),
        inputs: reports,
        tolerance: cfg.tolerance,
    })
}
