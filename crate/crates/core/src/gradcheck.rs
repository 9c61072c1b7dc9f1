//! Central finite-difference verification of tape gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoding::CharMatrix;
use crate::error::{Error, Result};
use crate::model::{loss_on_tape, BoundModel, CrnnConfig, CrnnParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Check at most this many elements per block, sampled without replacement.
    pub max_per_block: Option<usize>,
    pub seed: u64,
    /// Smallest denominator of the relative error. Central differences at
    /// `step = 1e-4` on an O(1) loss carry about 1e-12 of round-off, so gradients
    /// below this scale are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tol: 1e-4,
            max_per_block: None,
            seed: 0,
            floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Analytic and numeric derivative at `worst_index`.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    /// Elements whose perturbation crossed a ReLU or max-routing boundary, where a
    /// central difference does not estimate the derivative. Not counted in the error.
    pub skipped_kinks: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.blocks.iter().map(|b| b.skipped_kinks).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>12} {:>8} {:>8} {:>14} {:>14}",
            "block", "max_rel_err", "checked", "kinks", "worst_analytic", "worst_numeric"
        )?;
        for b in &self.blocks {
            writeln!(
                f,
                "{:<16} {:>12.3e} {:>8} {:>8} {:>14.6e} {:>14.6e}",
                b.name, b.max_rel_err, b.checked, b.skipped_kinks, b.worst_pair.0, b.worst_pair.1
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (tol {:.1e}): {}",
            self.max_rel_err(),
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Eval {
    loss: f64,
    signature: u64,
}

fn evaluate<F>(f: &mut F, params: &[(String, Tensor)]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((tape, vars, loss))
}

fn probe<F>(f: &mut F, params: &[(String, Tensor)]) -> Result<Eval>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = evaluate(f, params)?;
    Ok(Eval {
        loss: tape.value(loss).item(),
        signature: tape.kink_signature(),
    })
}

/// Compares the tape gradient of the scalar returned by `f` against central
/// differences, block by block. `f` receives one leaf per parameter block.
///
/// Parameters are restored bit-for-bit before returning.
pub fn grad_check<F>(mut f: F, params: &mut [(String, Tensor)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument(format!("finite-difference step {} must be positive", opts.step)));
    }
    let (mut tape, vars, loss) = evaluate(&mut f, params)?;
    let base_signature = tape.kink_signature();
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let mut blocks = Vec::with_capacity(params.len());
    for b in 0..params.len() {
        let numel = params[b].1.numel();
        let indices: Vec<usize> = match opts.max_per_block {
            Some(k) if k < numel => {
                let mut s = sample(&mut rng, numel, k).into_vec();
                s.sort_unstable();
                s
            }
            _ => (0..numel).collect(),
        };
        let mut report = BlockReport {
            name: params[b].0.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            worst_pair: (0.0, 0.0),
            checked: 0,
            skipped_kinks: 0,
        };
        for i in indices {
            let original = params[b].1.data()[i];
            params[b].1.data_mut()[i] = original + h;
            let plus = probe(&mut f, params);
            params[b].1.data_mut()[i] = original - h;
            let minus = probe(&mut f, params);
            params[b].1.data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            if plus.signature != base_signature || minus.signature != base_signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * h);
            let err = relative_error(analytic[b].data()[i], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst_index = i;
                report.worst_pair = (analytic[b].data()[i], numeric);
            }
        }
        blocks.push(report);
    }
    Ok(GradCheckReport { blocks, tol: opts.tol })
}

/// Checks every parameter block of a full model on one labelled batch.
pub fn check_model(
    config: &CrnnConfig,
    params: &CrnnParams,
    inputs: &[CharMatrix],
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    params.check_config(config)?;
    let mut named = params.named_blocks();
    let refs: Vec<&CharMatrix> = inputs.iter().collect();
    grad_check(
        |tape, vars| {
            let model = BoundModel::from_vars(config.cell, config.hidden, vars);
            loss_on_tape(tape, config, &model, &refs, labels)
        },
        &mut named,
        opts,
    )
}
