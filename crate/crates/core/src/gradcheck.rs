//! Central finite-difference check of tape gradients.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Above this many elements a seeded random subsample of this size is checked.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradEntry {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Full analytic gradient per parameter tensor.
    pub analytic: Vec<Tensor>,
    /// Every checked element with its numeric estimate.
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
    pub loss: f64,
}

impl GradReport {
    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

struct Evaluation {
    loss: f64,
    grads: Vec<Tensor>,
    detached: Vec<Tensor>,
}

fn evaluate<'m, F>(f: &F, params: &[Tensor]) -> Result<Evaluation>
where
    F: Fn(&mut Tape<'m>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param_owned(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok(Evaluation {
        loss: value,
        grads: vars.iter().map(|v| grads.wrt(&tape, *v)).collect(),
        detached: tape.detached_values(),
    })
}

fn loss_only<'m, F>(f: &F, params: &[Tensor], pinned: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape<'m>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_pinned_detach(pinned.to_vec());
    let vars: Vec<Var> = params.iter().map(|p| tape.param_owned(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients of the scalar built by `f` against central differences.
///
/// `f` receives one trainable leaf per entry of `params` and returns the loss node.
/// Detached values are held at their unperturbed values during the finite
/// differences, so the numeric gradient is that of the same stop-gradient
/// surrogate the tape differentiates.
pub fn gradcheck<'m, F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<'m>, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Config(alloc::format!(
            "gradcheck step must be positive, got {}",
            opts.step
        )));
    }
    let Evaluation {
        loss,
        grads: analytic,
        detached,
    } = evaluate(&f, params)?;
    let again = loss_only(&f, params, &detached)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: loss,
            second: again,
        });
    }

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut flat: Vec<usize> = if total > opts.max_elements {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        sample(&mut rng, total, opts.max_elements).into_vec()
    } else {
        (0..total).collect()
    };
    flat.sort_unstable();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::with_capacity(flat.len());
    let mut max_rel_error: f64 = 0.0;
    for idx in flat {
        let param = offsets.partition_point(|&o| o <= idx) - 1;
        let element = idx - offsets[param];
        let orig = work[param].data()[element];
        work[param].data_mut()[element] = orig + opts.step;
        let plus = loss_only(&f, &work, &detached)?;
        work[param].data_mut()[element] = orig - opts.step;
        let minus = loss_only(&f, &work, &detached)?;
        work[param].data_mut()[element] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[param].data()[element];
        let rel_error = relative_error(a, numeric);
        max_rel_error = max_rel_error.max(rel_error);
        entries.push(GradEntry {
            param,
            element,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    Ok(GradReport {
        analytic,
        entries,
        max_rel_error,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_at_three() {
        let theta = [Tensor::scalar(3.0)];
        let report = gradcheck(|t, p| t.mul(p[0], p[0]), &theta, Default::default()).unwrap();
        assert_eq!(report.analytic[0].item(), 6.0);
        let e = report.entries[0];
        assert!((e.numeric - 6.0).abs() < 1e-8);
        assert!(report.passes(1e-6));
    }

    #[test]
    fn detached_parameter_reports_exact_zero() {
        let params = [
            Tensor::vector(vec![0.5, -0.25]),
            Tensor::vector(vec![1.0, 2.0]),
        ];
        let report = gradcheck(
            |t, p| {
                let cut = t.detach(p[0]);
                let prod = t.mul(cut, p[1])?;
                Ok(t.sum(prod))
            },
            &params,
            Default::default(),
        )
        .unwrap();
        assert!(report.analytic[0].data().iter().all(|&g| g == 0.0));
        assert_eq!(report.analytic[1].data(), &[0.5, -0.25]);
        assert!(report
            .entries
            .iter()
            .all(|e| e.param != 0 || e.numeric == 0.0));
        assert!(report.passes(1e-8));
    }

    #[test]
    fn nondeterministic_closure_detected() {
        use core::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let params = [Tensor::scalar(1.0)];
        let err = gradcheck(
            |t, p| {
                let k = counter.fetch_add(1, Ordering::Relaxed) as f64;
                Ok(t.scale(p[0], 1.0 + k))
            },
            &params,
            Default::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn subsamples_large_parameter_sets() {
        let params = [Tensor::ones(&[50, 50])];
        let opts = GradCheckOptions {
            max_elements: 100,
            ..Default::default()
        };
        let report = gradcheck(|t, p| Ok(t.sum(p[0])), &params, opts).unwrap();
        assert_eq!(report.entries.len(), 100);
        assert!(report.passes(1e-6));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-15);
    }
}
