//! Central finite-difference checking of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per input (sampled with a fixed
    /// seed); `None` checks every coordinate.
    pub max_elems: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, max_elems: None, seed: 0 }
    }
}

/// Per-input result: `max|a - n| / max(max|a|, max|n|, 1e-8)` over the
/// checked coordinates.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_err <= self.tol)
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], grad: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences `(f(x+h) - f(x-h)) / 2h`. Failures are reported, not raised;
/// errors only come from `f` itself.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = eval(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let coords: Vec<usize> = match opts.max_elems {
            Some(m) if m < numel => {
                let mut c = sample(&mut rng, numel, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let (mut max_abs, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
        for &k in &coords {
            let orig = input.data()[k];
            probe[idx].data_mut()[k] = orig + opts.step;
            let (t, _, o) = eval(&f, &probe, false)?;
            let plus = t.value(o).data()[0];
            probe[idx].data_mut()[k] = orig - opts.step;
            let (t, _, o) = eval(&f, &probe, false)?;
            let minus = t.value(o).data()[0];
            probe[idx].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[idx].data()[k];
            max_abs = max_abs.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        reports.push(InputReport {
            index: idx,
            checked: coords.len(),
            max_abs_err: max_abs,
            max_rel_err: max_abs / max_a.max(max_n).max(1e-8),
        });
    }
    Ok(GradCheckReport { inputs: reports, tol: opts.tol })
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct sensitivity.
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = tape.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // A point closer to the kink of abs than the step: the central
        // difference sees the kink, the analytic slope does not.
        let x = Tensor::new(&[3], vec![1e-6, 1.0, -2.0]).unwrap();
        let rep = grad_check(
            |t, v| {
                let a = t.abs(v[0]);
                Ok(t.sum(a))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn sampling_limits_checked_coordinates() {
        let x = Tensor::from_fn(&[50], |i| i as f64 * 0.1);
        let opts = GradCheckOptions { max_elems: Some(7), ..Default::default() };
        let rep = grad_check(
            |t, v| {
                let s = t.mul(v[0], v[0])?;
                Ok(t.sum(s))
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert_eq!(rep.inputs[0].checked, 7);
        assert!(rep.passed(), "{rep:?}");
    }
}
