//! Central finite-difference gradient checks.
//!
//! The error measure is norm-wise: `‖g_tape − g_fd‖₂ / max(‖g_tape‖₂, ‖g_fd‖₂)`
//! over the checked coordinates, which stays meaningful when individual
//! gradient entries are close to zero.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Which coordinates to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    /// Every entry of every input; the error is the worst per-input error.
    All,
    /// `count` entries drawn uniformly over all inputs; the error is computed
    /// jointly over the sample.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::Tape("gradient check needs a scalar function".into()));
    }
    Ok(out.data()[0])
}

fn rel(a: &[f64], n: &[f64]) -> (f64, f64) {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let abs = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = na.max(nn);
    (if scale == 0.0 { 0.0 } else { diff / scale }, abs)
}

/// Compares tape gradients of the scalar function `f` with central
/// differences at `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], coords: Coords, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };
    let mut work = inputs.to_vec();
    let mut numeric_at = |input: usize, idx: usize| -> Result<f64> {
        let orig = work[input].data()[idx];
        work[input].data_mut()[idx] = orig + FD_STEP;
        let plus = eval(&work, &f)?;
        work[input].data_mut()[idx] = orig - FD_STEP;
        let minus = eval(&work, &f)?;
        work[input].data_mut()[idx] = orig;
        Ok((plus - minus) / (2.0 * FD_STEP))
    };
    match coords {
        Coords::All => {
            let mut report = GradCheckReport {
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                checked: 0,
            };
            for (i, t) in inputs.iter().enumerate() {
                let numeric = (0..t.numel()).map(|j| numeric_at(i, j)).collect::<Result<Vec<_>>>()?;
                let (r, a) = rel(&analytic[i], &numeric);
                report.max_rel_error = report.max_rel_error.max(r);
                report.max_abs_error = report.max_abs_error.max(a);
                report.checked += t.numel();
            }
            Ok(report)
        }
        Coords::Sample { count, seed } => {
            let flat: Vec<(usize, usize)> = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picks = sample(&mut rng, flat.len(), count.min(flat.len()));
            let mut a = Vec::new();
            let mut n = Vec::new();
            for p in picks.iter() {
                let (i, j) = flat[p];
                a.push(analytic[i][j]);
                n.push(numeric_at(i, j)?);
            }
            let (r, abs) = rel(&a, &n);
            Ok(GradCheckReport {
                max_rel_error: r,
                max_abs_error: abs,
                checked: a.len(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_gradient_of_a_product() {
        let x = Tensor::from_f64(&[2, 2], &[0.3, -1.2, 0.7, 2.0]).unwrap();
        let y = Tensor::from_f64(&[2, 2], &[1.5, 0.1, -0.4, 0.9]).unwrap();
        let r = check_gradients(&[x, y], Coords::All, |_, v| v[0].mul(&v[1])?.sum()).unwrap();
        assert!(r.passes(1e-9), "{r:?}");
        assert_eq!(r.checked, 8);
    }
}
