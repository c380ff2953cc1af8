//! Small neural building blocks expressed in tape operations.

use super::tape::Var;
use super::tensor::Real;
use crate::error::Result;

/// `x · w (+ b)` for `x: [n × in]`, `w: [in × out]`, `b: [out]`.
pub fn linear<'t, T: Real>(x: &Var<'t, T>, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add_row(b),
        None => Ok(y),
    }
}

/// Gated feed-forward unit `(silu(x·w1) ⊙ (x·w2)) · w3`.
pub fn swiglu<'t, T: Real>(x: &Var<'t, T>, w1: &Var<'t, T>, w2: &Var<'t, T>, w3: &Var<'t, T>) -> Result<Var<'t, T>> {
    let gate = x.matmul(w1)?.silu()?;
    let up = x.matmul(w2)?;
    gate.mul(&up)?.matmul(w3)
}

/// Two-layer perceptron `linear → silu → linear`.
pub fn mlp2<'t, T: Real>(
    x: &Var<'t, T>,
    w1: &Var<'t, T>,
    b1: &Var<'t, T>,
    w2: &Var<'t, T>,
    b2: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let h = linear(x, w1, Some(b1))?.silu()?;
    linear(&h, w2, Some(b2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn swiglu_of_zero_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let w1 = tape.constant(Tensor::full(&[2, 4], 0.3));
        let w2 = tape.constant(Tensor::full(&[2, 4], -0.7));
        let w3 = tape.constant(Tensor::full(&[4, 2], 1.1));
        assert!(swiglu(&x, &w1, &w2, &w3).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_scalar_by_hand() {
        // x = 2, w1 = 0.5, w2 = 3, w3 = -1:
        // silu(1) = 1/(1+e^-1); out = -(silu(1) · 6).
        let tape = Tape::<f64>::new();
        let s = |v: f64| tape.constant(Tensor::from_f64(&[1, 1], &[v]).unwrap());
        let out = swiglu(&s(2.0), &s(0.5), &s(3.0), &s(-1.0)).unwrap().data()[0];
        let expected = -(1.0 / (1.0 + (-1f64).exp())) * 6.0;
        assert!((out - expected).abs() < 1e-15);
    }
}
