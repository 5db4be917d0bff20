//! Finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Param, Tape, Val};
use crate::tensor::{Element, Tensor};

/// Builds a scalar loss on the given tape from bound leaf values.
pub trait LossFn<E: Element>: Fn(&mut Tape<E>, &[Val]) -> Result<Val> {}
impl<E: Element, F: Fn(&mut Tape<E>, &[Val]) -> Result<Val>> LossFn<E> for F {}

/// Compares tape gradients of `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h` at every element of every leaf.
///
/// Returns the worst relative error, denominator `max(|a|,|b|,1e-8)`.
/// Meant to run with `E = f64` and `h` in `[1e-5, 1e-3]`.
pub fn grad_check<E: Element>(f: impl LossFn<E>, leaves: &[Tensor<E>], h: f64) -> Result<f64> {
    let params: Vec<Param<E>> = leaves
        .iter()
        .enumerate()
        .map(|(i, t)| Param::new(format!("leaf{i}"), t.clone()))
        .collect();

    let eval = |params: &[Param<E>], with_grad: bool| -> Result<(f64, Option<()>)> {
        let mut tape = if with_grad {
            Tape::new()
        } else {
            Tape::no_grad()
        };
        let vals: Vec<Val> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vals)?;
        let value = tape.value(loss);
        if !value.is_scalar() {
            return Err(Error::Contract(format!(
                "grad_check: loss must be scalar, got shape {:?}",
                value.shape()
            )));
        }
        let out = value.scalar_value().to_real();
        if with_grad {
            tape.backward(loss)?;
        }
        Ok((out, with_grad.then_some(())))
    };

    // analytic gradients
    for p in &params {
        p.zero_grad();
    }
    eval(&params, true)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|x| x.to_real()).collect())
                .unwrap_or_else(|| vec![0.0; p.value().numel()])
        })
        .collect();

    let he = E::from_real(h);
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.value().numel();
        for e in 0..n {
            let orig = p.value().data()[e];
            p.update(|d| d[e] = orig + he);
            let plus = eval(&params, false)?.0;
            p.update(|d| d[e] = orig - he);
            let minus = eval(&params, false)?.0;
            p.update(|d| d[e] = orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][e];
            // below the floor the comparison is absolute: some parameters
            // (e.g. attention key biases) have exactly-zero true gradients,
            // where finite differences return pure rounding noise
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Like [`grad_check`], but differentiates with respect to already-existing
/// parameters that the loss closure binds itself (model weights). The
/// closure must be a pure, deterministic function of the parameter values.
pub fn grad_check_params<E: Element>(
    f: impl Fn(&mut Tape<E>) -> Result<Val>,
    params: &[Param<E>],
    h: f64,
) -> Result<f64> {
    let eval = |with_grad: bool| -> Result<f64> {
        let mut tape = if with_grad {
            Tape::new()
        } else {
            Tape::no_grad()
        };
        let loss = f(&mut tape)?;
        let value = tape.value(loss);
        if !value.is_scalar() {
            return Err(Error::Contract(format!(
                "grad_check_params: loss must be scalar, got shape {:?}",
                value.shape()
            )));
        }
        let out = value.scalar_value().to_real();
        if with_grad {
            tape.backward(loss)?;
        }
        Ok(out)
    };

    for p in params {
        p.zero_grad();
    }
    eval(true)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|x| x.to_real()).collect())
                .unwrap_or_else(|| vec![0.0; p.value().numel()])
        })
        .collect();
    for p in params {
        p.zero_grad();
    }

    let he = E::from_real(h);
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.value().numel();
        for e in 0..n {
            let orig = p.value().data()[e];
            p.update(|d| d[e] = orig + he);
            let plus = eval(false)?;
            p.update(|d| d[e] = orig - he);
            let minus = eval(false)?;
            p.update(|d| d[e] = orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][e];
            // below the floor the comparison is absolute: some parameters
            // (e.g. attention key biases) have exactly-zero true gradients,
            // where finite differences return pure rounding noise
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
