use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every coordinate
/// of `x`, where the numeric derivative is a central difference with step `h`.
///
/// `f` builds a scalar on a fresh graph from the leaf it is handed.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(f, x, h, None)
}

/// Like [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_with<F>(f: F, x: &Tensor, h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.input(t);
        let out = f(&mut g, leaf)?;
        let v = g.value(out).data()[0];
        if v.is_nan() {
            return Err(Error::Evaluation("function returned NaN".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let leaf = g.input(x.clone());
    let out = f(&mut g, leaf)?;
    if g.value(out).data()[0].is_nan() {
        return Err(Error::Evaluation("function returned NaN".into()));
    }
    let grads = g.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.wrt(leaf).unwrap_or(&zeros);

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
