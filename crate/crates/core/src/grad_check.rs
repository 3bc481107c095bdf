//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar function against central
/// differences with step `h`.
///
/// `build` receives a fresh graph and one leaf per input tensor and must
/// return the scalar output. The result is the maximum over every input
/// coordinate of `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<T, F>(build: F, inputs: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    let eval = |values: &[Tensor<T>], with_grad: bool| -> Result<(f64, Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::Dimension("grad_check function must be scalar-valued".into()));
        }
        let y = v.data()[0].as_f64();
        if !y.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value {y}")));
        }
        Ok((y, g, vars, out))
    };

    let (_, g, vars, out) = eval(inputs, true)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*var) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; inputs[which].numel()],
        };
        for (coord, &a) in analytic.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::Numeric(format!("non-finite analytic gradient at input {which}[{coord}]")));
            }
            let base = inputs[which].data()[coord];
            probe[which].data_mut()[coord] = base + T::of(h);
            let (up, ..) = eval(&probe, false)?;
            probe[which].data_mut()[coord] = base - T::of(h);
            let (down, ..) = eval(&probe, false)?;
            probe[which].data_mut()[coord] = base;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
