use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    grad_check_many(|vars: &[Var<'_>]| f(vars[0]), std::slice::from_ref(point), h)
}

/// Like [`grad_check`] but over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = pts.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let v = f(&vars)?.value().item()?;
        if !v.is_finite() {
            return Err(Error::domain("grad_check", format!("non-finite value {v}")));
        }
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = f(&vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(points[k].shape()));
        for i in 0..points[k].len() {
            let x0 = points[k].data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_sum_is_tight() {
        let x = Tensor::from_vec(vec![0.1, -0.3]);
        let err = grad_check(|v| Ok(v.exp().sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_is_exact() {
        let x = Tensor::from_vec(vec![0.7, -1.2, 3.0]);
        let err = grad_check(|v| Ok(v.scale(2.5).sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_finite_probe_is_a_domain_error() {
        let x = Tensor::from_vec(vec![1e-6]);
        let res = grad_check(|v| Ok(v.log()?.sum()), &x, 1e-5);
        assert!(matches!(res, Err(Error::Domain { .. })));
    }
}
