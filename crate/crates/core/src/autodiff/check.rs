use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding do not blow up the ratio.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<(f64, Graph<f64>, Var, Var)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let root = f(&mut g, xv)?;
    let v = g.value(root);
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok((y, g, xv, root))
}

/// Checks `∂f/∂x` from the graph against `(f(x + h e_i) - f(x - h e_i)) / 2h`
/// for every coordinate. `f` builds the scalar objective from the leaf it is
/// handed.
///
/// The per-coordinate error is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let (_, g, xv, root) = eval(&f, x)?;
    let analytic = g.backward(root)?.take(xv).into_data();
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.data().to_vec();
    for i in 0..x.numel() {
        let orig = probe[i];
        probe[i] = orig + h;
        let (fp, ..) = eval(&f, &Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - h;
        let (fm, ..) = eval(&f, &Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for (&a, &n) in analytic.iter().zip(&numeric) {
        let abs = (a - n).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        tol,
        passed: max_rel < tol,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::CustomOp;

    #[test]
    fn linear_function_has_zero_error() {
        let x = Tensor::from_f64([4], &[0.3, -1.2, 2.0, 0.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-3, 1e-3).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
        assert!(r.analytic.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn softplus_sum_matches_finite_differences() {
        let x = Tensor::from_f64([3], &[-1.0, 0.0, 1.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.softplus(x);
                Ok(g.sum(y))
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_err);
    }

    /// Squares its input but claims the derivative is `x` instead of `2x`.
    struct BrokenSquare;

    impl CustomOp<f64> for BrokenSquare {
        fn name(&self) -> &str {
            "broken_square"
        }

        fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(inputs[0].map(|v| v * v))
        }

        fn backward(
            &self,
            inputs: &[&Tensor<f64>],
            _output: &Tensor<f64>,
            grad: &Tensor<f64>,
        ) -> Vec<Option<Tensor<f64>>> {
            let x = inputs[0];
            let d = x.data().iter().zip(grad.data()).map(|(a, b)| a * b).collect();
            vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
        }
    }

    #[test]
    fn wrong_backward_rule_fails() {
        let x = Tensor::from_f64([2], &[0.7, -1.3]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.custom(Box::new(BrokenSquare), &[x])?;
                Ok(g.sum(y))
            },
            &x,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::from_f64([1], &[0.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.log(x);
                Ok(g.sum(y))
            },
            &x,
            1e-3,
            1e-3,
        );
        assert!(r.is_err());
    }
}
