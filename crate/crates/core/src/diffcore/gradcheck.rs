//! Central finite differences, used as an independent oracle for `backward`.

use std::collections::BTreeMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Estimates `d f / d p` for every coordinate of every tensor in `params` by
/// `(f(p + h) - f(p - h)) / 2h`.
pub fn finite_diff_grad<T, F>(
    params: &BTreeMap<String, Tensor<T>>,
    step: f64,
    mut f: F,
) -> Result<BTreeMap<String, Tensor<T>>>
where
    T: Scalar,
    F: FnMut(&BTreeMap<String, Tensor<T>>) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let len = params[&name].len();
        let mut grad = Vec::with_capacity(len);
        for i in 0..len {
            let orig = params[&name].data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = T::from_f64_lossy(orig.as_f64() + step);
            let plus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = T::from_f64_lossy(orig.as_f64() - step);
            let minus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { op: "finite_diff_grad" });
            }
            grad.push(T::from_f64_lossy((plus - minus) / (2.0 * step)));
        }
        out.insert(name.clone(), Tensor::new(params[&name].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest coordinate error between two gradient maps, relative to the
/// largest reference magnitude. Key sets must match.
pub fn max_relative_error<A: Scalar, B: Scalar>(
    analytic: &BTreeMap<String, Tensor<A>>,
    reference: &BTreeMap<String, Tensor<B>>,
) -> Result<f64> {
    if analytic.keys().ne(reference.keys()) {
        return Err(Error::InvalidArgument(format!(
            "gradient key sets differ: {:?} vs {:?}",
            analytic.keys().collect::<Vec<_>>(),
            reference.keys().collect::<Vec<_>>()
        )));
    }
    let mut max_err = 0.0f64;
    let mut max_ref = 0.0f64;
    for (name, a) in analytic {
        let r = &reference[name];
        if a.shape() != r.shape() {
            return Err(Error::shape("max_relative_error", format!("{name}: {:?} vs {:?}", a.shape(), r.shape())));
        }
        for (x, y) in a.data().iter().zip(r.data()) {
            max_err = max_err.max((x.as_f64() - y.as_f64()).abs());
            max_ref = max_ref.max(y.as_f64().abs());
        }
    }
    Ok(if max_ref == 0.0 { max_err } else { max_err / max_ref })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(&one("p", 3.0), 1e-3, |p| {
            let v = p["p"].data()[0];
            Ok(v * v)
        })
        .unwrap();
        assert_abs_diff_eq!(g["p"].data()[0], 6.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut p = one("a", 1.0);
        p.insert("b".into(), Tensor::new(vec![2], vec![4.0, -1.0]).unwrap());
        let g = finite_diff_grad(&p, 1e-3, |_| Ok(2.5)).unwrap();
        assert!(g.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert!(finite_diff_grad(&one("p", 1.0), 0.0, |_| Ok(0.0)).is_err());
        assert!(matches!(
            finite_diff_grad(&one("p", 1.0), 1e-3, |_| Ok(f64::NAN)),
            Err(Error::NonFinite { .. })
        ));
    }
}
