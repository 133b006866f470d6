//! Finite-difference verification of [`Graph::backward`].

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::autodiff::{Graph, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_param_err: BTreeMap<String, f64>,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation flipped a ReLU sign.
    pub skipped_near_kink: usize,
}

/// `|a − b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the scalar built by `f` with central differences
/// `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
///
/// `f` builds a fresh graph from the parameters and returns it with its scalar output.
/// `fault` injects a wrong backward rule into the analytic pass only.
pub fn gradcheck<F>(f: F, params: &ParamStore, step: f64, fault: Option<OpKind>) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Contract(alloc::format!("gradcheck step {step} outside (0, 1e-2]")));
    }
    let (mut g, loss) = f(params)?;
    if let Some(kind) = fault {
        g.inject_backward_fault(kind);
    }
    let analytic = g.backward(loss)?;
    let base_signs = g.relu_signs().to_vec();

    let eval = |p: &ParamStore| -> Result<(f64, bool)> {
        let (g, loss) = f(p)?;
        Ok((g.value(loss).item(), g.relu_signs() == base_signs.as_slice()))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        per_param_err: BTreeMap::new(),
        checked: 0,
        skipped_near_kink: 0,
    };
    let mut probe = params.clone();
    for (name, grad) in &analytic {
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let x = params.get(name).expect("graph param comes from store").data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = x + step;
            let (plus, same_plus) = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = x - step;
            let (minus, same_minus) = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = x;
            if !(same_plus && same_minus) {
                report.skipped_near_kink += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            report.checked += 1;
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_param_err.insert(name.clone(), worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn build(body: impl Fn(&mut Graph, &ParamStore) -> Result<NodeId>) -> impl Fn(&ParamStore) -> Result<(Graph, NodeId)> {
        move |p| {
            let mut g = Graph::new();
            let out = body(&mut g, p)?;
            Ok((g, out))
        }
    }

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(alloc::vec![0.5, -2.0, 3.25]).unwrap());
        p.insert("y", Tensor::matrix(2, 2, alloc::vec![1.0, -1.0, 0.1, 7.0]).unwrap());
        p
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let f = build(|g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "x")?;
            let y = g.param(p, "y")?;
            let xx = g.mul(x, x)?;
            let yy = g.mul(y, y)?;
            let a = g.sum(xx);
            let b = g.sum(yy);
            g.add(a, b)
        });
        let r = gradcheck(f, &store(), 1e-3, None).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.per_param_err.len(), 2);
        assert_eq!(r.checked, 7);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let f = build(|g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "x")?;
            let z = g.scale(x, 0.0);
            let s = g.sum(z);
            let c = g.constant(Tensor::scalar(4.0));
            g.add(s, c)
        });
        let r = gradcheck(f, &store(), 1e-4, None).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn injected_fault_is_detected() {
        let f = build(|g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "x")?;
            let s = g.sigmoid(x);
            Ok(g.sum(s))
        });
        assert!(gradcheck(&f, &store(), 1e-5, None).unwrap().max_rel_err < 1e-8);
        let bad = gradcheck(f, &store(), 1e-5, Some(OpKind::Sigmoid)).unwrap();
        assert!(bad.max_rel_err > 0.1);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(alloc::vec![1e-7, 1.0]).unwrap());
        let f = build(|g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "x")?;
            let r = g.relu(x);
            Ok(g.sum(r))
        });
        let r = gradcheck(f, &p, 1e-5, None).unwrap();
        assert_eq!(r.skipped_near_kink, 1);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let f = build(|g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "x")?;
            Ok(g.sum(x))
        });
        assert!(gradcheck(&f, &store(), 0.0, None).is_err());
        assert!(gradcheck(f, &store(), 0.1, None).is_err());
    }
}
