use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh graph and one bound leaf per entry of `params` and
/// must return a scalar. `samples` coordinates are drawn uniformly (without
/// replacement) across all parameters; if there are fewer, all are checked.
pub fn grad_check<F>(
    params: &mut [Tensor<f64>],
    mut f: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }

    let mut eval = |params: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        let grads = vars.iter().map(|&v| grads.take(v).expect("leaf gradient")).collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    for (p, grad) in analytic.iter().enumerate() {
        if let Some(i) = grad.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: format!("grad[{p}]"),
                index: i,
            });
        }
    }

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.numel();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(|p| p.numel()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        sample(&mut rng, total, samples).into_vec()
    };
    coords.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for flat in coords {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[p];
        let original = params[p].data()[i];
        params[p].data_mut()[i] = original + eps;
        let (plus, _) = eval(params, false)?;
        params[p].data_mut()[i] = original - eps;
        let (minus, _) = eval(params, false)?;
        params[p].data_mut()[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                name: format!("param[{p}]"),
                index: i,
            });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[p].data()[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((p, i));
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_f64(&[0.5, -1.5, 2.0]);
        let mut params = vec![Tensor::from_f64(&[1.0, 2.0, 3.0])];
        let report = grad_check(
            &mut params,
            |g, vars| {
                let xv = g.constant(x.clone());
                let prod = g.mul(vars[0], xv)?;
                Ok(g.sum(prod))
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn dead_branch_has_zero_gradient_both_ways() {
        let mut params = vec![Tensor::from_f64(&[1.0]), Tensor::from_f64(&[4.0, 5.0])];
        let report = grad_check(
            &mut params,
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                let _dead = g.tanh(vars[1]);
                Ok(g.sum(sq))
            },
            1e-5,
            10,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let mut params = vec![Tensor::from_f64(&[1.0])];
        let r = grad_check(&mut params, |g, v| Ok(g.sum(v[0])), 1e-2, 1, 0);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let mut params = vec![Tensor::from_f64(&[1.0, f64::INFINITY])];
        let r = grad_check(
            &mut params,
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            1e-5,
            2,
            0,
        );
        match r {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
