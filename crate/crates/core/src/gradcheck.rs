//! Central-difference verification of backward passes.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

/// Outcome of one finite-difference probe run.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Per input tensor: maximum absolute error between analytic and numeric.
    pub max_abs_error: Vec<f32>,
    /// Per input tensor: maximum relative error (denominator floored at 1.0).
    pub max_rel_error: Vec<f32>,
    pub pass: bool,
    pub eps: f32,
    pub tol: f32,
    pub probed: usize,
}

impl GradReport {
    pub fn worst_rel(&self) -> f32 {
        self.max_rel_error.iter().cloned().fold(0.0, f32::max)
    }
}

/// Coordinates above which a seeded random subset is probed instead of
/// every coordinate.
pub const EXHAUSTIVE_LIMIT: usize = 512;

/// Checks the analytic gradient of a scalar-valued tensor function against
/// central differences at every coordinate of every input (or a seeded
/// 512-coordinate subset when the inputs are larger).
///
/// The relative error uses `|a - n| / max(|a|, |n|, 1.0)`, so coordinates with
/// tiny gradients are effectively held to an absolute tolerance.
pub fn finite_diff_check(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    eps: f32,
    tol: f32,
) -> Result<GradReport> {
    if eps <= 0.0 {
        return Err(Error::Contract("finite_diff_check requires eps > 0".into()));
    }
    // Fresh leaves so prior graph state cannot leak in.
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| {
            let l = t.detach();
            l.set_requires_grad(true);
            l
        })
        .collect();

    let y = f(&leaves)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check requires a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    y.backward()?;
    let analytic: Vec<Vec<f32>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    // Choose probe coordinates: (input index, coordinate).
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, l) in leaves.iter().enumerate() {
        for j in 0..l.numel() {
            coords.push((i, j));
        }
    }
    if coords.len() > EXHAUSTIVE_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
        coords.shuffle(&mut rng);
        coords.truncate(EXHAUSTIVE_LIMIT);
    }

    let mut max_abs = vec![0.0f32; leaves.len()];
    let mut max_rel = vec![0.0f32; leaves.len()];
    let mut pass = true;
    for &(i, j) in &coords {
        let orig = leaves[i].value_at(j);
        leaves[i].set_value_at(j, orig + eps);
        let y_plus = no_grad(|| f(&leaves))?.item() as f64;
        leaves[i].set_value_at(j, orig - eps);
        let y_minus = no_grad(|| f(&leaves))?.item() as f64;
        leaves[i].set_value_at(j, orig);
        let numeric = ((y_plus - y_minus) / (2.0 * eps as f64)) as f32;
        let a = analytic[i][j];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1.0);
        max_abs[i] = max_abs[i].max(abs);
        max_rel[i] = max_rel[i].max(rel);
        if rel > tol {
            pass = false;
        }
    }

    Ok(GradReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        pass,
        eps,
        tol,
        probed: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::create(&[6], Init::Uniform { seed: 1, lo: -1.0, hi: 1.0 }).unwrap();
        let r = finite_diff_check(&|xs| Ok(xs[0].sum_all()), &[x], 1e-3, 1e-3).unwrap();
        assert!(r.pass);
        assert!(r.worst_rel() < 1e-3);
    }

    #[test]
    fn quadratic_matches_analytic() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let r = finite_diff_check(&|xs| Ok(xs[0].mul(&xs[0])?.sum_all()), &[x.clone()], 1e-3, 1e-3).unwrap();
        assert!(r.pass, "report: {r:?}");
        // analytic gradient is [2, 4]
        let leaf = x.detach().with_requires_grad();
        leaf.mul(&leaf).unwrap().sum_all().backward().unwrap();
        assert_eq!(leaf.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn corrupted_gradient_fails() {
        // exp forward paired with a wrong (identity) backward via detach trick:
        // f computes exp but gradient check sees sum(x) analytic path.
        let x = Tensor::create(&[4], Init::Uniform { seed: 3, lo: 0.5, hi: 1.5 }).unwrap();
        let f = |xs: &[Tensor]| -> Result<Tensor> {
            // value of exp(x).sum() but gradient of x.sum()
            let wrong = xs[0].sum_all();
            let true_val = no_grad(|| xs[0].exp().sum_all());
            wrong.sub(&wrong.detach())?.add(&true_val)
        };
        let r = finite_diff_check(&f, &[x], 1e-3, 1e-3).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn non_scalar_rejected() {
        let x = Tensor::zeros(&[3]);
        assert!(finite_diff_check(&|xs| Ok(xs[0].relu()), &[x], 1e-3, 1e-3).is_err());
    }
}
