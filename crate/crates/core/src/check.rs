//! Finite-difference gradient checking.
//!
//! The oracle evaluates the scalar function twice per probed coordinate with
//! a central difference; it exercises only the forward path, so it is
//! independent of every backward rule it validates. Intended for 64-bit mode,
//! where the default step of 1e-5 resolves relative errors below 1e-6.

use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::{backward, Scalar, Tensor};
use crate::Result;

/// Settings for one gradient check.
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error `|a-f| / max(1, |a|, |f|)`.
    pub tolerance: f64,
    /// Coordinates probed per leaf; all coordinates when the leaf is smaller.
    pub coords_per_leaf: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-6,
            coords_per_leaf: 8,
        }
    }
}

/// Worst observed deviation between analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl GradCheck {
    /// Compare analytic gradients of `f` against central differences at a
    /// sample of coordinates of each leaf. `f` must rebuild its graph from
    /// the leaves it is given on every call.
    pub fn run<S, F, R>(&self, f: F, leaves: &[Tensor<S>], rng: &mut R) -> Result<GradReport>
    where
        S: Scalar,
        F: Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
        R: Rng,
    {
        let root = f(leaves)?;
        let grads = backward(&root)?;

        let mut report = GradReport::default();
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(leaf);
            let n = leaf.numel();
            let coords: Vec<usize> = if n <= self.coords_per_leaf {
                (0..n).collect()
            } else {
                (0..self.coords_per_leaf)
                    .map(|_| rng.gen_range(0..n))
                    .collect()
            };
            for &ci in &coords {
                let base = leaf.data()[ci].to_f64();
                let eval = |v: f64| -> Result<f64> {
                    let mut data = leaf.data().to_vec();
                    data[ci] = S::from_f64(v);
                    let mut probe: Vec<Tensor<S>> = leaves.to_vec();
                    probe[li] = Tensor::leaf(leaf.shape(), data)?;
                    Ok(f(&probe)?.item().to_f64())
                };
                let plus = eval(base + self.step)?;
                let minus = eval(base - self.step)?;
                let fd = (plus - minus) / (2.0 * self.step);
                let an = analytic.map(|g| g[ci].to_f64()).unwrap_or(0.0);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                }
                report.coords_checked += 1;
            }
        }
        Ok(report)
    }

    /// `run` that panics with context when the tolerance is exceeded; for
    /// use in tests.
    pub fn assert_ok<S, F, R>(&self, name: &str, f: F, leaves: &[Tensor<S>], rng: &mut R)
    where
        S: Scalar,
        F: Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
        R: Rng,
    {
        let report = self
            .run(f, leaves, rng)
            .unwrap_or_else(|e| panic!("gradient check `{name}` failed to evaluate: {e}"));
        assert!(
            report.max_rel_err < self.tolerance,
            "gradient check `{name}`: max relative error {:.3e} exceeds {:.1e} \
             ({} coordinates)",
            report.max_rel_err,
            self.tolerance,
            report.coords_checked
        );
    }
}

/// Draw a uniform leaf whose values stay away from activation kinks, so a
/// central difference never straddles a non-differentiable point.
pub fn kink_free_leaf<S: Scalar, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    scale: f64,
    margin: f64,
) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| {
            let mut v = rng.gen_range(-scale..scale);
            if v.abs() < margin {
                v = if v >= 0.0 { margin } else { -margin };
            }
            S::from_f64(v)
        })
        .collect();
    Tensor::leaf(shape, data).expect("shape/data sizes agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let mut rng = crate::rng::root(1);
        let x = kink_free_leaf::<f64, _>(&mut rng, &[2, 3], 1.0, 0.05);
        GradCheck::default().assert_ok(
            "sum(x*x)",
            |ls| Ok(ls[0].mul(&ls[0])?.sum()),
            &[x],
            &mut rng,
        );
    }

    #[test]
    fn missing_gradient_path_is_caught() {
        // The squared term is detached, so backward misses it while the
        // finite difference sees it: the check must flag the mismatch.
        let mut rng = crate::rng::root(2);
        let x = kink_free_leaf::<f64, _>(&mut rng, &[4], 1.0, 0.05);
        let report = GradCheck::default()
            .run(
                |ls| {
                    let hidden = ls[0].detach().mul(&ls[0].detach())?.scale(0.5).sum();
                    ls[0].sum().add(&hidden)
                },
                &[x],
                &mut rng,
            )
            .unwrap();
        assert!(report.max_rel_err > 1e-3);
    }
}
