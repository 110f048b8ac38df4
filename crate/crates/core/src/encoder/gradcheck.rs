//! Central finite-difference verification of analytic gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::GradMap;
use crate::error::Result;
use crate::params::Parameters;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Options for [`gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub samples_per_tensor: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 8,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

fn nudge<P: Parameters<f64>>(params: &mut P, name: &str, idx: usize, delta: f64) {
    params.visit_mut(&mut |n, a| {
        if n == name {
            let v = a.as_slice_mut().expect("standard layout");
            v[idx] += delta;
        }
    });
}

/// Compares `loss`'s analytic gradient against `(f(θ+ε) − f(θ−ε)) / 2ε` on
/// sampled coordinates of every tensor. Parameters without an analytic
/// gradient entry are expected to have zero numerical gradient.
pub fn gradient_check<P, F>(
    mut loss: F,
    params: &mut P,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    P: Parameters<f64>,
    F: FnMut(&P) -> Result<(f64, GradMap<f64>)>,
{
    let (_, analytic) = loss(params)?;
    let mut shapes: Vec<(String, usize)> = Vec::new();
    params.visit(&mut |n, a: &Array2<f64>| shapes.push((n.to_string(), a.len())));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: opts.tolerance,
        passed: true,
    };
    for (name, len) in shapes {
        let picks: Vec<usize> = if len <= opts.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, opts.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for idx in picks {
            nudge(params, &name, idx, opts.epsilon);
            let plus = loss(params)?.0;
            nudge(params, &name, idx, -2.0 * opts.epsilon);
            let minus = loss(params)?.0;
            nudge(params, &name, idx, opts.epsilon);
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic
                .get(&name)
                .map(|g| g.as_slice().expect("standard layout")[idx])
                .unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::collections::BTreeMap;

    #[test]
    fn quadratic() {
        let mut p: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        p.insert("x".into(), array![[3.0]]);
        let f = |p: &BTreeMap<String, Array2<f64>>| {
            let x = p["x"][[0, 0]];
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), array![[2.0 * x]]);
            Ok((x * x, g))
        };
        let r = gradient_check(f, &mut p, &GradCheckOptions::default()).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-6);
        let x = 3.0f64;
        let fd = ((x + 1e-5f64).powi(2) - (x - 1e-5f64).powi(2)) / 2e-5;
        assert!((fd - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut p: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        p.insert("w".into(), array![[1.0, -2.0], [0.5, 4.0]]);
        let r = gradient_check(
            |_| Ok((7.0, BTreeMap::new())),
            &mut p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn wrong_gradient_fails() {
        let mut p: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        p.insert("x".into(), array![[3.0]]);
        let f = |p: &BTreeMap<String, Array2<f64>>| {
            let x = p["x"][[0, 0]];
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), array![[x]]);
            Ok((x * x, g))
        };
        let r = gradient_check(f, &mut p, &GradCheckOptions::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst, Some(("x".to_string(), 0)));
    }
}
