//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Real};
use crate::error::{Error, Result};
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    2e-5
}
fn default_wd() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Moments, step counter and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Array2<T>>,
    pub v: BTreeMap<String, Array2<T>>,
    /// Gradients skipped for containing NaN/Inf.
    pub skipped_nonfinite: u64,
}

/// What one [`OptimizerState::apply`] call touched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplyReport {
    pub updated: Vec<String>,
    pub skipped: Vec<String>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            skipped_nonfinite: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One AdamW step. Only parameters with an entry in `grads` move; the
    /// decay `θ ← θ(1 − lr·wd)` is applied before the moment update.
    pub fn apply<P: Parameters<T> + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &GradMap<T>,
    ) -> Result<ApplyReport> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let mut report = ApplyReport::default();
        let mut shape_err = None;
        let (m_all, v_all) = (&mut self.m, &mut self.v);

        params.visit_mut(&mut |name, theta| {
            let Some(g) = grads.get(name) else {
                return;
            };
            if g.dim() != theta.dim() {
                shape_err.get_or_insert_with(|| {
                    format!(
                        "gradient for {name} is {:?}, parameter is {:?}",
                        g.dim(),
                        theta.dim()
                    )
                });
                return;
            }
            if g.iter().any(|x| !x.is_finite()) {
                report.skipped.push(name.to_string());
                return;
            }
            let m = m_all
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(theta.dim()));
            let v = v_all
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(theta.dim()));
            Zip::from(theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *p *= decay;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
            report.updated.push(name.to_string());
        });
        if let Some(msg) = shape_err {
            return Err(Error::shape(msg));
        }
        self.skipped_nonfinite += report.skipped.len() as u64;
        Ok(report)
    }

    /// Flattened moments for checkpointing: `opt.m.<name>` / `opt.v.<name>`.
    pub fn moment_arrays(&self) -> BTreeMap<String, Array2<T>> {
        let mut out = BTreeMap::new();
        for (k, a) in &self.m {
            out.insert(format!("opt.m.{k}"), a.clone());
        }
        for (k, a) in &self.v {
            out.insert(format!("opt.v.{k}"), a.clone());
        }
        out
    }

    pub fn load_moments(&mut self, arrays: &BTreeMap<String, Array2<T>>) {
        self.m.clear();
        self.v.clear();
        for (k, a) in arrays {
            if let Some(n) = k.strip_prefix("opt.m.") {
                self.m.insert(n.to_string(), a.clone());
            } else if let Some(n) = k.strip_prefix("opt.v.") {
                self.v.insert(n.to_string(), a.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one(name: &str, a: Array2<f64>) -> BTreeMap<String, Array2<f64>> {
        BTreeMap::from([(name.to_string(), a)])
    }

    #[test]
    fn zero_gradient_pure_decay() {
        let mut p = one("w", array![[2.0, -4.0]]);
        let g = one("w", Array2::zeros((1, 2)));
        let mut opt = OptimizerState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        });
        opt.apply(&mut p, &g).unwrap();
        assert!((p["w"][[0, 0]] - 0.999 * 2.0).abs() < 1e-15);
        assert!((p["w"][[0, 1]] + 0.999 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut p = one("w", array![[1.0, 1.0, 1.0]]);
        let g = one("w", array![[0.3, -2.0, 5.0]]);
        let mut opt = OptimizerState::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.apply(&mut p, &g).unwrap();
        let expect = [1.0 - 0.01, 1.0 + 0.01, 1.0 - 0.01];
        for (a, b) in p["w"].iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p: BTreeMap<String, Array2<f32>> =
                BTreeMap::from([("w".to_string(), array![[0.5f32, -0.25], [1.0, 3.0]])]);
            let mut opt = OptimizerState::<f32>::new(AdamWConfig::with_lr(1e-3));
            for i in 0..5 {
                let g =
                    BTreeMap::from([("w".to_string(), array![[0.1f32, -0.2], [0.3, i as f32]])]);
                opt.apply(&mut p, &g).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        for (x, y) in a["w"].iter().zip(b["w"].iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn nonfinite_and_missing_gradients_skip() {
        let mut p = one("w", array![[1.0]]);
        p.insert("frozen".into(), array![[5.0]]);
        let g = one("w", array![[f64::NAN]]);
        let mut opt = OptimizerState::new(AdamWConfig::with_lr(0.1));
        let r = opt.apply(&mut p, &g).unwrap();
        assert_eq!(r.skipped, vec!["w".to_string()]);
        assert!(r.updated.is_empty());
        assert_eq!(opt.skipped_nonfinite, 1);
        assert_eq!(p["w"][[0, 0]], 1.0);
        assert_eq!(p["frozen"][[0, 0]], 5.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = one("w", array![[1.0, 2.0]]);
        let g = one("w", array![[1.0]]);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        assert!(opt.apply(&mut p, &g).is_err());
    }
}
