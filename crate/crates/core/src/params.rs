//! Named parameter containers shared by the encoder, adapters and heads.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, Real};
use crate::error::{Error, Result};

/// Anything that owns a set of named 2-D tensors.
///
/// Names are globally unique dotted paths (`encoder.layers.0.query.weight`),
/// so a gradient map, an optimizer state and a checkpoint can all be keyed the
/// same way.
pub trait Parameters<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    fn to_map(&self) -> BTreeMap<String, Array2<T>>
    where
        T: Clone,
    {
        let mut m = BTreeMap::new();
        self.visit(&mut |n, a| {
            m.insert(n.to_string(), a.clone());
        });
        m
    }

    /// Overwrites every tensor from `map`. Missing names or shape mismatches
    /// are errors.
    fn load_map(&mut self, map: &BTreeMap<String, Array2<T>>) -> Result<()>
    where
        T: Clone,
    {
        let mut err = None;
        self.visit_mut(&mut |n, a| {
            if err.is_some() {
                return;
            }
            match map.get(n) {
                Some(src) if src.dim() == a.dim() => a.assign(src),
                Some(src) => {
                    err = Some(Error::shape(format!(
                        "{n}: expected {:?}, found {:?}",
                        a.dim(),
                        src.dim()
                    )))
                }
                None => err = Some(Error::config(format!("missing tensor {n}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn all_finite(&self) -> bool
    where
        T: Real,
    {
        let mut ok = true;
        self.visit(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }
}

impl<T> Parameters<T> for BTreeMap<String, Array2<T>> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<T>)) {
        for (n, a) in self {
            f(n, a);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        for (n, a) in self.iter_mut() {
            f(n, a);
        }
    }
}

/// Draws from N(0, σ²) truncated to ±2σ by rejection.
pub fn truncated_normal<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    sigma: f64,
    rng: &mut R,
) -> Array2<T> {
    if sigma == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * sigma {
            return T::lit(v);
        }
    })
}

/// Affine map `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array2<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, sigma: f64, rng: &mut R) -> Self {
        Self {
            weight: truncated_normal(out_dim, in_dim, sigma, rng),
            bias: Array2::zeros((1, out_dim)),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array2::zeros((1, out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn graph(&self, g: &mut Graph<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = g.param(&format!("{prefix}.weight"), &self.weight);
        let b = g.param(&format!("{prefix}.bias"), &self.bias);
        let y = g.matmul_bt(x, w)?;
        g.add_row(y, b)
    }

    pub fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: cast_array(&self.weight),
            bias: cast_array(&self.bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Array2<T>,
    pub bias: Array2<T>,
}

impl<T: Real> LayerNormParams<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array2::ones((1, dim)),
            bias: Array2::zeros((1, dim)),
        }
    }

    pub fn cast<U: Real>(&self) -> LayerNormParams<U> {
        LayerNormParams {
            gain: cast_array(&self.gain),
            bias: cast_array(&self.bias),
        }
    }
}

pub fn cast_array<T: Real, U: Real>(a: &Array2<T>) -> Array2<U> {
    a.mapv(|v| U::lit(v.as_f64()))
}

/// A named linear head (`head.<name>`).
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub name: String,
    pub linear: Linear<T>,
}

impl<T: Real> Head<T> {
    pub fn prefix(&self) -> String {
        format!("head.{}", self.name)
    }
}

impl<T: Real> Parameters<T> for Head<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<T>)) {
        self.linear.visit_named(&self.prefix(), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        let p = self.prefix();
        self.linear.visit_named_mut(&p, f);
    }
}
