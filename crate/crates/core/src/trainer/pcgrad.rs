//! Gradient partitions and two-task PCGrad projection.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::autodiff::{GradMap, Real};
use crate::error::{Error, Result};
use crate::lora::Task;

/// Disjoint parameter groups, decided by name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Backbone,
    NerTpl,
    TcTpl,
    Heads,
}

impl Partition {
    pub fn of(name: &str) -> Partition {
        if name.starts_with("head.") {
            Partition::Heads
        } else if name.starts_with("lora.ner.") {
            Partition::NerTpl
        } else if name.starts_with("lora.tc.") {
            Partition::TcTpl
        } else {
            Partition::Backbone
        }
    }

    pub fn tpl(task: Task) -> Partition {
        match task {
            Task::Ner => Partition::NerTpl,
            Task::Tc => Partition::TcTpl,
        }
    }
}

/// Per-parameter gradients with partition bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet<T> {
    pub grads: GradMap<T>,
}

impl<T: Real> GradientSet<T> {
    pub fn new(grads: GradMap<T>) -> Self {
        Self { grads }
    }

    pub fn partition(&self, p: Partition) -> GradMap<T> {
        self.grads
            .iter()
            .filter(|(k, _)| Partition::of(k) == p)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn names_in(&self, p: Partition) -> Vec<&str> {
        self.grads
            .keys()
            .filter(|k| Partition::of(k) == p)
            .map(String::as_str)
            .collect()
    }

    /// Errors if any entry's shape differs from `shapes`.
    pub fn check_shapes(&self, shapes: &BTreeMap<String, (usize, usize)>) -> Result<()> {
        for (k, g) in &self.grads {
            match shapes.get(k) {
                Some(&s) if s == g.dim() => {}
                Some(&s) => {
                    return Err(Error::shape(format!(
                        "gradient {k} is {:?}, parameter is {s:?}",
                        g.dim()
                    )))
                }
                None => return Err(Error::shape(format!("gradient for unknown parameter {k}"))),
            }
        }
        Ok(())
    }

    /// `self += w · other`, entry by entry.
    pub fn add_scaled(&mut self, other: &GradMap<T>, w: T) {
        for (k, g) in other {
            match self.grads.get_mut(k) {
                Some(acc) => acc.scaled_add(w, g),
                None => {
                    self.grads.insert(k.clone(), g.mapv(|v| v * w));
                }
            }
        }
    }
}

/// Concatenates `names` (in order) into one vector; absent entries are zeros
/// of the given shape.
pub fn flatten<T: Real>(grads: &GradMap<T>, layout: &[(String, (usize, usize))]) -> Vec<T> {
    let mut out = Vec::with_capacity(layout.iter().map(|(_, (r, c))| r * c).sum());
    for (name, (r, c)) in layout {
        match grads.get(name) {
            Some(g) => out.extend(g.iter().copied()),
            None => out.extend(std::iter::repeat_n(T::zero(), r * c)),
        }
    }
    out
}

pub fn unflatten<T: Real>(flat: &[T], layout: &[(String, (usize, usize))]) -> GradMap<T> {
    let mut out = BTreeMap::new();
    let mut at = 0;
    for (name, (r, c)) in layout {
        let n = r * c;
        let a = Array2::from_shape_vec((*r, *c), flat[at..at + n].to_vec()).expect("layout size");
        out.insert(name.clone(), a);
        at += n;
    }
    out
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Projects each gradient off the other's raw direction when they conflict.
/// Inputs pass through untouched when `⟨g_a, g_b⟩ ≥ 0` or the counterpart
/// has zero norm.
pub fn pcgrad_project<T: Real>(g_a: &[T], g_b: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if g_a.len() != g_b.len() {
        return Err(Error::shape(format!(
            "pcgrad lengths {} vs {}",
            g_a.len(),
            g_b.len()
        )));
    }
    let d = dot(g_a, g_b);
    if d >= T::zero() {
        return Ok((g_a.to_vec(), g_b.to_vec()));
    }
    let project = |g: &[T], other: &[T]| -> Vec<T> {
        let nn = dot(other, other);
        if nn == T::zero() {
            return g.to_vec();
        }
        let c = d / nn;
        g.iter().zip(other).map(|(&x, &o)| x - c * o).collect()
    };
    Ok((project(g_a, g_b), project(g_b, g_a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let (a, b) = pcgrad_project(&[1.0, 0.0], &[-1.0, 1.0]).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
        assert_eq!(b, vec![0.0, 1.0]);
        assert_eq!(dot(&a, &[-1.0, 1.0]), 0.0);
    }

    #[test]
    fn orthogonal_unchanged() {
        let (a, b) = pcgrad_project(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!((a, b), (vec![1.0, 0.0], vec![0.0, 1.0]));
    }

    #[test]
    fn opposite_vectors_vanish() {
        let (a, b) = pcgrad_project(&[2.0, -1.0], &[-2.0, 1.0]).unwrap();
        assert!(a.iter().chain(&b).all(|v: &f64| v.abs() < 1e-15));
    }

    #[test]
    fn zero_counterpart_passes_through() {
        let (a, b) = pcgrad_project(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!((a, b), (vec![1.0, 2.0], vec![0.0, 0.0]));
    }

    #[test]
    fn partitions_by_prefix() {
        assert_eq!(
            Partition::of("encoder.layers.0.query.weight"),
            Partition::Backbone
        );
        assert_eq!(Partition::of("lora.ner.layers.1.key.a"), Partition::NerTpl);
        assert_eq!(Partition::of("lora.tc.layers.1.key.b"), Partition::TcTpl);
        assert_eq!(Partition::of("head.ner.weight"), Partition::Heads);
    }

    #[test]
    fn flatten_round_trip() {
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), array![[1.0, 2.0]]);
        let layout = vec![("x".to_string(), (1, 2)), ("y".to_string(), (2, 1))];
        let flat = flatten(&g, &layout);
        assert_eq!(flat, vec![1.0, 2.0, 0.0, 0.0]);
        let back = unflatten(&flat, &layout);
        assert_eq!(back["x"], g["x"]);
        assert_eq!(back["y"], Array2::<f64>::zeros((2, 1)));
    }

    proptest! {
        #[test]
        fn projection_removes_conflict(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let (pa, pb) = pcgrad_project(&a, &b).unwrap();
            prop_assert!(dot(&pa, &b) >= -1e-6);
            prop_assert!(dot(&pb, &a) >= -1e-6);
            if dot(&a, &b) >= 0.0 {
                prop_assert_eq!(&pa, &a);
                prop_assert_eq!(&pb, &b);
            }
        }
    }
}
