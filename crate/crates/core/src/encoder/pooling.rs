use ndarray::{Array2, Array3};

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate.
pub const EPS_NORM: f64 = 1e-12;

/// Mean over the positions whose mask is 1.
pub fn pool_mean<T: Real>(tokens: &Array3<T>, mask: &Array2<u8>) -> Result<Array2<T>> {
    let (b, s, d) = tokens.dim();
    if mask.dim() != (b, s) {
        return Err(Error::shape(format!(
            "mask {:?} does not match tokens {:?}",
            mask.dim(),
            (b, s)
        )));
    }
    let mut out = Array2::zeros((b, d));
    for r in 0..b {
        let n = mask.row(r).iter().filter(|&&m| m != 0).count();
        if n == 0 {
            return Err(Error::EmptySequence(r));
        }
        let w = T::one() / T::from_usize(n).unwrap();
        for c in 0..s {
            if mask[[r, c]] != 0 {
                for k in 0..d {
                    out[[r, k]] += tokens[[r, c, k]] * w;
                }
            }
        }
    }
    Ok(out)
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn l2_normalize<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if !(n.as_f64() > EPS_NORM) {
        return Err(Error::DegenerateEmbedding(n.as_f64()));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

pub fn cosine_similarity<T: Real>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity length mismatch"));
    }
    let (nu, nv) = (norm(u).as_f64(), norm(v).as_f64());
    if !(nu > EPS_NORM) {
        return Err(Error::DegenerateEmbedding(nu));
    }
    if !(nv > EPS_NORM) {
        return Err(Error::DegenerateEmbedding(nv));
    }
    let dot: f64 = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a.as_f64() * b.as_f64())
        .sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn mean_of_two_tokens() {
        let t = array![[[2.0, 0.0], [0.0, 2.0]]];
        let m = array![[1u8, 1]];
        assert_eq!(pool_mean(&t, &m).unwrap(), array![[1.0, 1.0]]);
    }

    #[test]
    fn padding_excluded() {
        let t = array![[[1.0, 0.0], [9.0, 9.0]]];
        let m = array![[1u8, 0]];
        assert_eq!(pool_mean(&t, &m).unwrap(), array![[1.0, 0.0]]);
    }

    #[test]
    fn identical_tokens_pool_to_themselves() {
        let t = array![[[0.5, -1.5], [0.5, -1.5], [0.5, -1.5]]];
        let m = array![[1u8, 1, 1]];
        assert_eq!(pool_mean(&t, &m).unwrap(), array![[0.5, -1.5]]);
    }

    #[test]
    fn empty_row_errors() {
        let t = array![[[1.0, 0.0]]];
        let m = array![[0u8]];
        assert!(matches!(pool_mean(&t, &m), Err(Error::EmptySequence(0))));
    }

    #[test]
    fn normalize_cases() {
        let v = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        let u = l2_normalize(&[0.0f64, 1.0]).unwrap();
        assert!((u[1] - 1.0).abs() < 1e-7);
        assert!(matches!(
            l2_normalize(&[0.0f64, 0.0]),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn pool_ignores_padded_values(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            junk in proptest::collection::vec(-100.0f64..100.0, 6),
        ) {
            let t = Array3::from_shape_vec((1, 4, 3), vals).unwrap();
            let m = array![[1u8, 1, 0, 0]];
            let mut t2 = t.clone();
            for (i, j) in junk.iter().enumerate() {
                t2[[0, 2 + i / 3, i % 3]] = *j;
            }
            prop_assert_eq!(pool_mean(&t, &m).unwrap(), pool_mean(&t2, &m).unwrap());
        }

        #[test]
        fn normalize_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let n: f64 = once.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
