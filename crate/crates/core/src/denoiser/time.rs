//! Sinusoidal step embedding and its shift operator.

use crate::error::{domain, Result};

fn frequency(j: usize, dim: usize) -> f64 {
    1.0 / 10000f64.powf(2.0 * j as f64 / dim as f64)
}

fn check_even(dim: usize) -> Result<()> {
    if dim == 0 || dim % 2 != 0 {
        return Err(domain(format!("embedding dimension must be even and positive, got {dim}")));
    }
    Ok(())
}

/// `[sin(w_0 t), cos(w_0 t), …, sin(w_{d/2-1} t), cos(w_{d/2-1} t)]` with
/// `w_j = 10000^{-2j/d}`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    check_even(dim)?;
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let (s, c) = (frequency(j, dim) * t).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Block-diagonal rotation `M` (row-major `dim × dim`) with
/// `time_embedding(t + dt) = M · time_embedding(t)`.
pub fn time_shift_matrix(dt: f64, dim: usize) -> Result<Vec<f64>> {
    check_even(dim)?;
    let mut m = vec![0.0; dim * dim];
    for j in 0..dim / 2 {
        let (s, c) = (frequency(j, dim) * dt).sin_cos();
        let r = 2 * j;
        // sin(a+b) = sin a cos b + cos a sin b; cos(a+b) = cos a cos b - sin a sin b
        m[r * dim + r] = c;
        m[r * dim + r + 1] = s;
        m[(r + 1) * dim + r] = -s;
        m[(r + 1) * dim + r + 1] = c;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn apply(m: &[f64], v: &[f64]) -> Vec<f64> {
        let n = v.len();
        (0..n).map(|r| (0..n).map(|c| m[r * n + c] * v[c]).sum()).collect()
    }

    #[test]
    fn examples() {
        let e = time_embedding(0.0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = time_embedding(1.7, 2).unwrap();
        assert_eq!(e, vec![1.7f64.sin(), 1.7f64.cos()]);
        assert!(time_embedding(1.0, 3).is_err());
        let m = time_shift_matrix(0.0, 6).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(m[r * 6 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    proptest! {
        #[test]
        fn pairs_lie_on_the_unit_circle(t in 0.0f64..1000.0) {
            let e = time_embedding(t, 64).unwrap();
            for p in e.chunks(2) {
                prop_assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn shift_matrix_rotates(t in 0.0f64..1000.0, dt in -200.0f64..200.0) {
            let m = time_shift_matrix(dt, 32).unwrap();
            let got = apply(&m, &time_embedding(t, 32).unwrap());
            let want = time_embedding(t + dt, 32).unwrap();
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn shifts_compose(a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let n = 16;
            let (ma, mb, mab) = (
                time_shift_matrix(a, n).unwrap(),
                time_shift_matrix(b, n).unwrap(),
                time_shift_matrix(a + b, n).unwrap(),
            );
            for r in 0..n {
                for c in 0..n {
                    let v: f64 = (0..n).map(|k| ma[r * n + k] * mb[k * n + c]).sum();
                    prop_assert!((v - mab[r * n + c]).abs() <= 1e-9);
                }
            }
        }
    }
}
