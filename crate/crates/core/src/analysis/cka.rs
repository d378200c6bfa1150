//! Linear centered kernel alignment between feature sets.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::resize::bilinear_resize;
use crate::tensor::Tensor;

/// Column-centered copy of an `[N, D]` matrix, or a degenerate error when
/// every row is (numerically) the same.
fn centered(m: &Tensor, which: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    let (n, d) = m.matrix("linear_cka")?;
    if n < 2 {
        return Err(Error::Validation(format!("linear_cka needs N >= 2 samples, got {n}")));
    }
    let x = m.data();
    let mut out = x.to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean;
        }
    }
    let spread: f64 = out.iter().map(|v| v * v).sum();
    let scale: f64 = x.iter().map(|v| v * v).sum();
    if !(spread > 1e-24 * scale) {
        return Err(Error::Degenerate {
            op: "linear_cka",
            location: None,
            reason: format!("{which} has zero variance (all rows identical)"),
        });
    }
    Ok((n, d, out))
}

/// `A^T B` for row-major `[N, da]` and `[N, db]`.
fn cross(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; da * db];
    for i in 0..n {
        let ra = &a[i * da..(i + 1) * da];
        let rb = &b[i * db..(i + 1) * db];
        for (p, &av) in ra.iter().enumerate() {
            let row = &mut out[p * db..(p + 1) * db];
            for (q, &bv) in rb.iter().enumerate() {
                row[q] += av * bv;
            }
        }
    }
    out
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// `||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)` on column-centered inputs.
///
/// Rows are samples, columns features; the sample counts must agree.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (nx, dx, xc) = centered(x, "x")?;
    let (ny, dy, yc) = centered(y, "y")?;
    if nx != ny {
        return Err(Error::Dimension {
            op: "linear_cka",
            axis: "samples",
            expected: nx,
            got: ny,
        });
    }
    let yx = frob_sq(&cross(&yc, dy, &xc, dx, nx));
    let xx = frob_sq(&cross(&xc, dx, &xc, dx, nx)).sqrt();
    let yy = frob_sq(&cross(&yc, dy, &yc, dy, nx)).sqrt();
    Ok(yx / (xx * yy))
}

/// Pairwise CKA between two lists of layers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl CkaMatrix {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per entry.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,cka\n");
        for (i, r) in self.rows.iter().enumerate() {
            for (j, c) in self.cols.iter().enumerate() {
                s.push_str(&format!("{r},{c},{}\n", self.matrix[i][j]));
            }
        }
        s
    }
}

/// Full CKA matrix between `[C, H, W]` layers. Each `b` layer is bilinearly
/// resampled onto the grid of the `a` layer it is compared with.
pub fn cka_heatmap(layers_a: &[Tensor], layers_b: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(layers_a.len());
    for (i, a) in layers_a.iter().enumerate() {
        let (_, h, w) = a.chw("cka_heatmap")?;
        let xa = a.to_samples()?;
        let mut row = Vec::with_capacity(layers_b.len());
        for (j, b) in layers_b.iter().enumerate() {
            let yb = bilinear_resize(b, h, w)?.to_samples()?;
            let v = linear_cka(&xa, &yb).map_err(|e| match e {
                Error::Degenerate { op, reason, .. } => Error::Degenerate {
                    op,
                    location: Some(vec![i, j]),
                    reason,
                },
                other => other,
            })?;
            row.push(v);
        }
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    /// HSIC from centered N x N Gram matrices.
    fn gram_cka(x: &Tensor, y: &Tensor) -> f64 {
        let (n, dx) = x.matrix("").unwrap();
        let (_, dy) = y.matrix("").unwrap();
        let gram = |m: &Tensor, d: usize| -> Vec<f64> {
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] = (0..d).map(|c| m[i * d + c] * m[j * d + c]).sum();
                }
            }
            // H K H with H = I - 11^T / n
            let rm: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i * n + j]).sum::<f64>() / n as f64).collect();
            let cm: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i * n + j]).sum::<f64>() / n as f64).collect();
            let all = rm.iter().sum::<f64>() / n as f64;
            (0..n * n).map(|idx| k[idx] - rm[idx / n] - cm[idx % n] + all).collect()
        };
        let (k, l) = (gram(x, dx), gram(y, dy));
        let hsic = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let x = Tensor::randn(&[32, 6], &mut rng);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn invariant_to_rotation() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let x = Tensor::randn(&[40, 4], &mut rng);
        // Givens rotations compose into an orthogonal Q.
        let mut q = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        for (a, b, t) in [(0, 1, 0.3), (1, 2, 1.1), (0, 3, -0.7), (2, 3, 2.0)] {
            let (c, s) = (f64::cos(t), f64::sin(t));
            for row in q.iter_mut() {
                let (u, v) = (row[a], row[b]);
                row[a] = c * u - s * v;
                row[b] = s * u + c * v;
            }
        }
        let xq = Tensor::from_fn(&[40, 4], |i| {
            let (r, c) = (i / 4, i % 4);
            (0..4).map(|k| x[r * 4 + k] * q[k][c]).sum()
        });
        assert!((linear_cka(&x, &xq).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn matches_gram_hsic_oracle() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..3 {
            let x = Tensor::randn(&[64, 8], &mut rng);
            let y = Tensor::randn(&[64, 8], &mut rng);
            let v = linear_cka(&x, &y).unwrap();
            assert!((v - gram_cka(&x, &y)).abs() < 1e-10);
            assert!((v - linear_cka(&y, &x).unwrap()).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let x = Tensor::from_fn(&[5, 3], |i| (i % 3) as f64 + 0.1);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let y = Tensor::randn(&[5, 2], &mut rng);
        assert!(matches!(linear_cka(&x, &y), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn heatmap_diagonal_and_errors_carry_indices() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let layers: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 5, 5], &mut rng)).collect();
        let m = cka_heatmap(&layers, &layers).unwrap();
        for i in 0..3 {
            assert!((m[i][i] - 1.0).abs() < 1e-10);
            for j in 0..3 {
                assert!((m[i][j] - m[j][i]).abs() < 1e-12);
            }
        }
        let bad = vec![layers[0].clone(), Tensor::full(&[4, 5, 5], 2.0)];
        match cka_heatmap(&layers[..1], &bad) {
            Err(Error::Degenerate { location, .. }) => assert_eq!(location, Some(vec![0, 1])),
            other => panic!("{other:?}"),
        }
    }
}
