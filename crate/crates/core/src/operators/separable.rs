//! One-dimensional factors of separable operators and their SVDs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SsdError};

/// Relative singular-value cutoff for pseudo-inverses.
pub const RCOND: f64 = 1e-10;

/// Cubic B-spline kernel with support `[-2, 2]`.
pub fn bicubic_weight(t: f64) -> f64 {
    let a = t.abs();
    if a <= 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// A dense 1-D operator `A` (m x n) with its thin SVD `A = U diag(s) V^T`.
#[derive(Debug, Clone)]
pub struct AxisSvd {
    matrix: DMatrix<f64>,
    u: DMatrix<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
}

impl AxisSvd {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(SsdError::NonFinite("operator matrix"));
        }
        let svd = matrix.clone().svd(true, true);
        let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
            return Err(SsdError::invalid("SVD did not converge"));
        };
        Ok(Self {
            matrix,
            u,
            s: svd.singular_values,
            v: v_t.transpose(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn max_singular(&self) -> f64 {
        self.s.iter().cloned().fold(0.0, f64::max)
    }
}

/// Pseudo-inverse of `A_h (.) A_w^T` applied to `y`, with the cutoff applied
/// to the products of the two spectra.
pub(crate) fn kron_pinv(h: &AxisSvd, w: &AxisSvd, y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut core = h.u.transpose() * y * &w.u;
    let cutoff = RCOND * h.max_singular() * w.max_singular();
    for i in 0..core.nrows() {
        for j in 0..core.ncols() {
            let p = h.s[i] * w.s[j];
            core[(i, j)] = if p > cutoff { core[(i, j)] / p } else { 0.0 };
        }
    }
    &h.v * core * w.v.transpose()
}

/// Circular bicubic downsampling by an integer factor.
pub fn bicubic_downsample_matrix(n: usize, scale: usize) -> Result<DMatrix<f64>> {
    check_scale(n, scale)?;
    let m = n / scale;
    let s = scale as f64;
    let mut a = DMatrix::zeros(m, n);
    for i in 0..m {
        let c = (i as f64 + 0.5) * s - 0.5;
        let lo = (c - 2.0 * s).floor() as i64;
        let hi = (c + 2.0 * s).ceil() as i64;
        for j in lo..=hi {
            let col = j.rem_euclid(n as i64) as usize;
            a[(i, col)] += bicubic_weight((j as f64 - c) / s);
        }
        let total: f64 = a.row(i).sum();
        a.row_mut(i).scale_mut(1.0 / total);
    }
    Ok(a)
}

/// Block averaging by an integer factor.
pub fn average_downsample_matrix(n: usize, scale: usize) -> Result<DMatrix<f64>> {
    check_scale(n, scale)?;
    let m = n / scale;
    let mut a = DMatrix::zeros(m, n);
    for i in 0..m {
        for j in i * scale..(i + 1) * scale {
            a[(i, j)] = 1.0 / scale as f64;
        }
    }
    Ok(a)
}

/// Normalized 1-D Gaussian taps of odd length `ksize`.
pub fn gaussian_taps(sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    if ksize.is_multiple_of(2) {
        return Err(SsdError::invalid(format!("kernel size {ksize} must be odd")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SsdError::invalid(format!("blur sigma {sigma} must be positive")));
    }
    let r = (ksize / 2) as f64;
    let taps: Vec<f64> = (0..ksize)
        .map(|k| {
            let d = k as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|v| v / total).collect())
}

/// Circulant convolution matrix for `taps` centred on each output sample.
pub fn circular_conv_matrix(n: usize, taps: &[f64]) -> DMatrix<f64> {
    let r = (taps.len() / 2) as i64;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for (k, &w) in taps.iter().enumerate() {
            let j = (i as i64 + k as i64 - r).rem_euclid(n as i64) as usize;
            a[(i, j)] += w;
        }
    }
    a
}

fn check_scale(n: usize, scale: usize) -> Result<()> {
    if scale == 0 || !n.is_multiple_of(scale) {
        return Err(SsdError::invalid(format!(
            "scale {scale} does not divide dimension {n}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bspline_values() {
        assert!((bicubic_weight(0.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((bicubic_weight(1.0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(bicubic_weight(2.0), 0.0);
        assert_eq!(bicubic_weight(-3.5), 0.0);
    }

    #[test]
    fn partition_of_unity() {
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let sum: f64 = (-3..=3).map(|k| bicubic_weight(t - k as f64)).sum();
            assert!((sum - 1.0).abs() < 1e-14, "t={t}: {sum}");
        }
    }

    #[test]
    fn downsample_rows_sum_to_one() {
        for scale in [2, 4, 8] {
            let a = bicubic_downsample_matrix(16, scale).unwrap();
            for i in 0..a.nrows() {
                assert!((a.row(i).sum() - 1.0).abs() < 1e-14);
            }
        }
        assert!(bicubic_downsample_matrix(10, 4).is_err());
    }

    #[test]
    fn svd_reconstructs() {
        let a = bicubic_downsample_matrix(12, 3).unwrap();
        let f = AxisSvd::new(a.clone()).unwrap();
        let rebuilt = f.u() * DMatrix::from_diagonal(f.singular_values()) * f.v().transpose();
        assert!((rebuilt - a).abs().max() < 1e-12);
    }

    #[test]
    fn gaussian_taps_normalized() {
        let taps = gaussian_taps(15.0, 9).unwrap();
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((taps[0] - taps[8]).abs() < 1e-17);
        assert!(gaussian_taps(1.0, 4).is_err());
        assert!(gaussian_taps(0.0, 5).is_err());
    }
}
