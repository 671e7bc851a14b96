use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Variance floor used by layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Row-wise softmax of `logits + mask`.
///
/// Mask entries are additive: `0` keeps a position, a large negative value
/// suppresses it. With a penalty of `-1e9` suppressed entries underflow to
/// exactly zero.
pub fn softmax_masked(logits: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
    if let Some(mask) = mask {
        logits.check_same(mask, "softmax mask")?;
    }
    let mut out = logits.clone();
    if let Some(mask) = mask {
        out.add_assign(mask);
    }
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row normalization to zero mean / unit variance followed by `gain`/`shift`.
pub fn layer_norm(tokens: &Matrix, gain: &[f64], shift: &[f64]) -> Result<Matrix> {
    let d = tokens.cols();
    if d == 0 {
        return Err(Error::dim("layer_norm on zero-width rows"));
    }
    if gain.len() != d || shift.len() != d {
        return Err(Error::dim(format!(
            "layer_norm gain/shift lengths {}/{} for width {d}",
            gain.len(),
            shift.len()
        )));
    }
    let mut out = tokens.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        normalize_row(row);
        for ((v, g), s) in row.iter_mut().zip(gain).zip(shift) {
            *v = *v * g + s;
        }
    }
    Ok(out)
}

/// Normalizes `row` in place; returns `(mean, 1/sqrt(var + eps))`.
pub(crate) fn normalize_row(row: &mut [f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    (mean, inv_std)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Returns `v / ‖v‖₂`; zero vectors are returned unchanged.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_hard_mask() {
        let logits = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let p = softmax_masked(&logits, None).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);

        let mask = Matrix::from_rows(&[[0.0, -1e9]]).unwrap();
        let p = softmax_masked(&logits, Some(&mask)).unwrap();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(p.get(0, 1).abs() < 1e-9);
    }

    #[test]
    fn softmax_matches_scalar_arithmetic() {
        let logits = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let p = softmax_masked(&logits, None).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in p.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // frozen: 0.09003057317038046, 0.24472847105479767, 0.6652409557748219
        assert!((p.get(0, 2) - 0.665_240_955_774_821_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_shape_mismatch() {
        let logits = Matrix::zeros(1, 2);
        assert!(softmax_masked(&logits, Some(&Matrix::zeros(1, 3))).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let x = Matrix::from_rows(&[[5.0, 5.0, 5.0]]).unwrap();
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(y.row(0).iter().all(|v| v.abs() < 1e-12));

        // var = 1, so output = x / sqrt(1 + eps)
        let x = Matrix::from_rows(&[[1.0, -1.0]]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2]).unwrap();
        let s = 1.0 / (1.0f64 + LN_EPS).sqrt();
        assert!((y.get(0, 0) - s).abs() < 1e-12);
        assert!((y.get(0, 0) - 1.0).abs() < 1e-5);
        assert!((y.get(0, 1) + 1.0).abs() < 1e-5);

        let x = Matrix::from_rows(&[[3.0, -2.0, 7.0]]).unwrap();
        let y = layer_norm(&x, &[0.0; 3], &[0.25, 0.5, 0.75]).unwrap();
        assert_eq!(y.row(0), &[0.25, 0.5, 0.75]);

        assert!(layer_norm(&Matrix::zeros(2, 0), &[], &[]).is_err());
        assert!(layer_norm(&x, &[1.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn sigmoid_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((sigmoid(inverse_sigmoid(0.3)) - 0.3).abs() < 1e-12);
    }
}
