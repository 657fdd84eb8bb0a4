//! Row-wise numeric kernels shared by the runtime and the graph interpreter.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `x / sqrt(mean(x²) + eps) * gain`, applied to every row.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let e = x.cols();
    if gain.numel() != e {
        return Err(Error::dim(format!(
            "rms_norm: gain has {} values, rows have {e}",
            gain.numel()
        )));
    }
    let mut out = x.clone();
    let g = gain.data();
    for row in out.data_mut().chunks_mut(e) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / e as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, gv) in row.iter_mut().zip(g) {
            *v = *v * inv * gv;
        }
    }
    Ok(out)
}

/// Rotary embedding over interleaved pairs `(2j, 2j+1)` of each `head_dim`
/// chunk in a row. The rotation angle for pair `j` at position `p` is
/// `p · theta^(-2j/head_dim)`. `x` may hold several heads side by side.
pub fn apply_rope(x: &Tensor, positions: &[usize], head_dim: usize, theta: f32) -> Result<Tensor> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!("RoPE needs even head_dim, got {head_dim}")));
    }
    let cols = x.cols();
    let rows = x.numel() / cols.max(1);
    if !cols.is_multiple_of(head_dim) {
        return Err(Error::dim(format!("rope: {cols} columns not a multiple of head_dim {head_dim}")));
    }
    if positions.len() != rows && !rows.is_multiple_of(positions.len().max(1)) {
        return Err(Error::dim(format!(
            "rope: {} positions for {rows} rows",
            positions.len()
        )));
    }
    let mut out = x.clone();
    let table = rope_table(positions, head_dim, theta);
    let half = head_dim / 2;
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        let p = r % positions.len();
        let (cos, sin) = &table[p];
        for head in row.chunks_mut(head_dim) {
            for j in 0..half {
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = a * cos[j] - b * sin[j];
                head[2 * j + 1] = a * sin[j] + b * cos[j];
            }
        }
    }
    Ok(out)
}

fn rope_table(positions: &[usize], head_dim: usize, theta: f32) -> Vec<(Vec<f32>, Vec<f32>)> {
    positions
        .iter()
        .map(|&p| {
            (0..head_dim / 2)
                .map(|j| {
                    let freq = (theta as f64).powf(-2.0 * j as f64 / head_dim as f64);
                    let angle = p as f64 * freq;
                    (angle.cos() as f32, angle.sin() as f32)
                })
                .unzip()
        })
        .collect()
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_norm_zero_row() {
        let x = Tensor::zeros(&[1, 4]);
        let y = rms_norm(&x, &Tensor::filled(&[4], 1.0), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_hand_value() {
        // mean(9, 16) = 12.5
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = rms_norm(&x, &Tensor::filled(&[2], 1.0), 0.0).unwrap();
        let d = 12.5f32.sqrt();
        assert!((y.at(0, 0) - 3.0 / d).abs() < 1e-6);
        assert!((y.at(0, 1) - 4.0 / d).abs() < 1e-6);
        assert!((y.at(0, 0) - 0.8485).abs() < 1e-4);
        assert!((y.at(0, 1) - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rms_norm_zero_gain() {
        let x = Tensor::from_rows(&[vec![1.0, -7.0, 2.5]]).unwrap();
        let y = rms_norm(&x, &Tensor::zeros(&[3]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_gain_mismatch() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            rms_norm(&x, &Tensor::zeros(&[2]), 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.5]]).unwrap();
        let y = apply_rope(&x, &[0], 4, 10000.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_closed_form() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = apply_rope(&x, &[1], 2, 10000.0).unwrap();
        assert!((y.at(0, 0) - 1f32.cos()).abs() < 1e-7);
        assert!((y.at(0, 1) - 1f32.sin()).abs() < 1e-7);
    }

    #[test]
    fn rope_odd_head_dim() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(apply_rope(&x, &[0], 3, 1e4), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1e9, 0.0]]).unwrap();
        let p = softmax_rows(&x);
        assert!((p.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(p.at(1, 1), 0.0);
        assert_eq!(p.at(1, 0), 0.5);
    }
}
