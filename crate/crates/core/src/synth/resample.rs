//! Integer-factor image downsampling.
//!
//! Bicubic uses the Catmull-Rom kernel (a = −0.5) stretched by the factor,
//! so it also acts as the anti-aliasing filter; samples outside the image
//! are clamped to the nearest edge pixel. Area averages each factor×factor
//! block.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Bicubic,
    Area,
}

impl std::str::FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(Kernel::Bicubic),
            "area" => Ok(Kernel::Area),
            _ => Err(Error::Config(format!(
                "unknown kernel {s:?} (bicubic|area)"
            ))),
        }
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Kernel::Bicubic => "bicubic",
            Kernel::Area => "area",
        })
    }
}

pub const CUBIC_A: f64 = -0.5;

pub fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Sparse resampling matrix for one axis: for each output index, a list of
/// (input index, weight) with weights summing to 1.
fn axis_weights(n_in: usize, factor: usize, kernel: Kernel) -> Vec<Vec<(usize, f64)>> {
    let n_out = n_in / factor;
    let f = factor as f64;
    (0..n_out)
        .map(|o| match kernel {
            Kernel::Area => (o * factor..(o + 1) * factor)
                .map(|i| (i, 1.0 / f))
                .collect(),
            Kernel::Bicubic => {
                let center = (o as f64 + 0.5) * f - 0.5;
                let lo = (center - 2.0 * f).floor() as i64;
                let hi = (center + 2.0 * f).ceil() as i64;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                let mut total = 0.0;
                for i in lo..=hi {
                    let w = cubic((i as f64 - center) / f);
                    if w == 0.0 {
                        continue;
                    }
                    total += w;
                    let idx = i.clamp(0, n_in as i64 - 1) as usize;
                    match taps.iter_mut().find(|t| t.0 == idx) {
                        Some(t) => t.1 += w,
                        None => taps.push((idx, w)),
                    }
                }
                taps.iter_mut().for_each(|t| t.1 /= total);
                taps
            }
        })
        .collect()
}

/// Downsamples the last two axes of `img` by `factor` and clamps to [0, 1].
pub fn downsample(img: &Tensor, factor: usize, kernel: Kernel) -> Result<Tensor> {
    let shape = img.shape();
    if shape.len() < 2 {
        return dim_err(format!("image needs at least 2 axes, got {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "factor {factor} does not divide image size {h}×{w}"
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let wy = axis_weights(h, factor, kernel);
    let wx = axis_weights(w, factor, kernel);
    let planes = img.len() / (h * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut tmp = vec![0.0; h * ow];
    for plane in img.data().chunks(h * w) {
        for y in 0..h {
            for (x, taps) in wx.iter().enumerate() {
                tmp[y * ow + x] = taps.iter().map(|&(i, wt)| plane[y * w + i] * wt).sum();
            }
        }
        for taps in &wy {
            for x in 0..ow {
                let v: f64 = taps.iter().map(|&(i, wt)| tmp[i * ow + x] * wt).sum();
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = oh;
    out_shape[n - 1] = ow;
    Tensor::new(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent resampler: a direct 2-D weighted sum over every input
    /// pixel, with the kernel evaluated per (output, input) pair.
    fn direct_bicubic(img: &[f64], n: usize, factor: usize) -> Vec<f64> {
        let m = n / factor;
        let f = factor as f64;
        let mut out = vec![0.0; m * m];
        for oy in 0..m {
            for ox in 0..m {
                let cy = (oy as f64 + 0.5) * f - 0.5;
                let cx = (ox as f64 + 0.5) * f - 0.5;
                let (mut acc, mut norm) = (0.0, 0.0);
                for sy in -(4 * factor as i64)..(n as i64 + 4 * factor as i64) {
                    for sx in -(4 * factor as i64)..(n as i64 + 4 * factor as i64) {
                        let k = cubic((sy as f64 - cy) / f) * cubic((sx as f64 - cx) / f);
                        let iy = sy.clamp(0, n as i64 - 1) as usize;
                        let ix = sx.clamp(0, n as i64 - 1) as usize;
                        acc += k * img[iy * n + ix];
                        norm += k;
                    }
                }
                out[oy * m + ox] = (acc / norm).clamp(0.0, 1.0);
            }
        }
        out
    }

    #[test]
    fn constant_image_stays_constant() {
        for kernel in [Kernel::Bicubic, Kernel::Area] {
            let img = Tensor::full(&[1, 32, 32], 0.37);
            let lr = downsample(&img, 4, kernel).unwrap();
            assert_eq!(lr.shape(), &[1, 8, 8]);
            assert!(lr.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let img = Tensor::new(vec![4, 4], (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
        assert_eq!(downsample(&img, 1, Kernel::Bicubic).unwrap(), img);
    }

    #[test]
    fn checkerboard_matches_direct_oracle() {
        let n = 32;
        let img: Vec<f64> = (0..n * n).map(|k| ((k / n + k % n) % 2) as f64).collect();
        let lr = downsample(
            &Tensor::new(vec![n, n], img.clone()).unwrap(),
            4,
            Kernel::Bicubic,
        )
        .unwrap();
        let oracle = direct_bicubic(&img, n, 4);
        for (a, b) in lr.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
        let ramp: Vec<f64> = (0..n * n)
            .map(|k| ((k % n) as f64 / n as f64).powi(2))
            .collect();
        let lr = downsample(
            &Tensor::new(vec![n, n], ramp.clone()).unwrap(),
            4,
            Kernel::Bicubic,
        )
        .unwrap();
        for (a, b) in lr.data().iter().zip(&direct_bicubic(&ramp, n, 4)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn area_averages_blocks() {
        let img = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(downsample(&img, 2, Kernel::Area).unwrap().data(), &[0.5]);
    }

    #[test]
    fn non_divisible_factor_is_rejected() {
        assert!(downsample(&Tensor::zeros(&[1, 30, 30]), 4, Kernel::Area).is_err());
    }
}
