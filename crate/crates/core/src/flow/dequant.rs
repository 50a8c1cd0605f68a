//! Uniform dequantization followed by a logit transform.
//!
//! Pixel values `x ∈ {0..255}` become `y = logit(α + (1 - 2α)(x + u) / 256)`
//! with `u ~ U[0, 1)`. The returned log-determinant converts densities on
//! `y` back to densities on the dequantized pixel scale `[0, 256)`, so
//! `-(log p(y) + log_det) / (D ln 2)` is bits per dimension.

use rand::Rng;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const LOGIT_ALPHA: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct Dequantized {
    pub y: Tensor,
    /// `(N)` log|det ∂y/∂(x+u)|.
    pub log_det: Vec<f64>,
}

/// Draws fresh uniform noise and dequantizes.
pub fn dequantize<R: Rng + ?Sized>(
    pixels: &Tensor,
    alpha: f64,
    rng: &mut R,
) -> Result<Dequantized> {
    let noise = Tensor::uniform(pixels.shape().to_vec(), 0.0, 1.0, rng);
    dequantize_with_noise(pixels, &noise, alpha)
}

pub fn dequantize_with_noise(pixels: &Tensor, noise: &Tensor, alpha: f64) -> Result<Dequantized> {
    if pixels.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "dequantize",
            left: pixels.shape().to_vec(),
            right: noise.shape().to_vec(),
        });
    }
    if !(0.0..0.5).contains(&alpha) {
        return Err(Error::Domain {
            op: "dequantize",
            reason: format!("alpha must lie in [0, 0.5), got {alpha}"),
        });
    }
    let n = pixels.batch();
    let per = pixels.item_len();
    let base = (1.0 - 2.0 * alpha).ln() - 256f64.ln();
    let mut y = Vec::with_capacity(pixels.len());
    let mut log_det = vec![0.0; n];
    for (i, (&x, &u)) in pixels.data().iter().zip(noise.data()).enumerate() {
        if !(0.0..=255.0).contains(&x) || !(0.0..1.0).contains(&u) {
            return Err(Error::Domain {
                op: "dequantize",
                reason: format!("pixel {x} with noise {u} is outside [0, 256)"),
            });
        }
        let p = alpha + (1.0 - 2.0 * alpha) * (x + u) / 256.0;
        if p <= 0.0 || p >= 1.0 {
            return Err(Error::Domain {
                op: "dequantize",
                reason: "logit argument hit 0 or 1; use alpha > 0".into(),
            });
        }
        y.push(p.ln() - (-p).ln_1p());
        log_det[i / per] += base - p.ln() - (-p).ln_1p();
    }
    Ok(Dequantized {
        y: Tensor::new(pixels.shape().to_vec(), y)?,
        log_det,
    })
}

/// Maps logit-space values back to pixel intensities in `[0, 255]`.
pub fn quantize(y: &Tensor, alpha: f64) -> Tensor {
    y.map(|v| {
        let p = crate::diffmath::sigmoid(v);
        // small slack so that zero noise survives the round trip
        ((p - alpha) / (1.0 - 2.0 * alpha) * 256.0 + 1e-9)
            .floor()
            .clamp(0.0, 255.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_matches_finite_difference() {
        let alpha = LOGIT_ALPHA;
        let f = |v: f64| {
            let p = alpha + (1.0 - 2.0 * alpha) * v / 256.0;
            (p / (1.0 - p)).ln()
        };
        for &(x, u) in &[(0.0, 0.25), (128.0, 0.5), (255.0, 0.9)] {
            let px = Tensor::new(vec![1, 1], vec![x]).unwrap();
            let nz = Tensor::new(vec![1, 1], vec![u]).unwrap();
            let d = dequantize_with_noise(&px, &nz, alpha).unwrap();
            let h = 1e-4;
            let slope = (f(x + u + h) - f(x + u - h)) / (2.0 * h);
            assert!((d.log_det[0] - slope.ln()).abs() < 1e-8);
            assert!((d.y.data()[0] - f(x + u)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_det_depends_on_data() {
        let px = Tensor::new(vec![2, 1], vec![0.0, 128.0]).unwrap();
        let nz = Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap();
        let d = dequantize_with_noise(&px, &nz, LOGIT_ALPHA).unwrap();
        assert!((d.log_det[0] - d.log_det[1]).abs() > 0.1);
    }

    #[test]
    fn quantize_inverts() {
        let px = Tensor::new(vec![1, 4], vec![0.0, 17.0, 200.0, 255.0]).unwrap();
        let nz = Tensor::new(vec![1, 4], vec![0.3, 0.0, 0.99, 0.5]).unwrap();
        let d = dequantize_with_noise(&px, &nz, LOGIT_ALPHA).unwrap();
        assert_eq!(quantize(&d.y, LOGIT_ALPHA), px);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let px = Tensor::new(vec![1, 1], vec![256.0]).unwrap();
        let nz = Tensor::zeros(vec![1, 1]);
        assert!(dequantize_with_noise(&px, &nz, LOGIT_ALPHA).is_err());
    }
}
