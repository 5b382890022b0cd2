//! Channel-wise input normalization: Gaussian smoothing, standardization and
//! contrast stretching, applied to every channel independently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub kernel_size: usize,
    pub gaussian_mean: f64,
    pub gaussian_variance: f64,
    pub output_range: [f64; 2],
    pub zero_variance_epsilon: f64,
    /// Divide by the standard deviation instead of the variance.
    pub divide_by_std: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            kernel_size: 5,
            gaussian_mean: 0.0,
            gaussian_variance: 1.0,
            output_range: [-0.5, 0.5],
            zero_variance_epsilon: 1e-8,
            divide_by_std: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "smoothing kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.gaussian_variance <= 0.0 || self.zero_variance_epsilon <= 0.0 {
            return Err(Error::InvalidConfig(
                "gaussian variance and epsilon must be positive".into(),
            ));
        }
        if self.output_range[0] >= self.output_range[1] {
            return Err(Error::InvalidConfig(format!(
                "empty output range {:?}",
                self.output_range
            )));
        }
        Ok(())
    }
}

/// Square smoothing kernel sampled from the 2-D Gaussian density at integer
/// offsets and normalized to unit sum. Row-major, `kernel_size²` weights.
pub fn gaussian_kernel(cfg: &PreprocessConfig) -> Vec<f64> {
    let k = cfg.kernel_size;
    let r = (k / 2) as f64;
    let mut weights = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            let dy = y as f64 - r - cfg.gaussian_mean;
            let dx = x as f64 - r - cfg.gaussian_mean;
            weights.push((-(dx * dx + dy * dy) / (2.0 * cfg.gaussian_variance)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

fn dims2(channel: &Tensor<f64>) -> Result<(usize, usize)> {
    match channel.shape() {
        &[h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::invalid(
            "preprocess",
            format!("expected a non-empty [H, W] channel, got {s:?}"),
        )),
    }
}

/// Convolve one `[H, W]` channel with the normalized Gaussian kernel,
/// replicating edge pixels beyond the border.
pub fn gaussian_smooth(channel: &Tensor<f64>, cfg: &PreprocessConfig) -> Result<Tensor<f64>> {
    let (h, w) = dims2(channel)?;
    let k = cfg.kernel_size;
    let r = (k / 2) as isize;
    let kernel = gaussian_kernel(cfg);
    let src = channel.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..k {
                let sy = clamp(y as isize + ky as isize - r, h);
                for kx in 0..k {
                    let sx = clamp(x as isize + kx as isize - r, w);
                    acc += kernel[ky * k + kx] * src[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Subtract the mean and divide by the (population) variance, or by the
/// standard deviation when `divide_by_std` is set.
pub fn standardize(channel: &Tensor<f64>, cfg: &PreprocessConfig) -> Result<Tensor<f64>> {
    dims2(channel)?;
    let n = channel.numel() as f64;
    let mean = channel.sum() / n;
    let var = channel.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = if cfg.divide_by_std {
        var.sqrt() + cfg.zero_variance_epsilon
    } else {
        var + cfg.zero_variance_epsilon
    };
    Ok(channel.map(|v| (v - mean) / denom))
}

/// Affine map of `[min, max]` onto the output range; constant channels map
/// to the midpoint of the range (zero for the default `[-0.5, 0.5]`).
pub fn contrast_stretch(channel: &Tensor<f64>, cfg: &PreprocessConfig) -> Result<Tensor<f64>> {
    dims2(channel)?;
    let [lo, hi] = cfg.output_range;
    let (min, max) = channel
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = max - min;
    if span <= 0.0 || !span.is_finite() {
        let mid = 0.5 * (lo + hi);
        return Ok(channel.map(|_| mid));
    }
    Ok(channel.map(|v| ((v - min) / span) * (hi - lo) + lo))
}

/// Smooth, standardize and stretch each channel of a `[C, H, W]` image.
pub fn preprocess_image(image: &Tensor<f64>, cfg: &PreprocessConfig) -> Result<Tensor<f64>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::invalid(
                "preprocess_image",
                format!("expected [C, H, W], got {s:?}"),
            ))
        }
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(image.numel());
    for ci in 0..c {
        let channel = Tensor::new(vec![h, w], image.data()[ci * plane..(ci + 1) * plane].to_vec())?;
        let smoothed = gaussian_smooth(&channel, cfg)?;
        let standardized = standardize(&smoothed, cfg)?;
        out.extend(contrast_stretch(&standardized, cfg)?.into_data());
    }
    Tensor::new(vec![c, h, w], out)
}
