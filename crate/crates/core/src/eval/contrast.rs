use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

/// 8-bit grayscale of an image with values in `[-1, 1]`: channel mean mapped
/// linearly onto `0..=255`, clamped and rounded.
pub fn to_gray_u8(image: &Array3<f32>) -> Vec<u8> {
    let gray = image.mean_axis(Axis(0)).expect("at least one channel");
    gray.iter()
        .map(|&v| ((v as f64 + 1.0) * 127.5).clamp(0.0, 255.0).round() as u8)
        .collect()
}

/// Interquartile range of the intensity distribution over the full 8-bit
/// range. Quartiles are read off the cumulative histogram with linear
/// interpolation between order statistics.
pub fn histogram_spread(pixels: &[u8]) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::Metric("histogram spread of an empty image".into()));
    }
    let mut cumulative = [0usize; 256];
    for &p in pixels {
        cumulative[p as usize] += 1;
    }
    for v in 1..256 {
        cumulative[v] += cumulative[v - 1];
    }
    // k-th order statistic (0-based): smallest v with more than k pixels <= v
    let order_stat = |k: usize| cumulative.iter().position(|&c| c > k).expect("k < n") as f64;
    let quantile = |q: f64| {
        let h = (pixels.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        let a = order_stat(lo);
        if frac == 0.0 {
            a
        } else {
            a + frac * (order_stat(lo + 1) - a)
        }
    };
    Ok((quantile(0.75) - quantile(0.25)) / 255.0)
}
