//! Image-level boundary metrics and threshold aggregation.

mod aggregate;
mod profile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use aggregate::{
    aggregate_thresholds, read_records_csv, records_to_csv, AggregateRow, AggregateTable, ThresholdRecord,
    PUBLISHED_SUBJECT_FIXTURE, PUBLISHED_THRESHOLD_TABLE,
};
pub use profile::{boundary_profile, ProfileRow, ProfileThreshold, PROFILE_AXES};

/// Rec. 709 luma weights.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Single-channel image without a range restriction, so signed difference
/// images fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

pub fn to_grayscale(image: &ImageTensor) -> GrayImage {
    let (h, w, c) = image.shape();
    let data = if c == 1 {
        image.data().to_vec()
    } else {
        image
            .data()
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()
    };
    GrayImage { height: h, width: w, data }
}

/// `gray(perturbed) − gray(reference)`.
pub fn difference_image(perturbed: &ImageTensor, reference: &ImageTensor) -> Result<GrayImage> {
    if perturbed.shape() != reference.shape() {
        return Err(Error::dim(format!("{:?}", reference.shape()), format!("{:?}", perturbed.shape())));
    }
    let a = to_grayscale(perturbed);
    let b = to_grayscale(reference);
    let data = a.data.iter().zip(&b.data).map(|(p, r)| p - r).collect();
    GrayImage::new(a.height, a.width, data)
}

/// Root-mean-square deviation from the mean (population variance).
pub fn rms_contrast(image: &GrayImage) -> Result<f64> {
    if image.data.is_empty() {
        return Err(Error::Image("rms contrast of an empty image".into()));
    }
    let n = image.data.len() as f64;
    let mean = image.data.iter().sum::<f64>() / n;
    Ok((image.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Local SSIM at every valid window position, row-major
/// `(h − win + 1) × (w − win + 1)`.
pub fn ssim_map(a: &GrayImage, b: &GrayImage, cfg: &SsimConfig) -> Result<GrayImage> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::dim(format!("{}x{}", a.height, a.width), format!("{}x{}", b.height, b.width)));
    }
    let win = cfg.window;
    if win == 0 || a.height < win || a.width < win {
        return Err(Error::Image(format!(
            "image {}x{} smaller than the {win}x{win} SSIM window",
            a.height, a.width
        )));
    }
    let k = cfg.kernel();
    let (h, w) = (a.height, a.width);
    let products: [Vec<f64>; 5] = [
        a.data.clone(),
        b.data.clone(),
        a.data.iter().map(|v| v * v).collect(),
        b.data.iter().map(|v| v * v).collect(),
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    ];
    let (oh, ow) = (h - win + 1, w - win + 1);
    let filtered: Vec<Vec<f64>> = products
        .iter()
        .map(|src| {
            let mut rows = vec![0.0; h * ow];
            for y in 0..h {
                for x in 0..ow {
                    rows[y * ow + x] = (0..win).map(|i| k[i] * src[y * w + x + i]).sum();
                }
            }
            let mut out = vec![0.0; oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    out[y * ow + x] = (0..win).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
                }
            }
            out
        })
        .collect();
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let data = (0..oh * ow)
        .map(|i| {
            let (ma, mb) = (filtered[0][i], filtered[1][i]);
            let va = filtered[2][i] - ma * ma;
            let vb = filtered[3][i] - mb * mb;
            let cov = filtered[4][i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    GrayImage::new(oh, ow, data)
}

/// Mean of [`ssim_map`].
pub fn ssim(a: &GrayImage, b: &GrayImage, cfg: &SsimConfig) -> Result<f64> {
    let map = ssim_map(a, b, cfg)?;
    Ok(map.data.iter().sum::<f64>() / map.data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize) -> GrayImage {
        let data = (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect();
        GrayImage::new(n, n, data).unwrap()
    }

    #[test]
    fn checkerboard_rms_is_half() {
        assert_eq!(rms_contrast(&checkerboard(8)).unwrap(), 0.5);
        assert_eq!(rms_contrast(&GrayImage::new(3, 3, vec![0.3; 9]).unwrap()).unwrap(), 0.0);
        assert!(rms_contrast(&GrayImage::new(0, 0, vec![]).unwrap()).is_err());
    }

    #[test]
    fn white_minus_black_is_one() {
        let white = ImageTensor::filled(4, 4, 3, 1.0).unwrap();
        let black = ImageTensor::filled(4, 4, 3, 0.0).unwrap();
        let d = difference_image(&white, &black).unwrap();
        assert!(d.data.iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(difference_image(&white, &white).unwrap().data.iter().all(|v| *v == 0.0));
        let small = ImageTensor::filled(3, 4, 3, 0.0).unwrap();
        assert!(difference_image(&white, &small).is_err());
    }

    #[test]
    fn ssim_identity_and_small_images() {
        let x = checkerboard(16);
        assert!((ssim(&x, &x, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        let tiny = checkerboard(10);
        assert!(ssim(&tiny, &tiny, &SsimConfig::default()).is_err());
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = SsimConfig::default().kernel();
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(k[i], k[10 - i]);
        }
    }
}
