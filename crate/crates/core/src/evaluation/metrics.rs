//! PSNR, SSIM, NRMSE, CR and COV over whole images or masked regions.

use crate::error::{Error, Result};
use crate::image::Image;

/// Binary region of interest (e.g. lesion or background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl RegionMask {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn values<'a>(&'a self, image: &'a Image) -> Result<impl Iterator<Item = f64> + 'a> {
        if image.dims() != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "region {:?} vs image {:?}",
                (self.height, self.width),
                image.dims()
            )));
        }
        if self.count() == 0 {
            return Err(Error::Metric("empty region".into()));
        }
        Ok(image
            .data()
            .iter()
            .zip(&self.bits)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| v))
    }
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyImage);
    }
    x.ensure_same_dims(y)
}

fn mse(x: &Image, y: &Image) -> f64 {
    x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64
}

/// `20·log10(max(y) / RMSE)` in dB; `+inf` when `x == y`.
pub fn psnr(x: &Image, y_reference: &Image) -> Result<f64> {
    check_pair(x, y_reference)?;
    let mse = mse(x, y_reference);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (y_reference.max() / mse.sqrt()).log10())
}

/// Single-window SSIM over global statistics (population moments).
pub fn ssim(x: &Image, y: &Image, c1: f64, c2: f64) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.data().iter().sum::<f64>() / n;
    let my = y.data().iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
    let den = (mx * mx + my * my + c1) * (vx + vy + c2);
    if den == 0.0 {
        return Err(Error::Metric("SSIM denominator is zero".into()));
    }
    Ok(num / den)
}

/// Stabilizers `((0.01·R)², (0.03·R)²)` for dynamic range `R`.
pub fn ssim_constants(range: f64) -> (f64, f64) {
    ((0.01 * range).powi(2), (0.03 * range).powi(2))
}

/// SSIM with `R` taken from the reference's dynamic range (1 when it is flat).
pub fn ssim_default(x: &Image, y: &Image) -> Result<f64> {
    check_pair(x, y)?;
    let range = y.max() - y.min();
    let range = if range > 0.0 { range } else { 1.0 };
    let (c1, c2) = ssim_constants(range);
    ssim(x, y, c1, c2)
}

/// RMSE normalized by the reference's range.
pub fn nrmse(x: &Image, y: &Image) -> Result<f64> {
    check_pair(x, y)?;
    let range = y.max() - y.min();
    if !(range > 0.0) {
        return Err(Error::Metric("NRMSE reference has zero range".into()));
    }
    Ok(mse(x, y).sqrt() / range)
}

/// Max over `region_a` divided by the mean over `region_b`.
pub fn cr(image: &Image, region_a: &RegionMask, region_b: &RegionMask) -> Result<f64> {
    let max = region_a.values(image)?.fold(f64::NEG_INFINITY, f64::max);
    let mean = region_b.values(image)?.sum::<f64>() / region_b.count() as f64;
    if mean == 0.0 {
        return Err(Error::Metric("CR denominator region has zero mean".into()));
    }
    Ok(max / mean)
}

/// Population standard deviation over mean within `region`.
pub fn cov(image: &Image, region: &RegionMask) -> Result<f64> {
    let n = region.count() as f64;
    let mean = region.values(image)?.sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::Metric("COV region has zero mean".into()));
    }
    let var = region
        .values(image)?
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(var.sqrt() / mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: &[f64]) -> Image {
        Image::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let y = img(&[0.0, 2.0]);
        assert_eq!(psnr(&y, &y).unwrap(), f64::INFINITY);
        let p = psnr(&img(&[0.0, 0.0]), &y).unwrap();
        assert!((p - 10.0 * 2f64.log10()).abs() < 1e-12);
        assert!(matches!(
            psnr(&Image::zeros(0, 0), &Image::zeros(0, 0)),
            Err(Error::EmptyImage)
        ));
    }

    #[test]
    fn ssim_examples() {
        let x = img(&[0.1, 0.7, 0.3, 0.9]);
        assert!((ssim_default(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let c = img(&[0.4; 4]);
        assert!((ssim_default(&c, &c).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nrmse_examples() {
        let y = img(&[0.0, 1.0]);
        assert_eq!(nrmse(&y, &y).unwrap(), 0.0);
        assert!((nrmse(&img(&[0.5, 1.5]), &y).unwrap() - 0.5).abs() < 1e-15);
        assert!(nrmse(&y, &img(&[3.0, 3.0])).is_err());
    }

    #[test]
    fn cr_and_cov_examples() {
        let image = img(&[6.0, 1.0, 3.0, 2.0]);
        let a = RegionMask::from_fn(1, 4, |_, x| x == 0);
        let b = RegionMask::from_fn(1, 4, |_, x| x > 0);
        assert_eq!(cr(&image, &a, &b).unwrap(), 3.0);
        let flat = img(&[5.0; 4]);
        let all = RegionMask::from_fn(1, 4, |_, _| true);
        assert_eq!(cr(&flat, &all, &all).unwrap(), 1.0);
        assert_eq!(cov(&flat, &all).unwrap(), 0.0);
        let two = img(&[1.0, 3.0]);
        assert_eq!(
            cov(&two, &RegionMask::from_fn(1, 2, |_, _| true)).unwrap(),
            0.5
        );
        let empty = RegionMask::from_fn(1, 4, |_, _| false);
        assert!(cov(&image, &empty).is_err());
        assert!(cr(
            &img(&[1.0, 0.0]),
            &RegionMask::from_fn(1, 2, |_, x| x == 0),
            &RegionMask::from_fn(1, 2, |_, x| x == 1)
        )
        .is_err());
    }
}
