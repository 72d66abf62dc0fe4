//! Single-channel activity images and their file formats.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{tsr, Real, Tensor};

/// A non-negative 2-D intensity grid (tracer activity), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "{height}×{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `[H, W, 1]` feature map in the run precision.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.height, self.width, 1], &self.data).expect("dims match")
    }

    /// Accepts `[H, W]` or `[H, W, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [h, w] | [h, w, 1] => Image::new(h, w, t.to_f64_vec()),
            ref s => Err(Error::Shape(format!("not a single-channel image: {s:?}"))),
        }
    }

    pub fn save_tsr(&self, path: impl AsRef<Path>) -> Result<()> {
        let t = Tensor::<f64>::new(vec![self.height, self.width], self.data.clone())?;
        tsr::save(path.as_ref(), &t).map_err(Error::from)
    }

    pub fn load_tsr(path: impl AsRef<Path>) -> Result<Self> {
        let t = tsr::load(path.as_ref())?.into_real::<f64>();
        Image::from_tensor(&t)
    }

    /// Loads `.tsr` exactly, or a PGM rescaled to `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => {
                let pgm = Pgm::read(path)?;
                let maxval = pgm.maxval as f64;
                Image::new(
                    pgm.height,
                    pgm.width,
                    pgm.samples.iter().map(|&s| s as f64 / maxval).collect(),
                )
            }
            _ => Image::load_tsr(path),
        }
    }

    /// 16-bit PGM scaled so the image maximum maps to 65535.
    pub fn to_pgm16(&self) -> Pgm {
        let max = self.max();
        let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
        Pgm {
            width: self.width,
            height: self.height,
            maxval: 65535,
            samples: self
                .data
                .iter()
                .map(|&v| (v.max(0.0) * scale).round() as u16)
                .collect(),
        }
    }
}

/// Binary (P5) portable graymap.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    pub fn from_u8(height: usize, width: usize, samples: &[u8]) -> Self {
        Self {
            width,
            height,
            maxval: 255,
            samples: samples.iter().map(|&v| v as u16).collect(),
        }
    }

    /// Samples are one byte when `maxval < 256`, otherwise two bytes big-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        for &s in &self.samples {
            if self.maxval < 256 {
                out.push(s as u8);
            } else {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ImageFormat(m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PGM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(bad("PGM maxval out of range"));
        }
        let body = &bytes[pos + 1..];
        let n = width * height;
        let samples: Vec<u16> = if maxval < 256 {
            if body.len() < n {
                return Err(bad("truncated PGM data"));
            }
            body[..n].iter().map(|&b| b as u16).collect()
        } else {
            if body.len() < 2 * n {
                return Err(bad("truncated PGM data"));
            }
            body[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Pgm::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trips_both_depths() {
        let p8 = Pgm::from_u8(2, 3, &[0, 1, 2, 253, 254, 255]);
        assert_eq!(Pgm::decode(&p8.encode()).unwrap(), p8);
        let img = Image::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let p16 = img.to_pgm16();
        let bytes = p16.encode();
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
        // big-endian sample order
        assert_eq!(&bytes[bytes.len() - 2..], &[0xff, 0xff]);
        assert_eq!(Pgm::decode(&bytes).unwrap(), p16);
    }

    #[test]
    fn rejects_wrong_magic() {
        assert!(Pgm::decode(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn tensor_conversion_checks_channels() {
        let t = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!(Image::from_tensor(&t).is_err());
        let img = Image::from_fn(2, 3, |y, x| (y * 3 + x) as f64);
        assert_eq!(Image::from_tensor(&img.to_tensor::<f64>()).unwrap(), img);
    }
}
