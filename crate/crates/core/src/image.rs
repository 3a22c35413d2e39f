//! Stimulus images: `height × width × channels` intensities in `[0, 1]`,
//! stored row-major with interleaved channels.

use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Image(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(height * width * channels, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`. Non-finite values
    /// map to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Rounds every intensity to the nearest 8-bit level. The result is exactly
    /// what a PNG round trip produces.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
        Self {
            data,
            ..self.clone()
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            encoder.set_color(if self.channels == 3 {
                png::ColorType::Rgb
            } else {
                png::ColorType::Grayscale
            });
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder
                .write_header()
                .map_err(|e| Error::Image(e.to_string()))?;
            let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
            writer
                .write_image_data(&bytes)
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        read_png(decoder)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_png<R: std::io::BufRead + std::io::Seek>(mut decoder: png::Decoder<R>) -> Result<ImageTensor> {
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(e.to_string()))?;
    let bytes = &buf[..info.buffer_size()];
    let (h, w) = (info.height as usize, info.width as usize);
    let to_unit = |b: u8| b as f64 / 255.0;
    let (channels, data): (usize, Vec<f64>) = match info.color_type {
        png::ColorType::Grayscale => (1, bytes.iter().map(|&b| to_unit(b)).collect()),
        png::ColorType::GrayscaleAlpha => (1, bytes.chunks(2).map(|p| to_unit(p[0])).collect()),
        png::ColorType::Rgb => (3, bytes.iter().map(|&b| to_unit(b)).collect()),
        png::ColorType::Rgba => (
            3,
            bytes.chunks(4).flat_map(|p| p[..3].iter().map(|&b| to_unit(b))).collect(),
        ),
        png::ColorType::Indexed => return Err(Error::Image("indexed PNG not expanded".into())),
    };
    ImageTensor::new(h, w, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(ImageTensor::new(1, 2, 1, vec![0.0, 1.5]).is_err());
        assert!(ImageTensor::new(1, 2, 1, vec![0.0]).is_err());
        assert!(ImageTensor::new(0, 2, 1, vec![]).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn png_round_trip_equals_quantization() {
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| (i as f64 * 0.0137) % 1.0).collect();
        let img = ImageTensor::new(4, 5, 3, data).unwrap();
        let back = ImageTensor::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
        let gray = ImageTensor::filled(3, 3, 1, 0.25).unwrap();
        let back = ImageTensor::from_png_bytes(&gray.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back, gray.quantized());
    }
}
