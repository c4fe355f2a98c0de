//! 8-bit RGB images and PNG I/O.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Pixel values scaled to [0, 1], interleaved RGB.
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// Pixel values scaled to [-1, 1], interleaved RGB.
    pub fn to_signed(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 127.5 - 1.0).collect()
    }

    /// Quantize values in [-1, 1] (clamped) to 8 bits.
    pub fn from_signed(width: usize, height: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), width * height * 3);
        let data = values
            .iter()
            .map(|&v| {
                let v = if v.is_finite() {
                    v.clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                ((v + 1.0) * 127.5).round() as u8
            })
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |message: String| Error::Image {
            path: path.to_path_buf(),
            message,
        };
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| err("image too large".into()))?
        ];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| err(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let buf = &buf[..info.buffer_size()];
        let data = match info.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf
                .chunks_exact(2)
                .flat_map(|p| [p[0], p[0], p[0]])
                .collect(),
            other => return Err(err(format!("unsupported color type {other:?}"))),
        };
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&self.data).map_err(err)?;
        w.finish().map_err(err)
    }

    /// Load a PNG and check its size.
    pub fn load_sized(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Self> {
        let path = path.as_ref();
        let img = Self::load_png(path)?;
        if img.width != width || img.height != height {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!(
                    "expected {width}x{height} image, found {}x{}",
                    img.width, img.height
                ),
            });
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 17 % 256) as u8;
        }
        let p = dir.path().join("a/b.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
        assert!(Image::load_sized(&p, 4, 3).is_err());
    }

    #[test]
    fn signed_quantization_is_exact_on_grid() {
        let img = Image {
            width: 1,
            height: 1,
            data: vec![0, 128, 255],
        };
        assert_eq!(Image::from_signed(1, 1, &img.to_signed()), img);
        let clamped = Image::from_signed(1, 1, &[-3.0, f32::NAN, 9.0]);
        assert_eq!(clamped.data, vec![0, 128, 255]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert_eq!(
            Image::load_png("/nonexistent/x.png")
                .unwrap_err()
                .exit_code(),
            5
        );
    }
}
