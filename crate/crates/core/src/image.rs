//! RGB images in `[0, 1]`, PNG I/O, and conversions to the `[-1, 1]`
//! channel-major layout the denoiser consumes.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `H x W x 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-major values mapped to `[-1, 1]`.
    pub fn to_signed_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c] * 2.0 - 1.0;
            }
        }
        out
    }

    /// Inverse of [`Image::to_signed_chw`], clamping to `[0, 1]`.
    pub fn from_signed_chw(chw: &[f32], width: usize, height: usize) -> Self {
        let hw = width * height;
        assert_eq!(chw.len(), 3 * hw);
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = ((chw[c * hw + p] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Self { width, height, data }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Format(format!("expected {} RGB bytes, got {}", width * height * 3, bytes.len())));
        }
        Ok(Self { width, height, data: bytes.iter().map(|&b| b as f32 / 255.0).collect() })
    }

    /// Writes an 8-bit RGB PNG; identical images give identical bytes.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut writer = encoder.write_header().map_err(to_io)?;
        writer.write_image_data(&self.to_rgb8()).map_err(to_io)?;
        writer.finish().map_err(to_io)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Decodes an 8-bit RGB or RGBA PNG stream.
    pub fn decode_png<R: std::io::BufRead + std::io::Seek>(reader: R) -> Result<Self> {
        let decoder = png::Decoder::new(reader);
        let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
        let info = reader.info();
        let (width, height) = (info.width as usize, info.height as usize);
        if width == 0 || height == 0 || width * height > 1 << 22 {
            return Err(Error::Format(format!("unsupported image size {width}x{height}")));
        }
        let size = reader.output_buffer_size().ok_or_else(|| Error::Format("image too large".into()))?;
        let mut buf = vec![0; size];
        let frame = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
        if frame.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format("only 8-bit PNGs are supported".into()));
        }
        let bytes = &buf[..frame.buffer_size()];
        let rgb: Vec<u8> = match frame.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            other => return Err(Error::Format(format!("unsupported color type {other:?}"))),
        };
        Self::from_rgb8(width, height, &rgb)
    }
}
