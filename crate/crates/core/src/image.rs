use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("buffer of {got} bytes does not match {width}x{height}x3")]
    Size { width: usize, height: usize, got: usize },
    #[error("png encoding: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width * height * 3 {
            return Err(ImageError::Size { width, height, got: data.len() });
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel values scaled to `[0, 1]`.
    pub fn pixel_f32(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixel(x, y).map(|c| c as f32 / 255.0)
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bounds-checked write for signed coordinates.
    pub fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.set(x as usize, y as usize, rgb);
        }
    }

    /// Pixels whose color equals `rgb` exactly.
    pub fn count_color(&self, rgb: [u8; 3]) -> usize {
        self.data.chunks_exact(3).filter(|p| *p == rgb).count()
    }

    /// Centroid of pixels with color `rgb`, in pixel coordinates.
    pub fn centroid_of(&self, rgb: [u8; 3]) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            if p == rgb {
                sx += (i % self.width) as f64;
                sy += (i / self.width) as f64;
                n += 1;
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        self.write_png(&mut out)?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_png(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn write_png<W: Write>(&self, w: W) -> Result<(), ImageError> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ImageError::Png(e.to_string()))?;
        writer.write_image_data(&self.data).map_err(|e| ImageError::Png(e.to_string()))?;
        writer.finish().map_err(|e| ImageError::Png(e.to_string()))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().map_err(|e| ImageError::Png(e.to_string()))?;
        let size = reader.output_buffer_size().ok_or_else(|| ImageError::Png("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Png(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::Png(format!("unsupported format {:?}/{:?}", info.color_type, info.bit_depth)));
        }
        buf.truncate(info.buffer_size());
        Image::from_raw(info.width as usize, info.height as usize, buf)
    }
}
