use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::WsiError;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbPlane {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbPlane {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, WsiError> {
        if data.len() != width * height * 3 {
            return Err(WsiError::DimMismatch(format!(
                "{width}x{height} RGB plane needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbPlane { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbPlane { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the `w x h` window at `(x, y)`; the window must lie inside.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> RgbPlane {
        assert!(x + w <= self.width && y + h <= self.height, "crop outside plane");
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbPlane { width: w, height: h, data }
    }

    pub fn read_png(path: &Path) -> Result<Self, WsiError> {
        let file = File::open(path).map_err(|e| WsiError::io(path, e))?;
        let mut decoder = png::Decoder::new_with_limits(BufReader::new(file), png::Limits { bytes: usize::MAX });
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| WsiError::Png(format!("{}: {e}", path.display())))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| WsiError::Png(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| WsiError::Png(format!("{}: {e}", path.display())))?;
        buf.truncate(info.buffer_size());
        let (w, h) = (info.width as usize, info.height as usize);
        let data = match info.color_type {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(WsiError::Png(format!("{}: unsupported color type {other:?}", path.display()))),
        };
        RgbPlane::new(w, h, data)
    }

    /// Deterministic 8-bit RGB PNG encoding.
    pub fn write_png(&self, path: &Path) -> Result<(), WsiError> {
        let file = File::create(path).map_err(|e| WsiError::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Fast);
        let mut writer = enc.write_header().map_err(|e| WsiError::Png(e.to_string()))?;
        writer.write_image_data(&self.data).map_err(|e| WsiError::Png(e.to_string()))?;
        writer.finish().map_err(|e| WsiError::Png(e.to_string()))?;
        Ok(())
    }
}
