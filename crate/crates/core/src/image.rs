//! Row-major 2D grids: RGB images, boolean masks and scalar buffers.
//!
//! PNG I/O maps bytes linearly: `value = byte / 255` on read and
//! `byte = round(255 * clamp(value, 0, 1))` on write. No gamma curve is
//! applied in either direction even though written files carry an sRGB tag.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type Image = Grid<Vec3>;
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid { height, width, data }
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, y: usize, x: usize) -> &mut T {
        let w = self.width;
        &mut self.data[y * w + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "{what}: size {}x{} does not match {}x{}",
                other.height, other.width, self.height, self.width
            )))
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }
}

impl Image {
    /// Bilinear lookup with pixel centers at integer + 0.5 coordinates.
    /// Coordinates are clamped to the outermost pixel centers.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Vec3 {
        let fx = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
        let bottom = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    pub fn clamp01(&self) -> Image {
        self.map(|c| c.map(|v| v.clamp(0.0, 1.0)))
    }
}

pub fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn write_png_raw(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    let mut writer = encoder.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().flat_map(|c| [to_byte(c.x), to_byte(c.y), to_byte(c.z)]).collect();
    write_png_raw(path, image.width, image.height, png::ColorType::Rgb, &bytes)
}

/// Writes a mask as 8-bit grayscale, 0 or 255.
pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png_raw(path, mask.width, mask.height, png::ColorType::Grayscale, &bytes)
}

/// Writes a scalar buffer as grayscale after normalizing `[lo, hi]` to `[0, 1]`.
pub fn write_scalar_png(values: &Grid<f64>, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = values.data.iter().map(|&v| to_byte((v - lo) / span)).collect();
    write_png_raw(path, values.width, values.height, png::ColorType::Grayscale, &bytes)
}

fn read_png_bytes(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut decoder = png::Decoder::new(raw.as_slice());
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let (info, buf) = read_png_bytes(path)?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    Ok(Grid::from_fn(h, w, |y, x| {
        let p = &buf[(y * w + x) * channels..];
        let at = |c: usize| p[c.min(channels.saturating_sub(1))] as f64 / 255.0;
        if channels >= 3 {
            Vec3::new(at(0), at(1), at(2))
        } else {
            Vec3::repeat(at(0))
        }
    }))
}

/// Reads a grayscale or color PNG as a mask: nonzero first channel is true.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let (info, buf) = read_png_bytes(path)?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    Ok(Grid::from_fn(h, w, |y, x| buf[(y * w + x) * channels] > 127))
}

pub(crate) fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}
