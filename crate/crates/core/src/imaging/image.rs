use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// An RGB image with interleaved channels (row-major, `[y][x][c]`) and
/// intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageRGB {
    /// Builds an image, checking shape and that every value lies in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let img = Self::from_raw_unchecked(height, width, data)?;
        if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(img)
    }

    /// Builds an image without the range check. Values may lie outside
    /// `[0, 1]`; `save_image` clamps them.
    pub fn from_raw_unchecked(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "image must be at least 1x1");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
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

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Copies out the `h x w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}x{w}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Ok(Self { height: h, width: w, data })
    }

    /// Mirrors left-right (reverses column order).
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    /// Mirrors top-bottom (reverses row order).
    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(self.height - 1 - y, x))
    }

    pub fn same_dims(&self, other: &ImageRGB) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn clamped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// 8-bit copy, clamped and rounded per channel.
    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Self {
        Self {
            height: rgb.height() as usize,
            width: rgb.width() as usize,
            data: rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }
}

/// Clamp to `[0, 1]` then round to the nearest 8-bit level.
#[inline]
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// Reads a PNG or JPEG file, scaling 8-bit samples into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode { message, .. } => Error::Decode { path: path.to_path_buf(), message },
        other => other,
    })
}

/// Decodes PNG or JPEG bytes held in memory.
pub fn decode_image(bytes: &[u8]) -> Result<ImageRGB> {
    let decode_err = |message: String| Error::Decode { path: "<memory>".into(), message };
    let format = image::guess_format(bytes).map_err(|e| decode_err(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(decode_err(format!("unsupported format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| decode_err(e.to_string()))?;
    Ok(ImageRGB::from_rgb8(&img.to_rgb8()))
}

/// Encodes to an 8-bit RGB PNG.
pub fn encode_png(img: &ImageRGB) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.to_rgb8()
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out.into_inner()
}

/// Writes an 8-bit RGB PNG. The file is written beside its destination and
/// renamed into place, so readers never observe a partial file.
pub fn save_image(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_png(img))
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
