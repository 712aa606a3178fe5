//! Image, mask and depth containers, sRGB to CIELAB conversion and PNG I/O.
//!
//! Pixel values are `f64` in `[0, 1]`. Constructors reject out-of-range or
//! non-finite values; the `*_clamped` constructors clamp explicitly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_unit(values: &[f64]) -> Result<()> {
    if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("value {bad} outside [0, 1]")));
    }
    Ok(())
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "image dimensions must be at least 1x1, got {height}x{width}"
        )));
    }
    Ok(())
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Row-major `H x W x 3` RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "expected {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        check_unit(&data)?;
        Ok(Self { height, width, data })
    }

    /// Builds an image, clamping every sample into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
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

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Interleaved RGB samples, row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// What a [`ScalarField`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldRole {
    Mask,
    Depth,
    Matte,
}

/// Single-channel `H x W` field in `[0, 1]`: an occluder mask, a depth map or a
/// rendered matte.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    role: FieldRole,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, role: FieldRole, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "expected {} samples, got {}",
                height * width,
                data.len()
            )));
        }
        check_unit(&data)?;
        Ok(Self {
            height,
            width,
            role,
            data,
        })
    }

    pub fn from_clamped(height: usize, width: usize, role: FieldRole, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Self::new(height, width, role, data)
    }

    pub fn filled(height: usize, width: usize, role: FieldRole, value: f64) -> Result<Self> {
        Self::new(height, width, role, vec![value; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        role: FieldRole,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, role, data)
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

    pub fn role(&self) -> FieldRole {
        self.role
    }

    pub fn with_role(mut self, role: FieldRole) -> Self {
        self.role = role;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Number of samples at or above 0.5.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|v| **v >= 0.5).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.data.len() as f64
    }

    /// Centroid of the thresholded foreground in continuous coordinates with
    /// pixel centres at `(x + 0.5, y + 0.5)`. Returns `(x, y)`.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) >= 0.5 {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::dims(dims, self.dims()));
        }
        Ok(())
    }
}

/// CIELAB image: `L` in `[0, 100]`, `a`/`b` roughly in `[-128, 127]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    data: Vec<[f64; 3]>,
}

impl LabImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }
}

// sRGB primaries, D65 white.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

fn white_point() -> [f64; 3] {
    // Row sums of the RGB->XYZ matrix, so RGB white maps to a = b = 0 exactly.
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const LAB_DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > LAB_DELTA * LAB_DELTA * LAB_DELTA {
        t.cbrt()
    } else {
        t / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > LAB_DELTA {
        t * t * t
    } else {
        3.0 * LAB_DELTA * LAB_DELTA * (t - 4.0 / 29.0)
    }
}

/// Converts one sRGB triple to CIELAB (D65).
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = RGB_TO_XYZ.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    let white = white_point();
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts one CIELAB triple back to sRGB; the result may lie outside `[0, 1]`
/// for out-of-gamut colours.
pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let white = white_point();
    let xyz = [
        white[0] * lab_f_inv(fx),
        white[1] * lab_f_inv(fy),
        white[2] * lab_f_inv(fz),
    ];
    let lin = XYZ_TO_RGB.map(|row| row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2]);
    lin.map(linear_to_srgb)
}

pub fn rgb_to_lab(img: &Image) -> LabImage {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| srgb_pixel_to_lab([p[0], p[1], p[2]]))
        .collect();
    LabImage {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Inverse of [`rgb_to_lab`], clamping out-of-gamut results into `[0, 1]`.
pub fn lab_to_rgb(lab: &LabImage) -> Image {
    let data = lab
        .data
        .iter()
        .flat_map(|p| lab_pixel_to_srgb(*p).map(clamp_unit))
        .collect();
    Image {
        height: lab.height,
        width: lab.width,
        data,
    }
}

struct DecodedPng {
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<f64>,
}

fn decode_png(path: &Path) -> Result<DecodedPng> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    let corrupt = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::CorruptStream {
            path: path.to_path_buf(),
            detail: io.to_string(),
        },
        other => Error::CorruptStream {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let (color, depth) = reader.output_color_type();
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: "indexed colour".into(),
            })
        }
    };
    let bytes_per_sample = match depth {
        png::BitDepth::Eight => 1,
        png::BitDepth::Sixteen => 2,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("bit depth {other:?}"),
            })
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::CorruptStream {
        path: path.to_path_buf(),
        detail: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let samples = if bytes_per_sample == 1 {
        buf[..info.buffer_size()]
            .iter()
            .map(|b| f64::from(*b) / 255.0)
            .collect()
    } else {
        buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / 65535.0)
            .collect()
    };
    Ok(DecodedPng {
        height,
        width,
        channels,
        samples,
    })
}

/// Loads an 8- or 16-bit PNG. Grayscale is promoted to three channels and
/// alpha is discarded.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let png = decode_png(path.as_ref())?;
    let mut data = Vec::with_capacity(png.height * png.width * 3);
    for px in png.samples.chunks_exact(png.channels) {
        match png.channels {
            1 | 2 => data.extend_from_slice(&[px[0], px[0], px[0]]),
            _ => data.extend_from_slice(&px[..3]),
        }
    }
    Image::new(png.height, png.width, data)
}

/// Loads a single-channel PNG as a scalar field. Colour inputs are reduced to
/// their first channel.
pub fn load_field(path: impl AsRef<Path>, role: FieldRole) -> Result<ScalarField> {
    let png = decode_png(path.as_ref())?;
    let data = png.samples.chunks_exact(png.channels).map(|px| px[0]).collect();
    ScalarField::new(png.height, png.width, role, data)
}

fn quantize8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn quantize16(v: f64) -> u16 {
    (v * 65535.0).round().clamp(0.0, 65535.0) as u16
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Writes an 8-bit RGB PNG, quantizing each channel as `round(v * 255)`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize8(*v)).collect();
    write_png(
        path.as_ref(),
        img.width,
        img.height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &bytes,
    )
}

/// Writes a 16-bit RGB PNG. Used where 8-bit quantization would swamp small
/// perturbations (finite-difference queries to external detectors).
pub fn save_image_16(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|v| quantize16(*v).to_be_bytes()).collect();
    write_png(
        path.as_ref(),
        img.width,
        img.height,
        png::ColorType::Rgb,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

/// Writes an 8-bit single-channel PNG.
pub fn save_field(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = field.data.iter().map(|v| quantize8(*v)).collect();
    write_png(
        path.as_ref(),
        field.width,
        field.height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &bytes,
    )
}

/// Bilinear resample of a field to new dimensions (pixel-centre aligned).
pub fn resize_field(field: &ScalarField, height: usize, width: usize) -> Result<ScalarField> {
    let sy = field.height as f64 / height as f64;
    let sx = field.width as f64 / width as f64;
    ScalarField::from_clamped(height, width, field.role, {
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (field.height - 1) as f64);
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (field.width - 1) as f64);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(field.height - 1), (x0 + 1).min(field.width - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let top = field.get(y0, x0) * (1.0 - tx) + field.get(y0, x1) * tx;
                let bot = field.get(y1, x0) * (1.0 - tx) + field.get(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
        out
    })
}
