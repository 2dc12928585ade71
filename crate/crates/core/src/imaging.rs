//! Raster containers, bilinear sampling, forward-difference gradients and
//! file I/O for frames, depth maps and segmentations.
//!
//! File formats:
//!
//! - Frames: 8-bit RGB, PNG or binary PPM chosen by file extension.
//! - Segmentations: 8-bit single-channel PNG/PGM holding label indices
//!   (0 eyelid, 1 sclera, 2 cornea).
//! - Depth: `b"DPTH"`, width (u32 LE), height (u32 LE), then
//!   `width * height` little-endian f32 samples in row-major order.

use std::fs;
use std::io;
use std::ops::Deref;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("raster dimensions {0}x{1} are too small for this operation")]
    TooSmall(usize, usize),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("data length {got} does not match {width}x{height}x{channels}")]
    BadLength {
        got: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("value {value} at offset {offset} is outside {range}")]
    OutOfRange {
        value: f64,
        offset: usize,
        range: &'static str,
    },
    #[error("{path}: parse error in {field}: {detail}")]
    Parse {
        path: String,
        field: String,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Slack for sample coordinates that land on the last row or column up to
/// rounding error.
const EDGE_TOL: f64 = 1e-9;

/// Interleaved multi-channel f64 raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(ImagingError::BadLength {
                got: data.len(),
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
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

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_size(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(ImagingError::DimensionMismatch(
                self.width,
                self.height,
                width,
                height,
            ));
        }
        Ok(())
    }

    /// Bilinear interpolation at `(u, v)` written into `out` (one value per
    /// channel). Returns `false` and zeroes `out` when the location lies
    /// outside `[0, width-1] x [0, height-1]`.
    #[inline]
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        debug_assert_eq!(out.len(), self.channels);
        let max_u = (self.width - 1) as f64;
        let max_v = (self.height - 1) as f64;
        // NaN fails both comparisons.
        if !(u >= -EDGE_TOL && u <= max_u + EDGE_TOL && v >= -EDGE_TOL && v <= max_v + EDGE_TOL) {
            out.iter_mut().for_each(|o| *o = 0.0);
            return false;
        }
        let u = u.clamp(0.0, max_u);
        let v = v.clamp(0.0, max_v);
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;
        let w00 = (1.0 - ax) * (1.0 - ay);
        let w10 = ax * (1.0 - ay);
        let w01 = (1.0 - ax) * ay;
        let w11 = ax * ay;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        for c in 0..self.channels {
            out[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
        }
        true
    }

    /// Allocating form of [`Raster::sample_into`].
    pub fn sample(&self, u: f64, v: f64) -> (Vec<f64>, bool) {
        let mut out = vec![0.0; self.channels];
        let ok = self.sample_into(u, v, &mut out);
        (out, ok)
    }

    /// Forward differences `(d/dx, d/dy)`. The last column of d/dx and the
    /// last row of d/dy are zero.
    pub fn gradients(&self) -> Result<(Raster, Raster)> {
        if self.width < 2 || self.height < 2 {
            return Err(ImagingError::TooSmall(self.width, self.height));
        }
        let (w, h, ch) = (self.width, self.height, self.channels);
        let mut gx = Raster::zeros(w, h, ch);
        let mut gy = Raster::zeros(w, h, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    if x + 1 < w {
                        gx.put(x, y, c, self.at(x + 1, y, c) - self.at(x, y, c));
                    }
                    if y + 1 < h {
                        gy.put(x, y, c, self.at(x, y + 1, c) - self.at(x, y, c));
                    }
                }
            }
        }
        Ok((gx, gy))
    }

    /// Per-pixel mean over channels, as a single-channel raster.
    pub fn channel_mean(&self) -> Raster {
        let n = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

/// RGB frame with intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(Raster);

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_raster(Raster::new(width, height, 3, data)?)
    }

    pub fn from_raster(r: Raster) -> Result<Self> {
        if r.channels != 3 {
            return Err(ImagingError::BadLength {
                got: r.data.len(),
                width: r.width,
                height: r.height,
                channels: 3,
            });
        }
        if let Some((offset, &value)) = r
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && **v <= 1.0))
        {
            return Err(ImagingError::OutOfRange {
                value,
                offset,
                range: "[0, 1]",
            });
        }
        Ok(Self(r))
    }

    /// Clamps every value into `[0, 1]`.
    pub fn from_raster_clamped(mut r: Raster) -> Self {
        assert_eq!(r.channels, 3, "frames have three channels");
        for v in &mut r.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self(r)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_raster_clamped(Raster::from_fn(width, height, 3, |_, _, c| rgb[c]))
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    /// Grayscale (channel mean) intensity at integer pixel `(x, y)`.
    pub fn gray(&self, x: usize, y: usize) -> f64 {
        self.0.pixel(x, y).iter().sum::<f64>() / 3.0
    }
}

impl Deref for Frame {
    type Target = Raster;
    fn deref(&self) -> &Raster {
        &self.0
    }
}

/// Per-pixel depth in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Raster);

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let r = Raster::new(width, height, 1, data)?;
        if let Some((offset, &value)) = r.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(ImagingError::OutOfRange {
                value,
                offset,
                range: "finite values",
            });
        }
        Ok(Self(r))
    }

    pub fn filled(width: usize, height: usize, depth: f64) -> Self {
        Self(Raster::filled(width, height, 1, depth))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self(Raster::from_fn(width, height, 1, |x, y, _| f(x, y)))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0.data[y * self.0.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        let w = self.0.width;
        self.0.data[y * w + x] = d;
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0.data
    }

    /// Bilinear depth at a sub-pixel location, `None` outside the image.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let mut out = [0.0];
        self.0.sample_into(u, v, &mut out).then_some(out[0])
    }
}

impl Deref for DepthMap {
    type Target = Raster;
    fn deref(&self) -> &Raster {
        &self.0
    }
}

/// Semantic classes of the ocular surface segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    Eyelid = 0,
    Sclera = 1,
    Cornea = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Eyelid, Label::Sclera, Label::Cornea];

    pub fn from_index(i: u8) -> Option<Label> {
        match i {
            0 => Some(Label::Eyelid),
            1 => Some(Label::Sclera),
            2 => Some(Label::Cornea),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Eyelid => "eyelid",
            Label::Sclera => "sclera",
            Label::Cornea => "cornea",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eyelid" => Ok(Label::Eyelid),
            "sclera" => Ok(Label::Sclera),
            "cornea" => Ok(Label::Cornea),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

/// Three-class label raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl SegMap {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(ImagingError::BadLength {
                got: labels.len(),
                width,
                height,
                channels: 1,
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: Label) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Label) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            labels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, l: Label) {
        self.labels[y * self.width + x] = l;
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Three-channel one-hot encoding, channel order eyelid, sclera, cornea.
    pub fn onehot(&self) -> Raster {
        let mut data = vec![0.0; self.labels.len() * 3];
        for (i, l) in self.labels.iter().enumerate() {
            data[i * 3 + l.index()] = 1.0;
        }
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Pixels carrying `label`.
    pub fn mask_of(&self, label: Label) -> PixelMask {
        PixelMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }
}

/// Per-pixel boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(ImagingError::BadLength {
                got: bits.len(),
                width,
                height,
                channels: 1,
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &PixelMask) -> PixelMask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        PixelMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }
}

/// True exactly where the label is not eyelid.
pub fn eyelid_mask(s: &SegMap) -> PixelMask {
    PixelMask {
        width: s.width,
        height: s.height,
        bits: s.labels.iter().map(|&l| l != Label::Eyelid).collect(),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn image_format(path: &Path) -> Result<ImageFormat> {
    ImageFormat::from_path(path).map_err(|e| ImagingError::Codec {
        path: path_str(path),
        source: e,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let img = RgbImage::from_fn(frame.width() as u32, frame.height() as u32, |x, y| {
        let p = frame.pixel(x as usize, y as usize);
        image::Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])])
    });
    img.save_with_format(path, image_format(path)?)
        .map_err(|e| ImagingError::Codec {
            path: path_str(path),
            source: e,
        })
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => ImagingError::Io {
                path: path_str(path),
                source,
            },
            other => ImagingError::Codec {
                path: path_str(path),
                source: other,
            },
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Frame::new(w, h, data)
}

pub fn write_segmap(path: &Path, seg: &SegMap) -> Result<()> {
    let img = GrayImage::from_raw(
        seg.width as u32,
        seg.height as u32,
        seg.labels.iter().map(|&l| l as u8).collect(),
    )
    .expect("buffer length matches dimensions");
    img.save_with_format(path, image_format(path)?)
        .map_err(|e| ImagingError::Codec {
            path: path_str(path),
            source: e,
        })
}

pub fn read_segmap(path: &Path) -> Result<SegMap> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => ImagingError::Io {
            path: path_str(path),
            source,
        },
        other => ImagingError::Codec {
            path: path_str(path),
            source: other,
        },
    })?;
    if dynimg.color().channel_count() != 1 {
        return Err(ImagingError::Parse {
            path: path_str(path),
            field: "color type".into(),
            detail: format!("expected single-channel labels, got {:?}", dynimg.color()),
        });
    }
    let img = dynimg.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = img
        .into_raw()
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            Label::from_index(b).ok_or_else(|| ImagingError::Parse {
                path: path_str(path),
                field: format!("label at pixel offset {i}"),
                detail: format!("value {b} is not one of 0 (eyelid), 1 (sclera), 2 (cornea)"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SegMap::new(w, h, labels)
}

pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
const DEPTH_HEADER_LEN: usize = 12;

/// Serializes a depth map. Values are stored as f32, so the round trip is
/// exact for maps whose values are f32-representable (e.g. anything read
/// back from this format).
pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(DEPTH_HEADER_LEN + depth.pixel_count() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    for &v in depth.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], origin: &str) -> Result<DepthMap> {
    let parse = |field: &str, detail: String| ImagingError::Parse {
        path: origin.to_string(),
        field: field.to_string(),
        detail,
    };
    if bytes.len() < DEPTH_HEADER_LEN {
        return Err(parse(
            "header",
            format!(
                "file is {} bytes, header needs {DEPTH_HEADER_LEN}",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != DEPTH_MAGIC {
        return Err(parse(
            "magic (offset 0)",
            format!("expected {:?}, found {:?}", DEPTH_MAGIC, &bytes[0..4]),
        ));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| parse("width/height (offset 4)", "size overflows".into()))?;
    let body = &bytes[DEPTH_HEADER_LEN..];
    if body.len() != want {
        return Err(parse(
            "samples (offset 12)",
            format!(
                "expected {want} bytes for {width}x{height} f32 samples, found {}",
                body.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(width * height);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(parse(
                &format!("sample {i} (offset {})", DEPTH_HEADER_LEN + 4 * i),
                format!("non-finite depth {v}"),
            ));
        }
        data.push(v as f64);
    }
    DepthMap::new(width, height, data)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    fs::write(path, encode_depth(depth)).map_err(|e| ImagingError::Io {
        path: path_str(path),
        source: e,
    })
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| ImagingError::Io {
        path: path_str(path),
        source: e,
    })?;
    decode_depth(&bytes, &path_str(path))
}
