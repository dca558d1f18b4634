//! Fixed-size image representations of event windows.
//!
//! Images are `(height, width, 3)` arrays of floats in `[0, 1]`, channels
//! R, G, B. Eight-bit values only appear at file boundaries.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::events_io::EventStream;
use crate::hashing::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum RepresentationError {
    #[error("invalid window [{t0}, {t1})")]
    InvalidWindow { t0: u64, t1: u64 },
    #[error("sensor resolution {width}x{height} is empty")]
    EmptyResolution { width: u32, height: u32 },
    #[error("pixel value {value} outside [0, 1]")]
    OutOfRange { value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = RepresentationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepKind {
    EventFrame,
    Tencode,
    Evrep,
    ExternalFrame,
}

impl RepKind {
    pub const ALL: [RepKind; 4] = [
        RepKind::EventFrame,
        RepKind::Tencode,
        RepKind::Evrep,
        RepKind::ExternalFrame,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RepKind::EventFrame => "event_frame",
            RepKind::Tencode => "tencode",
            RepKind::Evrep => "evrep",
            RepKind::ExternalFrame => "external_frame",
        }
    }
}

impl fmt::Display for RepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RepKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        RepKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                format!("unknown representation {s:?} (expected event_frame, tencode, evrep or external_frame)")
            })
    }
}

/// An image plus the representation it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RepImage {
    pub pixels: Array3<f64>,
    pub kind: RepKind,
}

impl RepImage {
    pub fn new(pixels: Array3<f64>, kind: RepKind) -> Self {
        debug_assert_eq!(pixels.shape()[2], 3);
        Self { pixels, kind }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Row-major RGB bytes, `round(255 * v)` after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    /// SHA-256 (hex) of [`RepImage::to_rgb8`]; the replay fixture key.
    pub fn content_sha256(&self) -> String {
        sha256_hex(&self.to_rgb8())
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
                .expect("buffer matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        out.into_inner()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tencode frame: polarity of the latest event in R (+1) / B (-1), its
/// normalized time in G.
#[derive(Debug, Clone, PartialEq)]
pub struct TencodeFrame {
    pub pixels: Array3<f64>,
    pub t0: u64,
    pub t1: u64,
}

impl TencodeFrame {
    pub fn into_rep(self) -> RepImage {
        RepImage::new(self.pixels, RepKind::Tencode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TencodeOptions {
    /// Value of pixels without any event in the window.
    pub background: [f64; 3],
}

impl Default for TencodeOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
        }
    }
}

fn check_window(stream: &EventStream, t0: u64, t1: u64) -> Result<()> {
    if t0 >= t1 {
        return Err(RepresentationError::InvalidWindow { t0, t1 });
    }
    if stream.width() == 0 || stream.height() == 0 {
        return Err(RepresentationError::EmptyResolution {
            width: stream.width(),
            height: stream.height(),
        });
    }
    Ok(())
}

pub fn encode_tencode(stream: &EventStream, t0: u64, t1: u64) -> Result<TencodeFrame> {
    encode_tencode_with(stream, t0, t1, &TencodeOptions::default())
}

pub fn encode_tencode_with(
    stream: &EventStream,
    t0: u64,
    t1: u64,
    options: &TencodeOptions,
) -> Result<TencodeFrame> {
    check_window(stream, t0, t1)?;
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let mut pixels = Array3::from_shape_fn((h, w, 3), |(_, _, c)| options.background[c]);
    let span = (t1 - t0) as f64;
    // time-ordered, so the last write at a pixel is the latest event
    for e in stream.events().iter().filter(|e| e.t >= t0 && e.t < t1) {
        let (y, x) = (e.y as usize, e.x as usize);
        let pos = e.is_positive();
        pixels[[y, x, 0]] = if pos { 1.0 } else { 0.0 };
        pixels[[y, x, 1]] = (e.t - t0) as f64 / span;
        pixels[[y, x, 2]] = if pos { 0.0 } else { 1.0 };
    }
    Ok(TencodeFrame { pixels, t0, t1 })
}

/// Per-pixel event counts, each polarity normalized by its own maximum.
pub fn encode_event_frame(stream: &EventStream, t0: u64, t1: u64) -> Result<RepImage> {
    check_window(stream, t0, t1)?;
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let mut counts = Array3::<f64>::zeros((h, w, 3));
    for e in stream.events().iter().filter(|e| e.t >= t0 && e.t < t1) {
        let c = if e.is_positive() { 0 } else { 2 };
        counts[[e.y as usize, e.x as usize, c]] += 1.0;
    }
    for c in [0, 2] {
        let mut chan = counts.index_axis_mut(ndarray::Axis(2), c);
        let max = chan.fold(0.0f64, |m, &v| m.max(v));
        if max > 0.0 {
            chan.mapv_inplace(|v| v / max);
        }
    }
    Ok(RepImage::new(counts, RepKind::EventFrame))
}

pub fn export_png(image: &RepImage, path: &Path) -> Result<()> {
    if let Some(&value) = image
        .pixels
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(RepresentationError::OutOfRange { value });
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
            .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| RepresentationError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads a PNG into `[0, 1]` floats. 16-bit files are normalized by 65535,
/// 8-bit by 255. With `size = Some((w, h))` the image is bilinearly resized.
pub fn load_png(path: &Path, kind: RepKind, size: Option<(u32, u32)>) -> Result<RepImage> {
    let img = image::open(path).map_err(|source| RepresentationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(from_dynamic(img, kind, size))
}

pub fn decode_png(bytes: &[u8], kind: RepKind) -> Result<RepImage> {
    let img = image::load_from_memory(bytes).map_err(|source| RepresentationError::Io {
        path: PathBuf::from("<memory>"),
        source,
    })?;
    Ok(from_dynamic(img, kind, None))
}

fn from_dynamic(img: DynamicImage, kind: RepKind, size: Option<(u32, u32)>) -> RepImage {
    let pixels = match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            let rgb = match size {
                Some((w, h)) if (w, h) != rgb.dimensions() => {
                    image::imageops::resize(&rgb, w, h, image::imageops::FilterType::Triangle)
                }
                _ => rgb,
            };
            let (w, h) = rgb.dimensions();
            Array3::from_shape_vec(
                (h as usize, w as usize, 3),
                rgb.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect(),
            )
        }
        _ => {
            let rgb = img.to_rgb8();
            let rgb = match size {
                Some((w, h)) if (w, h) != rgb.dimensions() => {
                    image::imageops::resize(&rgb, w, h, image::imageops::FilterType::Triangle)
                }
                _ => rgb,
            };
            let (w, h) = rgb.dimensions();
            Array3::from_shape_vec(
                (h as usize, w as usize, 3),
                rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
            )
        }
    }
    .expect("buffer matches dimensions");
    RepImage::new(pixels, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events_io::Event;

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream::new(events, 5, 4).unwrap()
    }

    #[test]
    fn tencode_single_event() {
        let f = encode_tencode(&stream(vec![Event::new(2, 3, 10, true)]), 10, 20).unwrap();
        assert_eq!(f.pixels.shape(), &[4, 5, 3]);
        assert_eq!(f.pixels.slice(ndarray::s![3, 2, ..]).to_vec(), vec![1.0, 0.0, 0.0]);
        let lit = f.pixels.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(lit, 1);
    }

    #[test]
    fn tencode_latest_event_wins() {
        let s = stream(vec![Event::new(1, 1, 0, true), Event::new(1, 1, 99, false)]);
        let f = encode_tencode(&s, 0, 100).unwrap();
        let px = f.pixels.slice(ndarray::s![1, 1, ..]).to_vec();
        assert_eq!(px, vec![0.0, 1.0 - 1.0 / 100.0, 1.0]);
    }

    #[test]
    fn tencode_background_and_errors() {
        let f = encode_tencode_with(
            &EventStream::empty(3, 2),
            0,
            1,
            &TencodeOptions {
                background: [1.0, 1.0, 1.0],
            },
        )
        .unwrap();
        assert!(f.pixels.iter().all(|&v| v == 1.0));
        assert!(matches!(
            encode_tencode(&EventStream::empty(3, 2), 5, 5),
            Err(RepresentationError::InvalidWindow { .. })
        ));
        assert!(matches!(
            encode_tencode(&EventStream::empty(0, 2), 0, 5),
            Err(RepresentationError::EmptyResolution { .. })
        ));
    }

    #[test]
    fn event_frame_counts() {
        let mut ev = vec![Event::new(0, 0, 1, true); 3];
        ev.push(Event::new(4, 3, 2, true));
        let img = encode_event_frame(&stream(ev), 0, 10).unwrap();
        assert_eq!(img.pixels[[0, 0, 0]], 1.0);
        assert_eq!(img.pixels[[3, 4, 0]], 1.0 / 3.0);
        assert!(img.pixels.index_axis(ndarray::Axis(2), 2).iter().all(|&v| v == 0.0));

        let neg = encode_event_frame(&stream(vec![Event::new(1, 1, 1, false)]), 0, 10).unwrap();
        assert!(neg.pixels.index_axis(ndarray::Axis(2), 0).iter().all(|&v| v == 0.0));
        assert_eq!(neg.pixels[[1, 1, 2]], 1.0);

        let empty = encode_event_frame(&EventStream::empty(5, 4), 0, 10).unwrap();
        assert!(empty.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = RepImage::new(Array3::from_elem((2, 3, 3), 1.0), RepKind::Tencode);
        export_png(&img, &path).unwrap();
        let back = load_png(&path, RepKind::ExternalFrame, None).unwrap();
        assert_eq!(back.pixels, img.pixels);

        let bad = RepImage::new(Array3::from_elem((1, 1, 3), 1.5), RepKind::Tencode);
        assert!(matches!(
            export_png(&bad, &path),
            Err(RepresentationError::OutOfRange { .. })
        ));
    }

    #[test]
    fn kind_names() {
        for k in RepKind::ALL {
            assert_eq!(k.as_str().parse::<RepKind>().unwrap(), k);
        }
        assert!("voxel".parse::<RepKind>().is_err());
    }
}
