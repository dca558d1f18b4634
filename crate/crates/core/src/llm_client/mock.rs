use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Axis};

use super::{classes_from_prompt, CaptionRequest, LlmBackend, LlmResponse, Result};
use crate::hashing::sha256_u64;
use crate::representation::RepImage;

const CELL_NAMES: [&str; 9] = [
    "top left",
    "top center",
    "top right",
    "center left",
    "center",
    "center right",
    "bottom left",
    "bottom center",
    "bottom right",
];
const CHANNEL_NAMES: [&str; 3] = ["red", "green", "blue"];
/// Cell-mean spread below which an image counts as uniform.
const UNIFORM_SPREAD: f64 = 0.05;
/// Channel-mean spread below which no color dominates.
const NEUTRAL_SPREAD: f64 = 0.02;

/// Deterministic caption from image statistics.
///
/// The image is split into a 3x3 grid. If the cells' mean intensities span
/// less than 0.05 the caption is "uniform dark image" (overall mean below 0.5)
/// or "uniform bright image". Otherwise it names the brightest cell (first in
/// row-major order on ties) and the channel with the largest mean, e.g.
/// "bright region center, red dominant", or "neutral color" when the channel
/// means are within 0.02.
pub fn mock_caption(image: &RepImage) -> String {
    let px = &image.pixels;
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return "uniform dark image".into();
    }
    let mut cells = [0.0f64; 9];
    for (gy, row) in cells.chunks_mut(3).enumerate() {
        let (y0, y1) = (gy * h / 3, ((gy + 1) * h / 3).max(gy * h / 3 + 1).min(h));
        for (gx, cell) in row.iter_mut().enumerate() {
            let (x0, x1) = (gx * w / 3, ((gx + 1) * w / 3).max(gx * w / 3 + 1).min(w));
            *cell = px.slice(s![y0..y1, x0..x1, ..]).mean().unwrap_or(0.0);
        }
    }
    let max = cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = cells.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = px.mean().unwrap_or(0.0);
    if max - min < UNIFORM_SPREAD {
        return if mean < 0.5 { "uniform dark image" } else { "uniform bright image" }.into();
    }
    let brightest = cells.iter().position(|&c| c == max).unwrap_or(4);
    let channel_means: Vec<f64> = (0..3).map(|c| px.index_axis(Axis(2), c).mean().unwrap_or(0.0)).collect();
    let cmax = channel_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cmin = channel_means.iter().copied().fold(f64::INFINITY, f64::min);
    let color = if cmax - cmin < NEUTRAL_SPREAD {
        "neutral color".to_string()
    } else {
        let c = channel_means.iter().position(|&m| m == cmax).unwrap_or(0);
        format!("{} dominant", CHANNEL_NAMES[c])
    };
    format!("bright region {}, {color}", CELL_NAMES[brightest])
}

/// Class whose name hash is nearest the image content hash.
///
/// Both hashes are the first 8 bytes (big-endian) of SHA-256, of the class
/// name's UTF-8 bytes and of [`RepImage::to_rgb8`] respectively. Ties go to
/// the earlier class.
pub fn mock_recognition(image: &RepImage, class_list: &[String]) -> Option<String> {
    let target = sha256_u64(&image.to_rgb8());
    class_list
        .iter()
        .min_by_key(|c| sha256_u64(c.as_bytes()).abs_diff(target))
        .cloned()
}

/// Offline backend: recognition prompts get [`mock_recognition`], every other
/// prompt gets [`mock_caption`].
#[derive(Debug, Default)]
pub struct MockBackend {
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl LlmBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &CaptionRequest) -> Result<LlmResponse> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let text = match classes_from_prompt(&request.prompt) {
            Some(classes) => mock_recognition(&request.image, &classes).unwrap_or_default(),
            None => mock_caption(&request.image),
        };
        Ok(LlmResponse {
            text,
            backend: self.id().to_string(),
            latency_ms: 0,
            usage: None,
        })
    }
}
