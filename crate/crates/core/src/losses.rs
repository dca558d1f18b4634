//! Semantic consistency, structural fidelity and dual alignment losses.
//!
//! - Semantic: `1 - |We ∩ Wr| / |We ∪ Wr|` over the word sets of two captions.
//! - Fidelity: mean squared difference of Sobel gradient-magnitude maps.
//! - Dual: `lambda * semantic + gamma * fidelity`.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

/// Added under the square root so the magnitude is differentiable at zero.
pub const SOBEL_EPS: f64 = 1e-12;

/// ITU-R BT.601 luma weights.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("invalid loss weights (lambda={lambda}, gamma={gamma}): {reason}")]
    InvalidWeights {
        lambda: f64,
        gamma: f64,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordSet(BTreeSet<String>);

impl WordSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn intersection_len(&self, other: &WordSet) -> usize {
        self.0.intersection(&other.0).count()
    }

    pub fn union_len(&self, other: &WordSet) -> usize {
        self.0.union(&other.0).count()
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize_words(text: &str) -> WordSet {
    WordSet(
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}

/// Jaccard distance of two word sets; two empty sets are identical (0).
pub fn jaccard_distance(a: &WordSet, b: &WordSet) -> f64 {
    let union = a.union_len(b);
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection_len(b) as f64 / union as f64
}

pub fn jaccard_loss(text_e: &str, text_r: &str) -> f64 {
    jaccard_distance(&tokenize_words(text_e), &tokenize_words(text_r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeSource {
    /// Generated representation.
    Output,
    /// Paired RGB frame.
    Target,
}

/// Sobel gradient magnitude, `(height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub values: Array2<f64>,
    pub source: EdgeSource,
}

struct SobelParts {
    gx: Array2<f64>,
    gy: Array2<f64>,
    mag: Array2<f64>,
}

fn grayscale(image: ArrayView3<f64>) -> Array2<f64> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        GRAY_WEIGHTS[0] * image[[y, x, 0]]
            + GRAY_WEIGHTS[1] * image[[y, x, 1]]
            + GRAY_WEIGHTS[2] * image[[y, x, 2]]
    })
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Replicate-padded 3x3 cross-correlation taps around `(y, x)`.
fn taps(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..3).flat_map(move |ky| {
        (0..3).map(move |kx| {
            let sy = clamp_index(y as isize + ky as isize - 1, h);
            let sx = clamp_index(x as isize + kx as isize - 1, w);
            (ky, kx, sy, sx)
        })
    })
}

fn sobel_parts(image: ArrayView3<f64>) -> SobelParts {
    let gray = grayscale(image);
    let (h, w) = gray.dim();
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (ky, kx, py, px) in taps(y, x, h, w) {
                let v = gray[[py, px]];
                sx += SOBEL_X[ky][kx] * v;
                sy += SOBEL_Y[ky][kx] * v;
            }
            gx[[y, x]] = sx;
            gy[[y, x]] = sy;
        }
    }
    let mag = ndarray::Zip::from(&gx)
        .and(&gy)
        .map_collect(|&a, &b| (a * a + b * b + SOBEL_EPS).sqrt());
    SobelParts { gx, gy, mag }
}

/// Edge magnitude of an `(H, W, 3)` image.
///
/// The image is converted to grayscale, correlated with the horizontal and
/// vertical Sobel kernels (borders replicate the nearest pixel) and combined as
/// `sqrt(gx^2 + gy^2 + eps)`.
pub fn sobel_edge_map(image: ArrayView3<f64>) -> EdgeMap {
    EdgeMap {
        values: sobel_parts(image).mag,
        source: EdgeSource::Output,
    }
}

fn check_same(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<(), LossError> {
    if a.shape() != b.shape() || a.shape().get(2) != Some(&3) {
        return Err(LossError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

pub fn fidelity_loss(output: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<f64, LossError> {
    check_same(output, target)?;
    let o = sobel_parts(output).mag;
    let t = sobel_parts(target).mag;
    Ok(mean_sq_diff(&o, &t))
}

fn mean_sq_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    ndarray::Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
        / n
}

/// Fidelity loss and its gradient with respect to `output`.
pub fn fidelity_loss_and_grad(
    output: ArrayView3<f64>,
    target: ArrayView3<f64>,
) -> Result<(f64, Array3<f64>), LossError> {
    check_same(output, target)?;
    let o = sobel_parts(output);
    let t = sobel_parts(target).mag;
    let loss = mean_sq_diff(&o.mag, &t);
    let (h, w) = o.mag.dim();
    let n = (h * w) as f64;
    let mut dgray = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let dmag = 2.0 * (o.mag[[y, x]] - t[[y, x]]) / n;
            let dgx = dmag * o.gx[[y, x]] / o.mag[[y, x]];
            let dgy = dmag * o.gy[[y, x]] / o.mag[[y, x]];
            for (ky, kx, py, px) in taps(y, x, h, w) {
                dgray[[py, px]] += SOBEL_X[ky][kx] * dgx + SOBEL_Y[ky][kx] * dgy;
            }
        }
    }
    let grad = Array3::from_shape_fn((h, w, 3), |(y, x, c)| GRAY_WEIGHTS[c] * dgray[[y, x]]);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_semantic: f64,
    pub gamma_fidelity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_semantic: 1.0,
            gamma_fidelity: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_semantic: f64, gamma_fidelity: f64) -> Result<Self, LossError> {
        let w = Self {
            lambda_semantic,
            gamma_fidelity,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let (lambda, gamma) = (self.lambda_semantic, self.gamma_fidelity);
        let err = |reason| Err(LossError::InvalidWeights { lambda, gamma, reason });
        if !lambda.is_finite() || !gamma.is_finite() {
            return err("weights must be finite");
        }
        if lambda < 0.0 || gamma < 0.0 {
            return err("weights must be non-negative");
        }
        if lambda == 0.0 && gamma == 0.0 {
            return err("at least one weight must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualLossBreakdown {
    pub semantic: f64,
    pub fidelity: f64,
    pub dual: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl DualLossBreakdown {
    /// `dual - (lambda * semantic + gamma * fidelity)`; zero by construction.
    pub fn residual(&self) -> f64 {
        self.dual - (self.lambda * self.semantic + self.gamma * self.fidelity)
    }
}

pub fn dual_loss(semantic: f64, fidelity: f64, w: &LossWeights) -> Result<DualLossBreakdown, LossError> {
    w.validate()?;
    Ok(DualLossBreakdown {
        semantic,
        fidelity,
        dual: w.lambda_semantic * semantic + w.gamma_fidelity * fidelity,
        lambda: w.lambda_semantic,
        gamma: w.gamma_fidelity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn words(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizer() {
        let set = tokenize_words("A red Car.");
        assert_eq!(set.iter().collect::<Vec<_>>(), words(&["a", "car", "red"]));
        assert!(tokenize_words("").is_empty());
        assert!(tokenize_words(" ,.;").is_empty());
        assert_eq!(tokenize_words("car car CAR").len(), 1);
        assert_eq!(tokenize_words("top-left 3x3").iter().collect::<Vec<_>>(), words(&["3x3", "left", "top"]));
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_loss("a red car", "a blue car"), 0.5);
        assert_eq!(jaccard_loss("same words", "words same"), 0.0);
        assert_eq!(jaccard_loss("cat", "dog"), 1.0);
        assert_eq!(jaccard_loss("", ""), 0.0);
        assert_eq!(jaccard_loss("", "dog"), 1.0);
    }

    fn step_image(h: usize, w: usize, at: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(_, x, _)| if x >= at { 1.0 } else { 0.0 })
    }

    #[test]
    fn sobel_constant_image_vanishes() {
        let img = Array3::from_elem((6, 7, 3), 0.37);
        let g = sobel_edge_map(img.view());
        assert!(g.values.iter().all(|&v| v <= 1e-6));
    }

    #[test]
    fn sobel_step_edge() {
        let img = step_image(6, 8, 4);
        let g = sobel_edge_map(img.view()).values;
        for y in 1..5 {
            assert_abs_diff_eq!(g[[y, 3]], 4.0, epsilon = 1e-9);
            assert_abs_diff_eq!(g[[y, 4]], 4.0, epsilon = 1e-9);
            assert!(g[[y, 1]] < 1e-5);
            assert!(g[[y, 6]] < 1e-5);
        }
    }

    #[test]
    fn fidelity_examples() {
        let a = step_image(5, 5, 2);
        assert!(fidelity_loss(a.view(), a.view()).unwrap() <= 1e-12);
        let c1 = Array3::from_elem((5, 5, 3), 0.2);
        let c2 = Array3::from_elem((5, 5, 3), 0.9);
        assert!(fidelity_loss(c1.view(), c2.view()).unwrap() <= 1e-10);
        let small = Array3::zeros((4, 5, 3));
        assert!(matches!(
            fidelity_loss(a.view(), small.view()),
            Err(LossError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn dual_examples() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(dual_loss(0.5, 0.2, &w).unwrap().dual, 0.7, epsilon = 1e-15);
        let w = LossWeights::new(1.0, 0.0).unwrap();
        assert_eq!(dual_loss(0.3, 5.0, &w).unwrap().dual, 0.3);
        let w = LossWeights::new(2.0, 0.5).unwrap();
        let b = dual_loss(0.4, 0.8, &w).unwrap();
        assert_abs_diff_eq!(b.dual, 1.2, epsilon = 1e-15);
        assert_eq!(b.residual(), 0.0);
        assert!(matches!(
            LossWeights::new(0.0, 0.0),
            Err(LossError::InvalidWeights { .. })
        ));
        assert!(LossWeights::new(-1.0, 1.0).is_err());
    }
}
