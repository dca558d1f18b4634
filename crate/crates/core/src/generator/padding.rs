use ndarray::{s, Array3};

/// Original size of an image padded by [`pad_to_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

/// Mirror index without repeating the edge sample (`reflect` mode), valid for
/// any offset past the end.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflection-pads the bottom and right edges up to multiples of `factor`.
pub fn pad_to_grid(image: &Array3<f64>, factor: usize) -> (Array3<f64>, CropRecord) {
    let factor = factor.max(1);
    let (h, w, _) = image.dim();
    pad_to(image, h.div_ceil(factor) * factor, w.div_ceil(factor) * factor)
}

/// Reflection-pads the bottom and right edges to exactly `height` x `width`
/// (each at least the image's own size).
pub fn pad_to(image: &Array3<f64>, height: usize, width: usize) -> (Array3<f64>, CropRecord) {
    let (h, w, c) = image.dim();
    assert!(height >= h && width >= w, "pad target smaller than image");
    let record = CropRecord { height: h, width: w };
    if (height, width) == (h, w) || h == 0 || w == 0 {
        return (image.clone(), record);
    }
    let padded = Array3::from_shape_fn((height, width, c), |(y, x, ch)| image[[reflect(y, h), reflect(x, w), ch]]);
    (padded, record)
}

pub fn crop(image: &Array3<f64>, record: &CropRecord) -> Array3<f64> {
    image.slice(s![..record.height, ..record.width, ..]).to_owned()
}
