#![allow(dead_code)]

use evrep::events_io::{Event, EventStream};
use evrep::representation::encode_tencode;
use evrep::trainer::TrainPair;
use ndarray::Array3;

/// Square outline events drifting right over time, plus the matching RGB
/// frame: a filled square of `color` on black.
pub fn square_pair(id: &str, size: usize, x0: usize, y0: usize, side: usize, color: [f64; 3]) -> TrainPair {
    let mut events = Vec::new();
    let mut t = 0;
    for k in 0..side {
        for (x, y) in [(x0 + k, y0), (x0 + k, y0 + side - 1), (x0, y0 + k), (x0 + side - 1, y0 + k)] {
            events.push(Event::new(x as u32, y as u32, t, (x + y) % 2 == 0));
            t += 10;
        }
    }
    let stream = EventStream::new(events, size as u32, size as u32).unwrap();
    let (t0, t1) = stream.full_window();
    let input = encode_tencode(&stream, t0, t1).unwrap().pixels;
    let rgb = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        if (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y) {
            color[c]
        } else {
            0.0
        }
    });
    TrainPair {
        id: id.to_string(),
        input,
        rgb,
    }
}

pub fn four_pairs(size: usize) -> Vec<TrainPair> {
    vec![
        square_pair("a", size, 2, 2, 6, [1.0, 0.2, 0.2]),
        square_pair("b", size, 7, 3, 7, [0.2, 1.0, 0.2]),
        square_pair("c", size, 3, 8, 5, [0.2, 0.2, 1.0]),
        square_pair("d", size, 8, 8, 6, [0.9, 0.9, 0.9]),
    ]
}
