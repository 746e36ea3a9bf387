//! Blue-to-red attention colour scale.
//!
//! Piecewise linear through five stops: 0.0 blue, 0.25 cyan, 0.5 green,
//! 0.75 yellow, 1.0 red. Values outside `[0,1]` are clamped.

use image::Rgb;

pub const STOPS: [(f64, [u8; 3]); 5] = [
    (0.0, [0, 0, 255]),
    (0.25, [0, 255, 255]),
    (0.5, [0, 255, 0]),
    (0.75, [255, 255, 0]),
    (1.0, [255, 0, 0]),
];

pub fn color(weight: f64) -> Rgb<u8> {
    let w = if weight.is_nan() { 0.0 } else { weight.clamp(0.0, 1.0) };
    for pair in STOPS.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if w <= hi.0 {
            let t = (w - lo.0) / (hi.0 - lo.0);
            let mix = |a: u8, b: u8| (f64::from(a) + (f64::from(b) - f64::from(a)) * t).round() as u8;
            return Rgb([mix(lo.1[0], hi.1[0]), mix(lo.1[1], hi.1[1]), mix(lo.1[2], hi.1[2])]);
        }
    }
    Rgb(STOPS[4].1)
}
