//! Sinusoidal stripe gratings composited into the dark background of a digit.

use std::f64::consts::PI;

use crate::dataset::{PLANE, SIDE};

/// Grating period in pixels.
pub const STRIPE_PERIOD: f64 = 7.0;
/// Peak stripe intensity; also the largest change compositing can make to any pixel.
pub const STRIPE_BLEND_BOUND: f32 = 0.6;
pub const NUM_ANGLES: u8 = 10;

/// `π j / 5`.
pub fn stripe_angle(j: u8) -> f64 {
    PI * j as f64 / 5.0
}

/// `g(x, y) = ½(1 + sin(2π(x cos θ + y sin θ)/T))` on the 28×28 grid, `x` the column.
pub fn stripe_pattern(theta: f64) -> [f32; PLANE] {
    let (s, c) = theta.sin_cos();
    let mut g = [0.0f32; PLANE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let phase = 2.0 * PI * (x as f64 * c + y as f64 * s) / STRIPE_PERIOD;
            g[y * SIDE + x] = (0.5 * (1.0 + phase.sin())) as f32;
        }
    }
    g
}

/// Precomputed patterns for every angle index.
pub fn all_patterns() -> Vec<[f32; PLANE]> {
    (0..NUM_ANGLES).map(|j| stripe_pattern(stripe_angle(j))).collect()
}

/// `pixel = max(digit, 0.6 g)`, in place on one channel plane.
pub fn composite(plane: &mut [f32], pattern: &[f32; PLANE]) {
    for (p, &g) in plane.iter_mut().zip(pattern) {
        *p = p.max(STRIPE_BLEND_BOUND * g);
    }
}
