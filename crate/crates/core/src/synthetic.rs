//! Procedural test scenes, so fixtures need no binary files.

use crate::types::ImageTensor;

/// A pale blob (the bear) standing on a white ice shelf under a blue sky.
pub fn polar_bear_scene(size: usize) -> ImageTensor {
    let s = size as f32;
    ImageTensor::from_fn(size, size, |y, x, c| {
        let (fy, fx) = (y as f32 / s, x as f32 / s);
        let sky = [-0.4, 0.1, 0.8][c] + 0.3 * fy;
        let ice = [0.85, 0.9, 0.95][c] - 0.2 * (fx - 0.5).abs();
        let mut v = if fy > 0.62 { ice } else { sky };
        let (dy, dx) = ((fy - 0.5) / 0.18, (fx - 0.45) / 0.28);
        if dy * dy + dx * dx < 1.0 {
            v = [0.7, 0.65, 0.5][c] - 0.25 * dy;
        }
        let (hy, hx) = ((fy - 0.34) / 0.1, (fx - 0.7) / 0.1);
        if hy * hy + hx * hx < 1.0 {
            v = [0.75, 0.7, 0.55][c];
        }
        v.clamp(-1.0, 1.0)
    })
    .expect("size is valid")
}

/// Smooth colour gradients with a few low-frequency ripples.
pub fn gradient_scene(size: usize) -> ImageTensor {
    let s = size as f32;
    ImageTensor::from_fn(size, size, |y, x, c| {
        let (fy, fx) = (y as f32 / s, x as f32 / s);
        let phase = c as f32 * 2.1;
        (0.6 * (3.0 * fx + phase).sin() * (2.0 * fy).cos() + 0.3 * (fy - 0.5)).clamp(-1.0, 1.0)
    })
    .expect("size is valid")
}
