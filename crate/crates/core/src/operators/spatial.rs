//! Per-plane resampling: rotation and zoom about the plane center.
//!
//! Both transforms are inverse-mapped: every output pixel looks up its source
//! location, and source locations outside the plane read as zero.

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

impl Interpolation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Interpolation::Nearest => 0,
            Interpolation::Bilinear => 1,
        }
    }

    pub(crate) fn from_code(code: f64) -> Option<Self> {
        if code == 0.0 {
            Some(Interpolation::Nearest)
        } else if code == 1.0 {
            Some(Interpolation::Bilinear)
        } else {
            None
        }
    }
}

fn fetch(src: &ArrayView2<'_, f32>, row: isize, col: isize) -> f32 {
    let (h, w) = src.dim();
    if row < 0 || col < 0 || row >= h as isize || col >= w as isize {
        0.0
    } else {
        src[[row as usize, col as usize]]
    }
}

fn sample(src: &ArrayView2<'_, f32>, row: f64, col: f64, interp: Interpolation) -> f32 {
    match interp {
        Interpolation::Nearest => {
            // round half up, so ties resolve the same way on both axes
            let r = (row + 0.5).floor() as isize;
            let c = (col + 0.5).floor() as isize;
            fetch(src, r, c)
        }
        Interpolation::Bilinear => {
            let r0 = row.floor();
            let c0 = col.floor();
            let fr = (row - r0) as f32;
            let fc = (col - c0) as f32;
            let (r0, c0) = (r0 as isize, c0 as isize);
            if fr == 0.0 && fc == 0.0 {
                return fetch(src, r0, c0);
            }
            let top = fetch(src, r0, c0) * (1.0 - fc) + fetch(src, r0, c0 + 1) * fc;
            let bottom = fetch(src, r0 + 1, c0) * (1.0 - fc) + fetch(src, r0 + 1, c0 + 1) * fc;
            top * (1.0 - fr) + bottom * fr
        }
    }
}

/// Rotate a plane counter-clockwise by `theta_deg` about its center.
pub(crate) fn rotate_plane(
    src: ArrayView2<'_, f32>,
    mut dst: ArrayViewMut2<'_, f32>,
    theta_deg: f64,
    interp: Interpolation,
) {
    let (h, w) = src.dim();
    let (sin, cos) = exact_sin_cos(theta_deg);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    for i in 0..h {
        for j in 0..w {
            // y axis points up so positive angles turn counter-clockwise on screen
            let x = j as f64 - cx;
            let y = cy - i as f64;
            let xs = cos * x + sin * y;
            let ys = -sin * x + cos * y;
            dst[[i, j]] = sample(&src, cy - ys, xs + cx, interp);
        }
    }
}

/// sin/cos with exact values at multiples of 90°.
fn exact_sin_cos(theta_deg: f64) -> (f64, f64) {
    let quarter = theta_deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        theta_deg.to_radians().sin_cos()
    }
}

/// Zoom a plane by `factor` about its center, keeping its size.
pub(crate) fn scale_plane(
    src: ArrayView2<'_, f32>,
    mut dst: ArrayViewMut2<'_, f32>,
    factor: f64,
    interp: Interpolation,
) {
    let (h, w) = src.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    for i in 0..h {
        for j in 0..w {
            let row = cy + (i as f64 - cy) / factor;
            let col = cx + (j as f64 - cx) / factor;
            dst[[i, j]] = sample(&src, row, col, interp);
        }
    }
}
