//! Greyscale erosion and dilation with a square window and replicate padding.
//!
//! The square window is separable, so each filter runs as a 1-D pass over
//! rows followed by a 1-D pass over columns.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphologyKind {
    Erode,
    Dilate,
}

fn pick(kind: MorphologyKind, a: f32, b: f32) -> f32 {
    match kind {
        MorphologyKind::Erode => a.min(b),
        MorphologyKind::Dilate => a.max(b),
    }
}

/// Filter one line in place of `out`, reading `len` elements of `src` through `at`.
fn filter_line(
    kind: MorphologyKind,
    radius: usize,
    len: usize,
    at: impl Fn(usize) -> f32,
    mut put: impl FnMut(usize, f32),
) {
    for i in 0..len {
        let lo = i.saturating_sub(radius);
        // replicate padding: indices past the edge clamp to the edge
        let hi = (i + radius).min(len - 1);
        let mut acc = at(lo);
        for k in lo + 1..=hi {
            acc = pick(kind, acc, at(k));
        }
        put(i, acc);
    }
}

pub(crate) fn morph_plane(
    src: ArrayView2<'_, f32>,
    mut dst: ArrayViewMut2<'_, f32>,
    kind: MorphologyKind,
    kernel: usize,
) {
    debug_assert!(kernel % 2 == 1);
    let radius = kernel / 2;
    let (h, w) = src.dim();
    let mut rows = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        filter_line(kind, radius, w, |c| src[[r, c]], |c, v| rows[[r, c]] = v);
    }
    for c in 0..w {
        filter_line(kind, radius, h, |r| rows[[r, c]], |r, v| dst[[r, c]] = v);
    }
}
