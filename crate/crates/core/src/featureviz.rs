//! Feature maps to images: channel reduction, 8-bit normalization, grids and
//! PNG export.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma, RgbImage};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hooks::FeatureMapCapture;
use crate::tensor::ActivationTensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VizError {
    #[error("channel {index} out of range for {channels} channels")]
    ChannelOutOfRange { index: usize, channels: usize },
    #[error("map contains non-finite values")]
    NonFiniteInput,
    #[error("tile {index} is {got:?}, expected {expected:?}")]
    SizeMismatch {
        index: usize,
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("png encoding failed: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionMethod {
    #[default]
    Mean,
    AbsMean,
    L2Norm,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionSpec {
    pub method: ReductionMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_index: Option<usize>,
}

impl ReductionSpec {
    pub fn mean() -> Self {
        Self::default()
    }

    pub fn of(method: ReductionMethod) -> Self {
        Self {
            method,
            channel_index: None,
        }
    }

    pub fn channel(index: usize) -> Self {
        Self {
            method: ReductionMethod::Channel,
            channel_index: Some(index),
        }
    }

    /// Parse the CLI form: `mean`, `abs_mean`, `l2`, `l2_norm` or `channel:k`.
    pub fn parse(text: &str) -> Result<Self, VizError> {
        match text {
            "mean" => Ok(Self::of(ReductionMethod::Mean)),
            "abs_mean" => Ok(Self::of(ReductionMethod::AbsMean)),
            "l2" | "l2_norm" => Ok(Self::of(ReductionMethod::L2Norm)),
            _ => text
                .strip_prefix("channel:")
                .and_then(|k| k.parse().ok())
                .map(Self::channel)
                .ok_or_else(|| VizError::Invalid(format!("unknown reduction `{text}`"))),
        }
    }

    fn validate(&self, channels: usize) -> Result<(), VizError> {
        match (self.method, self.channel_index) {
            (ReductionMethod::Channel, None) => {
                Err(VizError::Invalid("method `channel` needs channel_index".into()))
            }
            (ReductionMethod::Channel, Some(index)) if index >= channels => {
                Err(VizError::ChannelOutOfRange { index, channels })
            }
            (ReductionMethod::Channel, Some(_)) => Ok(()),
            (_, Some(_)) => Err(VizError::Invalid(
                "channel_index is only valid with method `channel`".into(),
            )),
            (_, None) => Ok(()),
        }
    }
}

/// One H×W map per batch item.
pub fn reduce_channels(t: &ActivationTensor, spec: &ReductionSpec) -> Result<Vec<Array2<f32>>, VizError> {
    let [_, channels, _, _] = t.shape();
    spec.validate(channels)?;
    let n = channels as f32;
    Ok(t.array()
        .outer_iter()
        .map(|item| match spec.method {
            ReductionMethod::Channel => item
                .index_axis(Axis(0), spec.channel_index.unwrap_or(0))
                .to_owned(),
            ReductionMethod::Mean => item.sum_axis(Axis(0)) / n,
            ReductionMethod::AbsMean => item.mapv(f32::abs).sum_axis(Axis(0)) / n,
            ReductionMethod::L2Norm => item.mapv(|v| v * v).sum_axis(Axis(0)).mapv(f32::sqrt),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    #[default]
    #[serde(rename = "minmax")]
    MinMax,
    /// Clip to the `lo`/`hi` percentiles (0..=100) before the affine map.
    Percentile { lo: f64, hi: f64 },
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = (rank - lo as f64) as f32;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn to_u8(v: f32, lo: f32, hi: f32) -> u8 {
    if hi <= lo {
        return 128;
    }
    let scaled = (v.clamp(lo, hi) - lo) / (hi - lo) * 255.0;
    scaled.round().clamp(0.0, 255.0) as u8
}

fn bounds(values: &[f32], mode: NormalizeMode) -> Result<(f32, f32), VizError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(VizError::NonFiniteInput);
    }
    match mode {
        NormalizeMode::MinMax => {
            let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            Ok((lo, hi))
        }
        NormalizeMode::Percentile { lo, hi } => {
            if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
                return Err(VizError::Invalid(format!("bad percentile range ({lo}, {hi})")));
            }
            let mut sorted = values.to_vec();
            sorted.sort_by(f32::total_cmp);
            Ok((percentile(&sorted, lo), percentile(&sorted, hi)))
        }
    }
}

/// Map a real-valued map to 8-bit greyscale. Constant maps become uniform 128.
pub fn normalize_to_image(map: &Array2<f32>, mode: NormalizeMode) -> Result<GrayImage, VizError> {
    let (h, w) = map.dim();
    if h == 0 || w == 0 {
        return Err(VizError::Invalid("empty map".into()));
    }
    let values: Vec<f32> = map.iter().copied().collect();
    let (lo, hi) = bounds(&values, mode)?;
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(map[[y as usize, x as usize]], lo, hi)])
    }))
}

/// Decoded image tensor (B×3×H×W) to 8-bit RGB, one min-max per batch item,
/// batch items laid out left to right.
pub fn tensor_to_rgb(t: &ActivationTensor) -> Result<RgbImage, VizError> {
    let [b, c, h, w] = t.shape();
    if c != 3 {
        return Err(VizError::Invalid(format!("expected 3 channels, got {c}")));
    }
    let mut img = RgbImage::new((w * b) as u32, h as u32);
    for (bi, item) in t.array().outer_iter().enumerate() {
        let values: Vec<f32> = item.iter().copied().collect();
        let (lo, hi) = bounds(&values, NormalizeMode::MinMax)?;
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|ch| to_u8(item[[ch, y, x]], lo, hi));
                img.put_pixel((bi * w + x) as u32, y as u32, image::Rgb(px));
            }
        }
    }
    Ok(img)
}

/// Row-major grid; missing tiles in the last row are black.
pub fn make_grid(images: &[GrayImage], columns: usize) -> Result<GrayImage, VizError> {
    if columns == 0 {
        return Err(VizError::Invalid("columns must be >= 1".into()));
    }
    let first = images
        .first()
        .ok_or_else(|| VizError::Invalid("no images to arrange".into()))?;
    let (tw, th) = first.dimensions();
    for (index, img) in images.iter().enumerate() {
        if img.dimensions() != (tw, th) {
            return Err(VizError::SizeMismatch {
                index,
                expected: (tw, th),
                got: img.dimensions(),
            });
        }
    }
    let rows = images.len().div_ceil(columns);
    let mut grid = GrayImage::new(tw * columns as u32, th * rows as u32);
    for (i, img) in images.iter().enumerate() {
        let (r, c) = ((i / columns) as u32, (i % columns) as u32);
        image::imageops::replace(&mut grid, img, (c * tw) as i64, (r * th) as i64);
    }
    Ok(grid)
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>, VizError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| VizError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>, VizError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| VizError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Metadata written next to a capture image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSidecar {
    pub path: String,
    pub step: usize,
    /// Which forward pass of the step (0 unconditional, 1 conditional under CFG).
    pub forward_index: usize,
    pub phase: String,
    pub reduction: ReductionSpec,
}

impl CaptureSidecar {
    pub fn for_capture(capture: &FeatureMapCapture, reduction: ReductionSpec) -> Self {
        Self {
            path: capture.path.to_string(),
            step: capture.step_index,
            forward_index: capture.forward_index,
            phase: capture.phase.as_str().into(),
            reduction,
        }
    }
}

/// Reduce and normalize each capture (first batch item), then arrange them in
/// a grid. `columns` defaults to a near-square layout.
pub fn captures_to_grid(
    captures: &[FeatureMapCapture],
    reduction: &ReductionSpec,
    mode: NormalizeMode,
    columns: Option<usize>,
) -> Result<GrayImage, VizError> {
    let tiles = captures
        .iter()
        .map(|c| {
            let maps = reduce_channels(&c.tensor, reduction)?;
            normalize_to_image(&maps[0], mode)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let columns = columns.unwrap_or_else(|| (tiles.len() as f64).sqrt().ceil().max(1.0) as usize);
    make_grid(&tiles, columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    #[test]
    fn single_channel_mean_is_identity() {
        let t = ActivationTensor::new(Array4::from_shape_fn((2, 1, 3, 4), |(b, _, h, w)| {
            (b * 100 + h * 10 + w) as f32 - 3.5
        }))
        .unwrap();
        let maps = reduce_channels(&t, &ReductionSpec::mean()).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[1], t.plane(1, 0).to_owned());
    }

    #[test]
    fn channel_selection_and_range() {
        let t = ActivationTensor::new(Array4::from_shape_fn((1, 3, 2, 2), |(_, c, h, w)| {
            (c * 10 + h * 2 + w) as f32
        }))
        .unwrap();
        let maps = reduce_channels(&t, &ReductionSpec::channel(2)).unwrap();
        assert_eq!(maps[0], array![[20.0, 21.0], [22.0, 23.0]]);
        assert_eq!(
            reduce_channels(&t, &ReductionSpec::channel(3)).unwrap_err(),
            VizError::ChannelOutOfRange { index: 3, channels: 3 }
        );
    }

    #[test]
    fn l2_of_three_four_is_five() {
        let t = ActivationTensor::new(array![[[[3.0f32]], [[4.0]]]]).unwrap();
        let maps = reduce_channels(&t, &ReductionSpec::of(ReductionMethod::L2Norm)).unwrap();
        assert_eq!(maps[0], array![[5.0]]);
        let t = ActivationTensor::new(array![[[[-3.0f32]], [[1.0]]]]).unwrap();
        let maps = reduce_channels(&t, &ReductionSpec::of(ReductionMethod::AbsMean)).unwrap();
        assert_eq!(maps[0], array![[2.0]]);
    }

    #[test]
    fn minmax_endpoints_and_constant() {
        let img = normalize_to_image(&array![[0.0, 1.0]], NormalizeMode::MinMax).unwrap();
        assert_eq!(img.as_raw(), &[0, 255]);
        let img = normalize_to_image(&Array2::from_elem((3, 3), 7.5), NormalizeMode::MinMax).unwrap();
        assert!(img.as_raw().iter().all(|&v| v == 128));
        assert_eq!(
            normalize_to_image(&array![[f32::NAN]], NormalizeMode::MinMax).unwrap_err(),
            VizError::NonFiniteInput
        );
    }

    #[test]
    fn percentile_clips_outlier() {
        // 0..398 plus one huge outlier
        let mut values: Vec<f32> = (0..399).map(|v| v as f32).collect();
        values.push(1.0e6);
        let map = Array2::from_shape_vec((20, 20), values.clone()).unwrap();

        // oracle: linear-interpolated percentiles on the sorted values
        let mut sorted = values.clone();
        sorted.sort_by(f32::total_cmp);
        let at = |p: f64| {
            let r = p / 100.0 * 399.0;
            let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
            sorted[lo] as f64 + (sorted[hi] - sorted[lo]) as f64 * (r - r.floor())
        };
        let (p_lo, p_hi) = (at(1.0), at(99.0));
        assert!((p_lo - 3.99).abs() < 1e-9);
        assert!((p_hi - 395.01).abs() < 1e-9);

        let img = normalize_to_image(&map, NormalizeMode::Percentile { lo: 1.0, hi: 99.0 }).unwrap();
        let raw = img.as_raw();
        assert_eq!(raw[399], 255);
        assert_eq!(raw[0], 0);
        let expected_mid = ((200.0 - p_lo) / (p_hi - p_lo) * 255.0).round() as u8;
        assert_eq!(raw[200], expected_mid);
        // without clipping, minmax crushes everything but the outlier to zero
        let flat = normalize_to_image(&map, NormalizeMode::MinMax).unwrap();
        assert_eq!(flat.as_raw()[200], 0);
        assert!(raw[200] > 100);
    }

    fn tile(v: u8, w: u32, h: u32) -> GrayImage {
        GrayImage::from_pixel(w, h, Luma([v]))
    }

    #[test]
    fn grid_layout() {
        let one = tile(9, 5, 3);
        assert_eq!(make_grid(std::slice::from_ref(&one), 1).unwrap(), one);

        let four: Vec<_> = (1..=4).map(|v| tile(v, 16, 16)).collect();
        assert_eq!(make_grid(&four, 2).unwrap().dimensions(), (32, 32));

        let five: Vec<_> = (1..=5).map(|v| tile(v * 10, 4, 4)).collect();
        let g = make_grid(&five, 3).unwrap();
        assert_eq!(g.dimensions(), (12, 8));
        assert_eq!(g.get_pixel(9, 5)[0], 0);
        assert_eq!(g.get_pixel(5, 5)[0], 50);

        assert!(matches!(
            make_grid(&[tile(1, 2, 2), tile(1, 3, 2)], 2),
            Err(VizError::SizeMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn grid_tiles_crop_back_exactly() {
        let tiles: Vec<_> = (0..7u8)
            .map(|i| GrayImage::from_fn(3, 2, |x, y| Luma([i * 30 + (y * 3 + x) as u8])))
            .collect();
        let g = make_grid(&tiles, 3).unwrap();
        for (i, t) in tiles.iter().enumerate() {
            let (r, c) = ((i / 3) as u32, (i % 3) as u32);
            let crop = image::imageops::crop_imm(&g, c * 3, r * 2, 3, 2).to_image();
            assert_eq!(&crop, t);
        }
    }

    #[test]
    fn rgb_conversion_per_item() {
        let t = ActivationTensor::new(Array4::from_shape_fn((2, 3, 2, 2), |(b, c, h, w)| {
            (b as f32 + 1.0) * (c * 4 + h * 2 + w) as f32
        }))
        .unwrap();
        let img = tensor_to_rgb(&t).unwrap();
        assert_eq!(img.dimensions(), (4, 2));
        // channel values 0, 4, 8 out of 0..=11
        assert_eq!(img.get_pixel(0, 0).0, [0, 93, 185]);
        assert_eq!(img.get_pixel(2, 0).0, [0, 93, 185]);
        assert_eq!(img.get_pixel(3, 1).0[2], 255);
    }

    #[test]
    fn png_round_trip() {
        let img = GrayImage::from_fn(7, 5, |x, y| Luma([(x * 31 + y * 7) as u8]));
        let bytes = encode_png_gray(&img).unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert_eq!(back, img);
    }

    #[test]
    fn reduction_spec_parsing() {
        assert_eq!(ReductionSpec::parse("l2").unwrap().method, ReductionMethod::L2Norm);
        assert_eq!(ReductionSpec::parse("channel:4").unwrap(), ReductionSpec::channel(4));
        assert!(ReductionSpec::parse("channel:x").is_err());
        assert!(ReductionSpec::parse("median").is_err());
    }
}
