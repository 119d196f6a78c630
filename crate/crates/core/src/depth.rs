//! Depth representation pipeline.
//!
//! Turns a dense per-pixel depth field into the two representations fed to
//! the decision-maker: a small textual depth matrix (center-pixel
//! downsampling of the raw values) and a pseudo-color depth map (percentile
//! clipping, min-max normalization, reversed-turbo rendering). Also provides
//! the integer-factor box filter used to shrink camera frames before depth
//! estimation.

use crate::turbo::TURBO_LUT;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for values nominally in `[0, 1]` arriving with float noise.
const RANGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("depth field is invalid: {0}")]
    InvalidField(String),
    #[error("frame is {got_h}x{got_w} but target is {want_h}x{want_w}; reduction factor must be a positive integer")]
    NonIntegerFactor {
        got_h: u32,
        got_w: u32,
        want_h: u32,
        want_w: u32,
    },
    #[error("downsampling ratio must be at least 1")]
    ZeroRatio,
    #[error("downsampling ratio {ratio} exceeds field dimensions {height}x{width}")]
    RatioTooLarge {
        ratio: usize,
        height: usize,
        width: usize,
    },
    #[error("depth field is empty")]
    EmptyField,
    #[error("normalized depth value {value} at index {index} is outside [0, 1]")]
    OutOfRangeValue { value: f64, index: usize },
    #[error("percentile bounds must satisfy 0 <= l < u <= 100, got l={l}, u={u}")]
    BadPercentiles { l: f64, u: f64 },
}

/// Whether depth values are absolute meters or only relatively meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthUnit {
    Meters,
    Relative,
}

impl DepthUnit {
    /// Label used in the textual matrix header.
    pub fn label(&self) -> &'static str {
        match self {
            DepthUnit::Meters => "meters",
            DepthUnit::Relative => "relative 0\u{2013}1",
        }
    }
}

/// Dense per-pixel depth grid, row-major, origin top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthField {
    height: usize,
    width: usize,
    values: Vec<f64>,
    unit: DepthUnit,
}

impl DepthField {
    /// Builds a field, validating shape and that every value is finite and
    /// non-negative.
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        unit: DepthUnit,
    ) -> Result<Self, PipelineError> {
        if height == 0 || width == 0 {
            return Err(PipelineError::InvalidField(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(PipelineError::InvalidField(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(PipelineError::InvalidField(format!(
                "value {} at index {i} is not a finite non-negative number",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            unit,
        })
    }

    pub fn constant(
        height: usize,
        width: usize,
        value: f64,
        unit: DepthUnit,
    ) -> Result<Self, PipelineError> {
        Self::new(height, width, vec![value; height * width], unit)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn unit(&self) -> DepthUnit {
        self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Downsampled depth grid; every element is a verbatim copy of one source
/// pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub unit: DepthUnit,
    /// The downsampling ratio the matrix was produced with.
    pub source_ratio: usize,
}

impl DepthMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Minimum value of one column.
    pub fn column_min(&self, col: usize) -> f64 {
        (0..self.rows)
            .map(|r| self.get(r, col))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Pseudo-color rendering of a normalized depth field, 8-bit RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<[u8; 3]>,
}

impl DepthMap {
    pub fn to_image(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.pixels.iter().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            img.put_pixel(x, y, image::Rgb(*px));
        }
        img
    }
}

/// Color mode for map rendering. Only reversed turbo is defined: near
/// renders red, far renders blue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ColorMode {
    #[default]
    TurboReversed,
}

/// Rendering parameters for the depth map path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub color_mode: ColorMode,
    /// Lower clipping percentile, in `[0, 100)`.
    pub lower_percentile: f64,
    /// Upper clipping percentile, in `(lower, 100]`.
    pub upper_percentile: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            color_mode: ColorMode::TurboReversed,
            lower_percentile: 1.0,
            upper_percentile: 99.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let (l, u) = (self.lower_percentile, self.upper_percentile);
        if !(0.0..100.0).contains(&l) || !(l < u && u <= 100.0) {
            return Err(PipelineError::BadPercentiles { l, u });
        }
        Ok(())
    }
}

/// Frame geometry parameters: target frame size and matrix downsampling
/// ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub target_height: u32,
    pub target_width: u32,
    pub downsample_ratio: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            target_height: 360,
            target_width: 640,
            downsample_ratio: 40,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.downsample_ratio == 0 {
            return Err(PipelineError::ZeroRatio);
        }
        if self.target_height == 0 || self.target_width == 0 {
            return Err(PipelineError::InvalidField(
                "target dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Shrinks a frame to the target size by averaging the source block behind
/// each output pixel (box filter, round to nearest). The source dimensions
/// must be integer multiples of the target dimensions.
pub fn preprocess_rgb(image: &RgbImage, cfg: &PipelineConfig) -> Result<RgbImage, PipelineError> {
    cfg.validate()?;
    let (w0, h0) = image.dimensions();
    let (h, w) = (cfg.target_height, cfg.target_width);
    if h0 < h || w0 < w || h0 % h != 0 || w0 % w != 0 {
        return Err(PipelineError::NonIntegerFactor {
            got_h: h0,
            got_w: w0,
            want_h: h,
            want_w: w,
        });
    }
    let fy = h0 / h;
    let fx = w0 / w;
    if fx == 1 && fy == 1 {
        return Ok(image.clone());
    }
    let block = fx * fy;
    let mut out = RgbImage::new(w, h);
    for oy in 0..h {
        for ox in 0..w {
            let mut sums = [0u32; 3];
            for sy in 0..fy {
                for sx in 0..fx {
                    let px = image.get_pixel(ox * fx + sx, oy * fy + sy);
                    for c in 0..3 {
                        sums[c] += px.0[c] as u32;
                    }
                }
            }
            // Round half up; channel sums are non-negative.
            let avg = sums.map(|s| ((s + block / 2) / block) as u8);
            out.put_pixel(ox, oy, image::Rgb(avg));
        }
    }
    Ok(out)
}

/// Retains the center pixel of each `r x r` patch. Trailing rows/columns
/// that do not fill a whole patch are discarded. The patch center index is
/// `(i*r + r/2, j*r + r/2)` with floor division, so for even `r` the pick
/// sits half a pixel low-right of the geometric center.
pub fn downsample(field: &DepthField, ratio: usize) -> Result<DepthMatrix, PipelineError> {
    if ratio == 0 {
        return Err(PipelineError::ZeroRatio);
    }
    if ratio > field.height || ratio > field.width {
        return Err(PipelineError::RatioTooLarge {
            ratio,
            height: field.height,
            width: field.width,
        });
    }
    let rows = field.height / ratio;
    let cols = field.width / ratio;
    let half = ratio / 2;
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            values.push(field.get(i * ratio + half, j * ratio + half));
        }
    }
    Ok(DepthMatrix {
        rows,
        cols,
        values,
        unit: field.unit,
        source_ratio: ratio,
    })
}

/// Percentile of already-sorted values, by linear interpolation between
/// closest ranks at fractional index `p/100 * (n-1)`.
fn percentile_of_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let idx = p / 100.0 * (n - 1) as f64;
    let lo = idx.floor() as usize;
    let frac = idx - lo as f64;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
}

/// Clamps every value into the `[P_l, P_u]` percentile band of the field.
/// Returns the clipped field and the thresholds used.
pub fn percentile_clip(
    field: &DepthField,
    lower: f64,
    upper: f64,
) -> Result<(DepthField, (f64, f64)), PipelineError> {
    if !(0.0..=100.0).contains(&lower) || !(0.0..=100.0).contains(&upper) || lower >= upper {
        return Err(PipelineError::BadPercentiles { l: lower, u: upper });
    }
    if field.values.is_empty() {
        return Err(PipelineError::EmptyField);
    }
    let mut sorted = field.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("field values are finite"));
    let p_l = percentile_of_sorted(&sorted, lower);
    let p_u = percentile_of_sorted(&sorted, upper);
    let values = field.values.iter().map(|v| v.clamp(p_l, p_u)).collect();
    let clipped = DepthField {
        height: field.height,
        width: field.width,
        values,
        unit: field.unit,
    };
    Ok((clipped, (p_l, p_u)))
}

/// Affinely maps the field onto `[0, 1]`. A constant field maps to 0.5
/// everywhere rather than asserting a uniformly near or far scene. The
/// output unit is always `Relative`.
pub fn normalize(field: &DepthField) -> Result<DepthField, PipelineError> {
    if field.values.is_empty() {
        return Err(PipelineError::EmptyField);
    }
    let min = field.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        let span = max - min;
        field.values.iter().map(|v| (v - min) / span).collect()
    } else {
        vec![0.5; field.values.len()]
    };
    Ok(DepthField {
        height: field.height,
        width: field.width,
        values,
        unit: DepthUnit::Relative,
    })
}

/// LUT index for a normalized value under the reversed-turbo orientation:
/// 0 (near) maps to index 255 (red end), 1 (far) to index 0 (blue end).
pub fn turbo_reversed_index(value: f64) -> usize {
    let bin = (value * 256.0).floor().clamp(0.0, 255.0) as usize;
    255 - bin
}

/// Renders a normalized field as a pseudo-color raster using the embedded
/// turbo table in reversed orientation.
pub fn render_map(norm: &DepthField, cfg: &RenderConfig) -> Result<DepthMap, PipelineError> {
    cfg.validate()?;
    let ColorMode::TurboReversed = cfg.color_mode;
    if let Some(index) = norm
        .values
        .iter()
        .position(|v| *v < -RANGE_TOLERANCE || *v > 1.0 + RANGE_TOLERANCE)
    {
        return Err(PipelineError::OutOfRangeValue {
            value: norm.values[index],
            index,
        });
    }
    let pixels = norm
        .values
        .iter()
        .map(|v| TURBO_LUT[turbo_reversed_index(v.clamp(0.0, 1.0))])
        .collect();
    Ok(DepthMap {
        height: norm.height,
        width: norm.width,
        pixels,
    })
}

/// Serializes a matrix for inclusion in a text prompt: a header naming the
/// shape, unit and origin, then one line per row with fixed two-decimal
/// values. Byte-for-byte deterministic for equal inputs.
pub fn serialize_matrix(matrix: &DepthMatrix) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "depth matrix: {} rows x {} cols, unit: {}, origin: top-left\n",
        matrix.rows,
        matrix.cols,
        matrix.unit.label()
    ));
    for i in 0..matrix.rows {
        let row: Vec<String> = (0..matrix.cols)
            .map(|j| format!("{:.2}", matrix.get(i, j)))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
