//! Slice-level CT preprocessing: HU windowing, artifact removal, skull
//! stripping and centering of the head in the frame.
//!
//! Every stage is a pure function that keeps the slice geometry. Intensities
//! stay real-valued in `[0, 255]` until they are exported to 8-bit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted slice edge in pixels.
pub const MIN_SLICE_EDGE: usize = 16;

/// A raw slice in Hounsfield units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuSlice {
    values: Array2<i16>,
}

impl HuSlice {
    pub fn new(values: Array2<i16>) -> Result<Self> {
        let (h, w) = values.dim();
        if h < MIN_SLICE_EDGE || w < MIN_SLICE_EDGE {
            return Err(Error::InvalidInput(format!(
                "slice is {h}x{w}, both edges must be at least {MIN_SLICE_EDGE}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<i16> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

/// HU interval `[a, b]` mapped onto `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowParams {
    pub a: f64,
    pub b: f64,
}

impl WindowParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let params = Self { a, b };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.a < self.b) {
            return Err(Error::Config(format!(
                "window bounds must satisfy a < b, got a={} b={}",
                self.a, self.b
            )));
        }
        Ok(())
    }

    /// Maps one HU value to display intensity.
    #[inline]
    pub fn apply(&self, hu: f64) -> f32 {
        if hu < self.a {
            0.0
        } else if hu > self.b {
            255.0
        } else {
            ((hu - self.a) / (self.b - self.a) * 255.0) as f32
        }
    }
}

impl Default for WindowParams {
    /// The usual brain window.
    fn default() -> Self {
        Self { a: 0.0, b: 80.0 }
    }
}

/// Grayscale intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    values: Array2<f32>,
}

impl IntensityImage {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "intensity {v} outside [0, 255]"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_u8(values: &Array2<u8>) -> Self {
        Self {
            values: values.mapv(f32::from),
        }
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f32> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Rounds half-up to 8-bit for export.
    pub fn to_u8(&self) -> Array2<u8> {
        self.values
            .mapv(|v| (v + 0.5).floor().clamp(0.0, 255.0) as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub window: WindowParams,
    pub enable_noise_removal: bool,
    pub enable_skull_strip: bool,
    pub enable_centering: bool,
    pub foreground_threshold: f32,
    pub skull_threshold: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window: WindowParams::default(),
            enable_noise_removal: true,
            enable_skull_strip: true,
            enable_centering: true,
            foreground_threshold: 10.0,
            skull_threshold: 250.0,
        }
    }
}

impl PreprocessConfig {
    /// Windowing only.
    pub fn window_only(window: WindowParams) -> Self {
        Self {
            window,
            enable_noise_removal: false,
            enable_skull_strip: false,
            enable_centering: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if !(self.foreground_threshold > 0.0 && self.foreground_threshold < 255.0) {
            return Err(Error::Config(format!(
                "foreground_threshold {} must lie in (0, 255)",
                self.foreground_threshold
            )));
        }
        if !(self.skull_threshold > 0.0 && self.skull_threshold <= 255.0) {
            return Err(Error::Config(format!(
                "skull_threshold {} must lie in (0, 255]",
                self.skull_threshold
            )));
        }
        Ok(())
    }
}

/// Piecewise-linear HU windowing.
pub fn window_hu(slice: &HuSlice, params: WindowParams) -> Result<IntensityImage> {
    params.validate()?;
    Ok(IntensityImage {
        values: slice.values.mapv(|hu| params.apply(f64::from(hu))),
    })
}

const NEIGHBORS8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, Copy)]
struct Component {
    size: usize,
    top: usize,
    left: usize,
    bottom: usize,
    right: usize,
}

/// Labels 8-connected components of `fg`. Label 0 is background; component
/// `k` carries label `k + 1`.
fn label_components(fg: &Array2<bool>) -> (Array2<u32>, Vec<Component>) {
    let (h, w) = fg.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !fg[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            let id = comps.len() as u32 + 1;
            let mut comp = Component {
                size: 0,
                top: r,
                left: c,
                bottom: r,
                right: c,
            };
            labels[[r, c]] = id;
            stack.push((r, c));
            while let Some((y, x)) = stack.pop() {
                comp.size += 1;
                comp.top = comp.top.min(y);
                comp.bottom = comp.bottom.max(y);
                comp.left = comp.left.min(x);
                comp.right = comp.right.max(x);
                for (dy, dx) in NEIGHBORS8 {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if fg[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = id;
                        stack.push((ny, nx));
                    }
                }
            }
            comps.push(comp);
        }
    }
    (labels, comps)
}

/// Keeps the largest bright connected component (the head) and clears
/// everything outside its bounding box.
///
/// Ties on pixel count go to the component whose bounding box has the
/// smallest `(top, left)` corner.
pub fn remove_artifacts(img: &IntensityImage, foreground_threshold: f32) -> Result<IntensityImage> {
    let fg = img.values.mapv(|v| v > foreground_threshold);
    let (labels, comps) = label_components(&fg);
    let (best, comp) = comps
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            b.size
                .cmp(&a.size)
                .then(a.top.cmp(&b.top))
                .then(a.left.cmp(&b.left))
        })
        .ok_or(Error::EmptyImage("no pixel above the foreground threshold"))?;
    let keep = best as u32 + 1;
    let mut out = Array2::<f32>::zeros(img.dim());
    for r in comp.top..=comp.bottom {
        for c in comp.left..=comp.right {
            let label = labels[[r, c]];
            if label == 0 || label == keep {
                out[[r, c]] = img.values[[r, c]];
            }
        }
    }
    Ok(IntensityImage { values: out })
}

/// Zeroes bone (pixels at or above `skull_threshold`) together with a
/// one-pixel 8-neighbourhood dilation ring.
pub fn strip_skull(img: &IntensityImage, skull_threshold: f32) -> Result<IntensityImage> {
    let bone = img.values.mapv(|v| v >= skull_threshold);
    if bone.iter().all(|&b| b) {
        return Err(Error::EmptyImage(
            "every pixel is at or above the skull threshold",
        ));
    }
    let (h, w) = bone.dim();
    let mut out = img.values.clone();
    for r in 0..h {
        for c in 0..w {
            if !bone[[r, c]] {
                continue;
            }
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let y = r as isize + dr;
                    let x = c as isize + dc;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        out[[y as usize, x as usize]] = 0.0;
                    }
                }
            }
        }
    }
    Ok(IntensityImage { values: out })
}

/// Integer translation by `(dy, dx)`; vacated pixels are zero.
pub fn translate<T: Copy + Default>(src: &Array2<T>, offset: (isize, isize)) -> Array2<T> {
    let (h, w) = src.dim();
    let (dy, dx) = offset;
    let mut out = Array2::<T>::default((h, w));
    for r in 0..h {
        let sr = r as isize - dy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for c in 0..w {
            let sc = c as isize - dx;
            if sc < 0 || sc >= w as isize {
                continue;
            }
            out[[r, c]] = src[[sr as usize, sc as usize]];
        }
    }
    out
}

/// Translates the image so that the centroid of its nonzero pixels lands on
/// `(H/2, W/2)`. Returns the applied `(dy, dx)`.
pub fn center_foreground(img: &IntensityImage) -> Result<(IntensityImage, (isize, isize))> {
    let (h, w) = img.dim();
    let (mut sy, mut sx, mut n) = (0.0f64, 0.0f64, 0usize);
    for ((r, c), &v) in img.values.indexed_iter() {
        if v != 0.0 {
            sy += r as f64;
            sx += c as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyImage("no nonzero pixel to center"));
    }
    let cy = (sy / n as f64).round() as isize;
    let cx = (sx / n as f64).round() as isize;
    let offset = ((h / 2) as isize - cy, (w / 2) as isize - cx);
    Ok((
        IntensityImage {
            values: translate(&img.values, offset),
        },
        offset,
    ))
}

/// Windowing followed by the enabled stages in order: artifact removal,
/// skull stripping, centering.
pub fn preprocess(slice: &HuSlice, cfg: &PreprocessConfig) -> Result<IntensityImage> {
    preprocess_with_offset(slice, cfg).map(|(img, _)| img)
}

/// Like [`preprocess`], also returning the centering translation so that
/// masks can follow the image. The offset is `(0, 0)` when centering is off.
pub fn preprocess_with_offset(
    slice: &HuSlice,
    cfg: &PreprocessConfig,
) -> Result<(IntensityImage, (isize, isize))> {
    cfg.validate()?;
    clean_with_offset(window_hu(slice, cfg.window)?, cfg)
}

/// The post-windowing stages of [`preprocess_with_offset`], for images that
/// arrive already windowed.
pub fn clean_with_offset(
    mut img: IntensityImage,
    cfg: &PreprocessConfig,
) -> Result<(IntensityImage, (isize, isize))> {
    cfg.validate()?;
    if cfg.enable_noise_removal {
        img = remove_artifacts(&img, cfg.foreground_threshold)?;
    }
    if cfg.enable_skull_strip {
        img = strip_skull(&img, cfg.skull_threshold)?;
    }
    if cfg.enable_centering {
        return center_foreground(&img);
    }
    Ok((img, (0, 0)))
}
