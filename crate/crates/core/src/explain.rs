//! Grad-CAM heatmaps and their PNG rendering.
//!
//! Overlay colormap (`h` in `[0, 1]`): `r = clamp(1.5 - |4h - 3|)`,
//! `g = clamp(1.5 - |4h - 2|)`, `b = clamp(1.5 - |4h - 1|)`, a jet-style
//! ramp from dark blue through green to dark red. The blended panel mixes
//! gray input and color with weight `0.5 * h` on the color, so pixels with
//! zero heat show the input unchanged.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::io;
use crate::models::{Checkpoint, UNet, WaveletCnn};
use crate::nn::Mode;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Input-sized map, min-max normalised to `[0, 1]`; all zeros when the
    /// rectified map carries no signal.
    pub values: Array2<f32>,
    pub class_index: usize,
    pub layer_name: String,
}

/// A network Grad-CAM can inspect.
pub trait CamModel {
    fn layer_names(&self) -> Vec<String>;
    fn default_layer(&self) -> String;
    fn num_classes(&self) -> usize;
    /// Activation of `layer` (`C x h x w`) for a single image, and the
    /// gradient of the class logit with respect to it.
    fn activation_and_gradient(
        &mut self,
        image: &Array2<f32>,
        class_index: usize,
        layer: &str,
    ) -> Result<(Array3<f64>, Array3<f64>)>;
}

/// The classifier of a joint checkpoint together with its frozen segmenter.
pub struct JointCam {
    seg: UNet<f32>,
    cls: WaveletCnn<f32>,
}

impl JointCam {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cls = ck.cls.clone().ok_or_else(|| {
            Error::Checkpoint("Grad-CAM needs a checkpoint with a classifier".into())
        })?;
        Ok(Self {
            seg: ck.seg.clone(),
            cls,
        })
    }
}

impl CamModel for JointCam {
    fn layer_names(&self) -> Vec<String> {
        self.cls.layer_names()
    }

    fn default_layer(&self) -> String {
        self.cls.default_layer()
    }

    fn num_classes(&self) -> usize {
        self.cls.config().num_classes
    }

    fn activation_and_gradient(
        &mut self,
        image: &Array2<f32>,
        class_index: usize,
        layer: &str,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        let x: Array4<f32> = image.clone().insert_axis(Axis(0)).insert_axis(Axis(0));
        let enc = if self.cls.config().fuse_encoder_features {
            Some(self.seg.encoder_features(&x)?)
        } else {
            None
        };
        let logits = self.cls.forward(&x, enc.as_ref(), Mode::EvalTrace)?;
        let mut onehot = Array2::zeros(logits.raw_dim());
        onehot[[0, class_index]] = 1.0;
        let (grad, act) = self
            .cls
            .backward_capture(&onehot, Some(layer))
            .expect("layer name validated by caller");
        let act = act.expect("EvalTrace records activations");
        let to64 = |a: Array4<f32>| a.index_axis_move(Axis(0), 0).mapv(f64::from);
        Ok((to64(act), to64(grad)))
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(src: &Array2<f64>, (oh, ow): (usize, usize)) -> Array2<f64> {
    let (ih, iw) = src.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    Array2::from_shape_fn((oh, ow), |(r, c)| {
        let (r0, r1, fr) = coord(r, ih, oh);
        let (c0, c1, fc) = coord(c, iw, ow);
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Grad-CAM over any [`CamModel`]; `layer = None` picks the model's default.
pub fn grad_cam_model<M: CamModel + ?Sized>(
    model: &mut M,
    image: &Array2<f32>,
    class_index: usize,
    layer: Option<&str>,
) -> Result<Heatmap> {
    let layer = layer
        .map(str::to_string)
        .unwrap_or_else(|| model.default_layer());
    let valid = model.layer_names();
    if !valid.contains(&layer) {
        return Err(Error::UnknownLayer { name: layer, valid });
    }
    if class_index >= model.num_classes() {
        return Err(Error::InvalidInput(format!(
            "class index {class_index} out of range for {} classes",
            model.num_classes()
        )));
    }
    let (act, grad) = model.activation_and_gradient(image, class_index, &layer)?;
    let weights = grad
        .mean_axis(Axis(2))
        .and_then(|g| g.mean_axis(Axis(1)))
        .expect("nonempty activation");
    let mut cam = Array2::<f64>::zeros((act.dim().1, act.dim().2));
    for (a, &w) in act.outer_iter().zip(weights.iter()) {
        cam.scaled_add(w, &a);
    }
    cam.mapv_inplace(|v| v.max(0.0));
    let up = bilinear_resize(&cam, image.dim());
    let (lo, hi) = up
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let values = if range > 1e-12 * hi.abs().max(1.0) {
        up.mapv(|v| ((v - lo) / range) as f32)
    } else {
        Array2::zeros(image.dim())
    };
    Ok(Heatmap {
        values,
        class_index,
        layer_name: layer,
    })
}

/// Grad-CAM of the classifier stored in `ck`.
pub fn grad_cam(
    ck: &Checkpoint,
    image: &Array2<f32>,
    class_index: usize,
    layer: Option<&str>,
) -> Result<Heatmap> {
    grad_cam_model(
        &mut JointCam::from_checkpoint(ck)?,
        image,
        class_index,
        layer,
    )
}

fn colormap(h: f32) -> [f32; 3] {
    let ch = |k: f32| (1.5 - (4.0 * h - k).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// RGB bytes of the three panels side by side: input, heatmap, overlay.
/// `image` holds intensities in `[0, 1]`.
pub fn overlay_rgb(image: &Array2<f32>, heatmap: &Heatmap) -> Result<Vec<u8>> {
    if image.dim() != heatmap.values.dim() {
        return Err(Error::shape(format!(
            "image {:?} vs heatmap {:?}",
            image.dim(),
            heatmap.values.dim()
        )));
    }
    let (h, w) = image.dim();
    let mut rgb = vec![0u8; 3 * 3 * w * h];
    for r in 0..h {
        for c in 0..w {
            let g = image[[r, c]].clamp(0.0, 1.0);
            let heat = heatmap.values[[r, c]].clamp(0.0, 1.0);
            let color = colormap(heat);
            let alpha = 0.5 * heat;
            let panels = [
                [g; 3],
                color,
                std::array::from_fn(|k| (1.0 - alpha) * g + alpha * color[k]),
            ];
            for (p, px) in panels.iter().enumerate() {
                let at = 3 * (r * 3 * w + p * w + c);
                for k in 0..3 {
                    rgb[at + k] = to_byte(px[k]);
                }
            }
        }
    }
    Ok(rgb)
}

/// Writes the side-by-side overlay PNG (width `3 * W`).
pub fn render_overlay(image: &Array2<f32>, heatmap: &Heatmap, out_path: &Path) -> Result<()> {
    let (h, w) = image.dim();
    let rgb = overlay_rgb(image, heatmap)?;
    io::write_png_rgb(out_path, 3 * w, h, &rgb)
}
