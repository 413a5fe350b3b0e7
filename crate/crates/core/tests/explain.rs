//! Grad-CAM on a hand-built model whose evidence location is known.

use ichnet_core::explain::{grad_cam_model, overlay_rgb, render_overlay, CamModel, Heatmap};
use ichnet_core::io::read_png_gray;
use ichnet_core::Error;
use ndarray::{Array2, Array3};

const H: usize = 24;
const W: usize = 32;

/// Two channels, `relu(x)` and `relu(-x)`. The logit of class 0 is
/// `scale * sum(channel 0 over the left half)`; class 1 has no dependence
/// on the activation at all.
struct Toy {
    scale: f64,
}

impl CamModel for Toy {
    fn layer_names(&self) -> Vec<String> {
        vec!["features".into()]
    }

    fn default_layer(&self) -> String {
        "features".into()
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn activation_and_gradient(
        &mut self,
        image: &Array2<f32>,
        class_index: usize,
        _layer: &str,
    ) -> ichnet_core::Result<(Array3<f64>, Array3<f64>)> {
        let (h, w) = image.dim();
        let act = Array3::from_shape_fn((2, h, w), |(c, r, col)| {
            let v = f64::from(image[[r, col]]);
            if c == 0 {
                v.max(0.0)
            } else {
                (-v).max(0.0)
            }
        });
        let grad = Array3::from_shape_fn((2, h, w), |(c, _, col)| {
            if class_index == 0 && c == 0 && col < w / 2 {
                self.scale
            } else {
                0.0
            }
        });
        Ok((act, grad))
    }
}

/// Bright square on the left, dark square on the right.
fn scene() -> Array2<f32> {
    Array2::from_shape_fn((H, W), |(r, c)| {
        let rows = (8..16).contains(&r);
        if rows && (4..12).contains(&c) {
            1.0
        } else if rows && (20..28).contains(&c) {
            -1.0
        } else {
            0.0
        }
    })
}

fn left_mass(h: &Heatmap) -> f64 {
    let total: f64 = h.values.iter().map(|&v| f64::from(v)).sum();
    let left: f64 = h
        .values
        .indexed_iter()
        .filter(|((_, c), _)| *c < W / 2)
        .map(|(_, &v)| f64::from(v))
        .sum();
    left / total
}

#[test]
fn heatmap_concentrates_on_the_evidence() {
    let h = grad_cam_model(&mut Toy { scale: 1.0 }, &scene(), 0, None).unwrap();
    assert_eq!(h.values.dim(), (H, W));
    assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(left_mass(&h) >= 0.9, "left mass {}", left_mass(&h));
    assert_eq!(h.values[[10, 6]], 1.0);
    assert_eq!(h.values[[10, 24]], 0.0);
}

#[test]
fn heatmap_ignores_logit_scale() {
    let a = grad_cam_model(&mut Toy { scale: 1.0 }, &scene(), 0, None).unwrap();
    let b = grad_cam_model(&mut Toy { scale: 2.0 }, &scene(), 0, None).unwrap();
    for (x, y) in a.values.iter().zip(b.values.iter()) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn zero_gradient_gives_empty_heatmap() {
    let h = grad_cam_model(&mut Toy { scale: 1.0 }, &scene(), 1, None).unwrap();
    assert!(h.values.iter().all(|&v| v == 0.0));
    let rgb = overlay_rgb(&scene().mapv(|v| v.max(0.0)), &h).unwrap();
    for r in 0..H {
        for c in 0..W {
            let input = &rgb[3 * (r * 3 * W + c)..][..3];
            let blended = &rgb[3 * (r * 3 * W + 2 * W + c)..][..3];
            assert_eq!(input, blended);
        }
    }
}

#[test]
fn bad_layer_and_class_are_rejected() {
    match grad_cam_model(&mut Toy { scale: 1.0 }, &scene(), 0, Some("conv9")) {
        Err(Error::UnknownLayer { name, valid }) => {
            assert_eq!(name, "conv9");
            assert_eq!(valid, vec!["features".to_string()]);
        }
        other => panic!("expected UnknownLayer, got {other:?}"),
    }
    assert!(grad_cam_model(&mut Toy { scale: 1.0 }, &scene(), 2, None).is_err());
}

#[test]
fn overlay_png_has_three_panels_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let image = scene().mapv(|v| (v + 1.0) / 2.0);
    let h = grad_cam_model(&mut Toy { scale: 1.0 }, &scene(), 0, None).unwrap();
    let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
    render_overlay(&image, &h, &p1).unwrap();
    render_overlay(&image, &h, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let decoded = read_png_gray(&p1).unwrap();
    assert_eq!(decoded.dim(), (H, 3 * W));
}
