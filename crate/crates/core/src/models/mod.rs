//! Segmenter, wavelet classifier and the checkpoint container that joins
//! them.

mod checkpoint;
mod classifier;
mod unet;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use classifier::{ClsModelConfig, PoolingMode, WaveletCnn};
pub use unet::{SegModelConfig, UNet};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, Parameterized};
    use ndarray::{Array4, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_batch(n: usize, h: usize) -> Array4<f32> {
        let mut r = rng();
        Array4::from_shape_simple_fn((n, 1, h, h), || rand::Rng::random::<f32>(&mut r))
    }

    #[test]
    fn segmenter_shapes_and_range() {
        let mut net = UNet::<f32>::new(&SegModelConfig::default(), &mut rng()).unwrap();
        let x = random_batch(2, 32);
        let p = net.predict(&x).unwrap();
        assert_eq!(p.dim(), (2, 1, 32, 32));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let f = net.encoder_features(&x).unwrap();
        assert_eq!(f.dim(), (2, 128, 4, 4));
        assert!(net.forward(&random_batch(1, 20), Mode::Eval).is_err());
    }

    #[test]
    fn segmenter_batch_independence_in_eval() {
        let mut net = UNet::<f32>::new(&SegModelConfig::default(), &mut rng()).unwrap();
        let one = random_batch(1, 16);
        let two = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let p = net.predict(&two).unwrap();
        assert_eq!(p.index_axis(Axis(0), 0), p.index_axis(Axis(0), 1));
        let zeros = net
            .encoder_features(&Array4::zeros((1, 1, 16, 16)))
            .unwrap();
        assert!(zeros.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn classifier_modes_share_shapes() {
        let enc = Array4::<f32>::ones((4, 8, 2, 2));
        for mode in [
            PoolingMode::MaxPool,
            PoolingMode::WaveletLl,
            PoolingMode::WaveletMultiresolution,
        ] {
            let cfg = ClsModelConfig {
                block_widths: vec![4, 8],
                pooling_mode: mode,
                encoder_feature_width: 8,
                ..Default::default()
            };
            let mut net = WaveletCnn::<f32>::new(&cfg, &mut rng()).unwrap();
            let p = net.predict(&random_batch(4, 16), Some(&enc)).unwrap();
            assert_eq!(p.dim(), (4, 4));
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(net.predict(&random_batch(4, 16), None).is_err());
        }
    }

    #[test]
    fn fusion_widens_head_by_encoder_width() {
        let on = ClsModelConfig {
            block_widths: vec![4, 8],
            encoder_feature_width: 16,
            ..Default::default()
        };
        let off = ClsModelConfig {
            fuse_encoder_features: false,
            ..on.clone()
        };
        let a = WaveletCnn::<f32>::new(&on, &mut rng()).unwrap();
        let b = WaveletCnn::<f32>::new(&off, &mut rng()).unwrap();
        assert_eq!(a.head_in_features() - b.head_in_features(), 16);
        assert_eq!(a.num_trainable() - b.num_trainable(), 16 * 4);
        assert_eq!(a.layer_names().len(), 4);
        assert_eq!(a.default_layer(), "block1.conv1");
    }
}
