//! End-to-end training behaviour on small phantom sets.

use ichnet_core::nn::Parameterized;
use ichnet_core::phantom::{generate_cases, SignLabels};
use ichnet_core::pipeline::{
    split_dataset, train_classifier, train_segmentation, Dataset, Split, SplitMode, SplitSpec,
    TrainConfig,
};
use ichnet_core::{ClsModelConfig, PhantomSpec, PoolingMode, PreprocessConfig, SegModelConfig};

fn dataset(patients: usize, slices: usize, seed: u64) -> Dataset {
    let spec = PhantomSpec {
        image_size: 32,
        patients,
        slices_per_patient: slices,
        seed,
        ..PhantomSpec::default()
    };
    Dataset::from_cases(
        &generate_cases(&spec).unwrap(),
        &PreprocessConfig::default(),
        true,
    )
    .unwrap()
}

fn split(data: &Dataset, test_fraction: f64) -> Split {
    split_dataset(
        &data.keys(),
        &SplitSpec {
            mode: SplitMode::ByPatient,
            test_fraction,
            seed: 3,
        },
    )
    .unwrap()
}

fn seg_cfg() -> SegModelConfig {
    SegModelConfig {
        encoder_widths: vec![4, 8, 16],
        ..SegModelConfig::default()
    }
}

fn cls_cfg() -> ClsModelConfig {
    ClsModelConfig {
        block_widths: vec![8, 16],
        pooling_mode: PoolingMode::WaveletMultiresolution,
        encoder_feature_width: 16,
        ..ClsModelConfig::default()
    }
}

#[test]
fn segmenter_overfits_a_handful_of_slices() {
    let data = dataset(2, 2, 4);
    let s = split(&data, 0.5);
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: s.train.len(),
        learning_rate: 1e-2,
        ..TrainConfig::segmentation()
    };
    let (_, rec) = train_segmentation(&seg_cfg(), &cfg, &data, &s).unwrap();
    let best = rec
        .epochs
        .iter()
        .map(|e| e.train_loss)
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.05, "best train loss {best}");
}

#[test]
fn classifier_overfits_a_handful_of_slices() {
    let mut data = dataset(2, 2, 5);
    let s = split(&data, 0.5);
    for (k, &i) in s.train.iter().enumerate() {
        data.samples[i].labels = SignLabels::from_array(std::array::from_fn(|c| (k + c) % 2 == 0));
    }
    let seg_train = TrainConfig {
        epochs: 0,
        ..TrainConfig::segmentation()
    };
    let (seg, _) = train_segmentation(&seg_cfg(), &seg_train, &data, &s).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: s.train.len(),
        learning_rate: 3e-3,
        use_weighted_loss: false,
        ..TrainConfig::classification()
    };
    let (_, rec) = train_classifier(&cls_cfg(), &cfg, &data, &s, &seg).unwrap();
    let best = rec
        .epochs
        .iter()
        .map(|e| e.train_loss)
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.05, "best train loss {best}");
}

#[test]
fn balanced_labels_make_weighting_a_no_op() {
    let mut data = dataset(4, 2, 6);
    let s = split(&data, 0.25);
    assert_eq!(s.train.len() % 2, 0);
    for (k, &i) in s.train.iter().enumerate() {
        data.samples[i].labels = SignLabels::from_array(std::array::from_fn(|c| (k + c) % 2 == 0));
    }
    for c in 0..4 {
        let pos = s
            .train
            .iter()
            .filter(|&&i| data.samples[i].labels.as_array()[c])
            .count();
        assert_eq!(2 * pos, s.train.len(), "class {c} is unbalanced");
    }
    let seg_train = TrainConfig {
        epochs: 1,
        ..TrainConfig::segmentation()
    };
    let (seg, _) = train_segmentation(&seg_cfg(), &seg_train, &data, &s).unwrap();
    let run = |weighted: bool| {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            use_weighted_loss: weighted,
            ..TrainConfig::classification()
        };
        train_classifier(&cls_cfg(), &cfg, &data, &s, &seg).unwrap()
    };
    let ((wk, wr), (uk, ur)) = (run(true), run(false));
    for (a, b) in wr.epochs.iter().zip(&ur.epochs) {
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.test_loss, b.test_loss);
    }
    assert_eq!(wk.cls.unwrap().param_hash(), uk.cls.unwrap().param_hash());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = dataset(4, 2, 7);
    let s = split(&data, 0.25);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        seed: 42,
        ..TrainConfig::segmentation()
    };
    let (a, ra) = train_segmentation(&seg_cfg(), &cfg, &data, &s).unwrap();
    let (b, rb) = train_segmentation(&seg_cfg(), &cfg, &data, &s).unwrap();
    assert_eq!(a.seg.param_hash(), b.seg.param_hash());
    assert_eq!(ra.result_hash(), rb.result_hash());
    let other = TrainConfig { seed: 43, ..cfg };
    let (c, _) = train_segmentation(&seg_cfg(), &other, &data, &s).unwrap();
    assert_ne!(a.seg.param_hash(), c.seg.param_hash());
}
