use std::path::PathBuf;

use ndarray::{s, Array2, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{
    class_weights, dice_loss, dice_loss_grad, iou_fscore, roc_auc, weighted_bce,
    weighted_bce_logit_grad, EvalReport, LabelBatch, WeightVector, DICE_SMOOTH, MASK_THRESHOLD,
};
use crate::models::{Checkpoint, ClsModelConfig, SegModelConfig, UNet, WaveletCnn};
use crate::nn::{sigmoid, Adam, AdamConfig, Mode, Parameterized};
use crate::phantom::{Location, SIGN_NAMES};

use super::config::{Stage, TrainConfig};
use super::data::Dataset;
use super::split::Split;

/// Inference batch size; only bounds memory.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Counts of mask reads by source, filled in by masked classification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub train_ground_truth: usize,
    pub train_predicted: usize,
    pub eval_ground_truth: usize,
    pub eval_predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub config: serde_json::Value,
    pub train_hash: String,
    pub test_hash: String,
    pub epochs: Vec<EpochLoss>,
    /// Epoch whose weights were kept; 0 is the initialization.
    pub best_epoch: usize,
    pub report: EvalReport,
    pub checkpoint_path: Option<PathBuf>,
    pub seg_hash_before: Option<String>,
    pub seg_hash_after: Option<String>,
    pub mask_provenance: Option<MaskProvenance>,
    pub warnings: Vec<String>,
}

impl RunRecord {
    fn new(stage: &str, config: serde_json::Value, split: &Split) -> Self {
        Self {
            stage: stage.to_string(),
            config,
            train_hash: split.train_hash.clone(),
            test_hash: split.test_hash.clone(),
            epochs: Vec::new(),
            best_epoch: 0,
            report: EvalReport::default(),
            checkpoint_path: None,
            seg_hash_before: None,
            seg_hash_after: None,
            mask_provenance: None,
            warnings: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serialises")
    }

    /// Hash of the loss trajectory and metric table.
    pub fn result_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.epochs {
            h.update(e.train_loss.to_bits().to_le_bytes());
            h.update(e.test_loss.to_bits().to_le_bytes());
        }
        h.update(self.report.to_tsv().as_bytes());
        crate::nn::hex(&h.finalize())
    }
}

/// Seed for a named sub-stream of a run.
pub(crate) fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn select(x: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    x.select(Axis(0), idx)
}

fn finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "{what} became {v} in epoch {epoch}"
        )))
    }
}

fn adam(cfg: &TrainConfig) -> Adam<f32> {
    Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    })
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn nonempty(split: &Split) -> Result<()> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Data(format!(
            "split has {} training and {} test cases; both must be nonempty",
            split.train.len(),
            split.test.len()
        )));
    }
    Ok(())
}

/// Per-sample probability maps in evaluation mode.
pub fn predict_masks(seg: &mut UNet<f32>, x: &Array4<f32>) -> Result<Array4<f32>> {
    let mut out = Array4::zeros(x.raw_dim());
    for start in (0..x.dim().0).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(x.dim().0);
        let p = seg.predict(&x.slice(s![start..end, .., .., ..]).to_owned())?;
        out.slice_mut(s![start..end, .., .., ..]).assign(&p);
    }
    Ok(out)
}

fn encoder_features(seg: &mut UNet<f32>, x: &Array4<f32>) -> Result<Array4<f32>> {
    let mut parts = Vec::new();
    for start in (0..x.dim().0).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(x.dim().0);
        parts.push(seg.encoder_features(&x.slice(s![start..end, .., .., ..]).to_owned())?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal feature shapes"))
}

fn mean_dice(pred: ArrayView4<f32>, target: ArrayView4<f32>) -> Result<f64> {
    let mut total = 0.0;
    for (p, t) in pred.outer_iter().zip(target.outer_iter()) {
        total += f64::from(dice_loss(p, t)?);
    }
    Ok(total / pred.dim().0.max(1) as f64)
}

/// Mean soft dice loss and mean binarised IoU / F-score over the cases.
pub fn segmentation_report(
    seg: &mut UNet<f32>,
    data: &Dataset,
    idx: &[usize],
) -> Result<EvalReport> {
    let x = data.images(idx);
    let t = data.masks(idx)?;
    let p = predict_masks(seg, &x)?;
    let (mut iou, mut fs) = (0.0, 0.0);
    for (pi, ti) in p.outer_iter().zip(t.outer_iter()) {
        let (a, b) = iou_fscore(pi, ti, MASK_THRESHOLD as f32)?;
        iou += a;
        fs += b;
    }
    let n = idx.len().max(1) as f64;
    let mut r = EvalReport::default();
    r.push("dice_loss", "mask", mean_dice(p.view(), t.view())?);
    r.push("iou", "mask", iou / n);
    r.push("fscore", "mask", fs / n);
    Ok(r)
}

fn fit_segmenter(
    mut model: UNet<f32>,
    cfg: &TrainConfig,
    data: &Dataset,
    split: &Split,
    record: &mut RunRecord,
) -> Result<UNet<f32>> {
    nonempty(split)?;
    let x_train = data.images(&split.train);
    let y_train = data.masks(&split.train)?;
    let x_test = data.images(&split.test);
    let y_test = data.masks(&split.test)?;
    let mut opt = adam(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));

    let mut best_loss = mean_dice(predict_masks(&mut model, &x_test)?.view(), y_test.view())?;
    let mut best = model.clone();
    for epoch in 1..=cfg.epochs {
        let mut train_total = 0.0;
        for batch in shuffled_batches(split.train.len(), cfg.batch_size, &mut rng) {
            let xb = select(&x_train, &batch);
            let yb = select(&y_train, &batch);
            let probs = model.forward(&xb, Mode::Train)?.mapv_into(sigmoid);
            let nb = batch.len() as f32;
            let mut grad = Array4::zeros(probs.raw_dim());
            for ((p, t), mut g) in probs
                .outer_iter()
                .zip(yb.outer_iter())
                .zip(grad.outer_iter_mut())
            {
                train_total += f64::from(dice_loss(p, t)?);
                let dp = dice_loss_grad(p, t, DICE_SMOOTH as f32)?;
                ndarray::Zip::from(&mut g)
                    .and(&dp)
                    .and(&p)
                    .for_each(|g, &d, &q| *g = d * q * (1.0 - q) / nb);
            }
            model.zero_grad();
            model.backward(&grad);
            opt.step(model.params_mut().into_iter().map(|(_, p)| p));
        }
        let train_loss = finite(
            train_total / split.train.len() as f64,
            "training dice loss",
            epoch,
        )?;
        let test_loss = finite(
            mean_dice(predict_masks(&mut model, &x_test)?.view(), y_test.view())?,
            "test dice loss",
            epoch,
        )?;
        log::info!(
            "{} epoch {epoch}: train {train_loss:.4} test {test_loss:.4}",
            record.stage
        );
        record.epochs.push(EpochLoss {
            epoch,
            train_loss,
            test_loss,
        });
        if test_loss < best_loss {
            best_loss = test_loss;
            best = model.clone();
            record.best_epoch = epoch;
        }
    }
    Ok(best)
}

/// Stage one: trains a fresh segmenter with the soft dice loss and keeps the
/// weights of the epoch with the lowest test loss.
pub fn train_segmentation(
    model_cfg: &SegModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    split: &Split,
) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    cfg.expect_stage(Stage::Segmentation)?;
    let split = match cfg.location_filter {
        Some(loc) => location_split(data, split, loc)?,
        None => split.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let model = UNet::new(model_cfg, &mut rng)?;
    let echo = serde_json::json!({ "model": model_cfg, "train": cfg });
    let mut record = RunRecord::new("segmentation", echo, &split);
    let mut best = fit_segmenter(model, cfg, data, &split, &mut record)?;
    record.report = segmentation_report(&mut best, data, &split.test)?;
    let mut ck = Checkpoint::segmentation(best);
    ck.meta.insert("stage".into(), "segmentation".into());
    Ok((ck, record))
}

fn location_split(data: &Dataset, split: &Split, loc: Location) -> Result<Split> {
    let keys = data.keys();
    let sub = split.restrict(&keys, |i| data.samples[i].location == loc);
    if sub.train.is_empty() || sub.test.is_empty() {
        return Err(Error::Data(format!(
            "location {loc} has {} training and {} test cases",
            sub.train.len(),
            sub.test.len()
        )));
    }
    Ok(sub)
}

/// Continues segmentation training on one location's slices and reports
/// base and fine-tuned metrics on that location's test cases.
pub fn finetune_location(
    base: &Checkpoint,
    location: Location,
    cfg: &TrainConfig,
    data: &Dataset,
    split: &Split,
) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    cfg.expect_stage(Stage::Segmentation)?;
    let sub = location_split(data, split, location)?;
    let echo = serde_json::json!({ "location": location, "train": cfg });
    let mut record = RunRecord::new(&format!("finetune_{location}"), echo, &sub);
    let mut base_seg = base.seg.clone();
    let base_report = segmentation_report(&mut base_seg, data, &sub.test)?;
    let mut tuned = fit_segmenter(base.seg.clone(), cfg, data, &sub, &mut record)?;
    let tuned_report = segmentation_report(&mut tuned, data, &sub.test)?;
    for (tag, rep) in [("base", &base_report), ("finetuned", &tuned_report)] {
        for row in &rep.rows {
            record
                .report
                .push(row.name.clone(), format!("{location}/{tag}"), row.value);
        }
    }
    let mut ck = Checkpoint::segmentation(tuned);
    ck.meta.insert("stage".into(), "finetune".into());
    ck.meta.insert("location".into(), location.to_string());
    Ok((ck, record))
}

/// Classifier inputs for a set of cases: (optionally masked) images and
/// frozen encoder features.
struct ClsInputs {
    x: Array4<f32>,
    enc: Option<Array4<f32>>,
    labels: Array2<f32>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MaskSource {
    GroundTruth,
    Predicted,
}

fn classifier_inputs(
    seg: &mut UNet<f32>,
    fuse: bool,
    data: &Dataset,
    idx: &[usize],
    mask: Option<MaskSource>,
    prov: &mut MaskProvenance,
    training: bool,
) -> Result<ClsInputs> {
    let images = data.images(idx);
    let enc = if fuse {
        Some(encoder_features(seg, &images)?)
    } else {
        None
    };
    let x = match mask {
        None => images,
        Some(MaskSource::GroundTruth) => {
            let m = data.masks(idx)?;
            if training {
                prov.train_ground_truth += idx.len();
            } else {
                prov.eval_ground_truth += idx.len();
            }
            images * m
        }
        Some(MaskSource::Predicted) => {
            let m = predict_masks(seg, &images)?.mapv_into(|p| {
                if p >= MASK_THRESHOLD as f32 {
                    1.0
                } else {
                    0.0
                }
            });
            if training {
                prov.train_predicted += idx.len();
            } else {
                prov.eval_predicted += idx.len();
            }
            images * m
        }
    };
    Ok(ClsInputs {
        x,
        enc,
        labels: data.labels(idx),
    })
}

fn cls_probs(cls: &mut WaveletCnn<f32>, inp: &ClsInputs) -> Result<Array2<f32>> {
    let n = inp.x.dim().0;
    let mut out = Array2::zeros((n, cls.config().num_classes));
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let xb = inp.x.slice(s![start..end, .., .., ..]).to_owned();
        let eb = inp
            .enc
            .as_ref()
            .map(|e| e.slice(s![start..end, .., .., ..]).to_owned());
        let p = cls.predict(&xb, eb.as_ref())?;
        out.slice_mut(s![start..end, ..]).assign(&p);
    }
    Ok(out)
}

/// Per-class ROC AUC. Classes with a single label value in `labels` are
/// skipped with a warning.
pub fn auc_report(
    probs: &Array2<f32>,
    labels: &Array2<f32>,
    warnings: &mut Vec<String>,
) -> EvalReport {
    let mut r = EvalReport::default();
    for (c, name) in SIGN_NAMES.iter().enumerate().take(probs.ncols()) {
        let scores: Vec<f64> = probs.column(c).iter().map(|&v| f64::from(v)).collect();
        let truth: Vec<bool> = labels.column(c).iter().map(|&v| v > 0.5).collect();
        match roc_auc(&scores, &truth) {
            Ok(a) => r.push("auc", *name, a),
            Err(e) => warnings.push(format!("auc for {name} skipped: {e}")),
        }
    }
    r
}

/// Stage two: trains the classifier on top of a frozen segmenter. With
/// `masked_input`, training images are multiplied by ground-truth masks and
/// test images by the segmenter's binarised predictions.
pub fn train_classifier(
    model_cfg: &ClsModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    split: &Split,
    seg: &Checkpoint,
) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    cfg.expect_stage(Stage::Classification)?;
    model_cfg.validate()?;
    let split = match cfg.location_filter {
        Some(loc) => location_split(data, split, loc)?,
        None => split.clone(),
    };
    nonempty(&split)?;
    let fuse = model_cfg.fuse_encoder_features;
    if fuse && model_cfg.encoder_feature_width != seg.seg.config().bottleneck_width() {
        return Err(Error::Config(format!(
            "classifier expects {} encoder channels, segmenter provides {}",
            model_cfg.encoder_feature_width,
            seg.seg.config().bottleneck_width()
        )));
    }
    let echo = serde_json::json!({ "model": model_cfg, "train": cfg });
    let mut record = RunRecord::new("classification", echo, &split);

    let mut frozen = seg.seg.clone();
    let hash_before = frozen.param_hash();
    let mut prov = MaskProvenance::default();
    let (train_mask, test_mask) = if cfg.masked_input {
        (Some(MaskSource::GroundTruth), Some(MaskSource::Predicted))
    } else {
        (None, None)
    };
    let train = classifier_inputs(
        &mut frozen,
        fuse,
        data,
        &split.train,
        train_mask,
        &mut prov,
        true,
    )?;
    let test = classifier_inputs(
        &mut frozen,
        fuse,
        data,
        &split.test,
        test_mask,
        &mut prov,
        false,
    )?;

    let y_train = LabelBatch::new(train.labels.clone())?;
    let y_test = LabelBatch::new(test.labels.clone())?;
    let weights = if cfg.use_weighted_loss {
        class_weights(&y_train)
    } else {
        WeightVector::ones(model_cfg.num_classes)
    };
    record.warnings.extend(weights.warnings.iter().cloned());

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let mut cls = WaveletCnn::<f32>::new(model_cfg, &mut rng)?;
    let mut opt = adam(cfg);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));

    let test_loss = |cls: &mut WaveletCnn<f32>| -> Result<f64> {
        let p = cls_probs(cls, &test)?;
        Ok(f64::from(weighted_bce(p.view(), &y_test, &weights)?))
    };
    let mut best_loss = test_loss(&mut cls)?;
    let mut best = cls.clone();
    for epoch in 1..=cfg.epochs {
        let mut train_total = 0.0;
        for batch in shuffled_batches(split.train.len(), cfg.batch_size, &mut batch_rng) {
            let xb = select(&train.x, &batch);
            let eb = train.enc.as_ref().map(|e| select(e, &batch));
            let yb = LabelBatch::new(train.labels.select(Axis(0), &batch))?;
            let probs = cls
                .forward(&xb, eb.as_ref(), Mode::Train)?
                .mapv_into(sigmoid);
            train_total +=
                f64::from(weighted_bce(probs.view(), &yb, &weights)?) * batch.len() as f64;
            let grad = weighted_bce_logit_grad(probs.view(), &yb, &weights)?;
            cls.zero_grad();
            cls.backward(&grad);
            opt.step(cls.params_mut().into_iter().map(|(_, p)| p));
        }
        let train_loss = finite(
            train_total / split.train.len() as f64,
            "training loss",
            epoch,
        )?;
        let tl = finite(test_loss(&mut cls)?, "test loss", epoch)?;
        log::info!("classification epoch {epoch}: train {train_loss:.4} test {tl:.4}");
        record.epochs.push(EpochLoss {
            epoch,
            train_loss,
            test_loss: tl,
        });
        if tl < best_loss {
            best_loss = tl;
            best = cls.clone();
            record.best_epoch = epoch;
        }
    }

    let hash_after = frozen.param_hash();
    if hash_after != hash_before || hash_after != seg.seg.param_hash() {
        return Err(Error::Checkpoint(
            "segmentation parameters changed during classifier training".into(),
        ));
    }
    let probs = cls_probs(&mut best, &test)?;
    record.report = auc_report(&probs, &test.labels, &mut record.warnings);
    record.seg_hash_before = Some(hash_before);
    record.seg_hash_after = Some(hash_after);
    record.mask_provenance = cfg.masked_input.then_some(prov);

    let mut meta = seg.meta.clone();
    meta.insert("stage".into(), "classification".into());
    meta.insert("masked_input".into(), cfg.masked_input.to_string());
    Ok((
        Checkpoint {
            seg: frozen,
            cls: Some(best),
            meta,
        },
        record,
    ))
}

/// Metrics of a checkpoint on the given cases: segmentation overlap always,
/// per-class AUC when a classifier is present. `masked` multiplies classifier
/// inputs by the binarised predicted masks.
pub fn evaluate(
    ck: &Checkpoint,
    data: &Dataset,
    idx: &[usize],
    masked: bool,
) -> Result<(EvalReport, MaskProvenance)> {
    let mut seg = ck.seg.clone();
    let mut prov = MaskProvenance::default();
    let mut report = if data.samples.iter().all(|s| s.mask.is_some()) {
        segmentation_report(&mut seg, data, idx)?
    } else {
        EvalReport::default()
    };
    if let Some(cls) = &ck.cls {
        let mut cls = cls.clone();
        let source = masked.then_some(MaskSource::Predicted);
        let fuse = cls.config().fuse_encoder_features;
        let inp = classifier_inputs(&mut seg, fuse, data, idx, source, &mut prov, false)?;
        let probs = cls_probs(&mut cls, &inp)?;
        let mut warnings = Vec::new();
        report
            .rows
            .extend(auc_report(&probs, &inp.labels, &mut warnings).rows);
        for w in warnings {
            log::warn!("{w}");
        }
    }
    Ok((report, prov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cases, PhantomSpec};
    use crate::pipeline::split::{split_dataset, SplitMode, SplitSpec};
    use crate::preprocess::PreprocessConfig;

    fn tiny() -> (Dataset, Split) {
        let spec = PhantomSpec {
            image_size: 32,
            patients: 4,
            slices_per_patient: 3,
            ..Default::default()
        };
        let data = Dataset::from_cases(
            &generate_cases(&spec).unwrap(),
            &PreprocessConfig::default(),
            true,
        )
        .unwrap();
        let split = split_dataset(
            &data.keys(),
            &SplitSpec {
                mode: SplitMode::ByPatient,
                test_fraction: 0.25,
                seed: 1,
            },
        )
        .unwrap();
        (data, split)
    }

    fn seg_cfg() -> SegModelConfig {
        SegModelConfig {
            encoder_widths: vec![4, 6, 8],
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (data, split) = tiny();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::segmentation()
        };
        let (ck, rec) = train_segmentation(&seg_cfg(), &cfg, &data, &split).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
        let init = UNet::<f32>::new(&seg_cfg(), &mut rng).unwrap();
        assert_eq!(ck.seg.param_hash(), init.param_hash());
        assert!(rec.epochs.is_empty());
        assert_eq!(rec.best_epoch, 0);
    }

    #[test]
    fn classifier_freezes_segmenter_and_tracks_masks() {
        let (data, split) = tiny();
        let seg_train = TrainConfig {
            epochs: 1,
            ..TrainConfig::segmentation()
        };
        let (seg, _) = train_segmentation(&seg_cfg(), &seg_train, &data, &split).unwrap();
        let cls_cfg = ClsModelConfig {
            block_widths: vec![4, 4],
            encoder_feature_width: 8,
            ..Default::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            masked_input: true,
            ..TrainConfig::classification()
        };
        let (ck, rec) = train_classifier(&cls_cfg, &cfg, &data, &split, &seg).unwrap();
        assert_eq!(ck.seg.param_hash(), seg.seg.param_hash());
        assert_eq!(rec.seg_hash_before, rec.seg_hash_after);
        let prov = rec.mask_provenance.unwrap();
        assert_eq!(prov.train_ground_truth, split.train.len());
        assert_eq!(prov.eval_predicted, split.test.len());
        assert_eq!(prov.train_predicted + prov.eval_ground_truth, 0);
        assert_eq!(rec.epochs.len(), 2);

        let wrong_stage = TrainConfig::segmentation();
        assert!(
            train_classifier(&cls_cfg, &wrong_stage, &data, &split, &seg)
                .unwrap_err()
                .is_config()
        );
    }

    #[test]
    fn masked_mode_without_masks_is_a_data_error() {
        let (mut data, split) = tiny();
        let seg_train = TrainConfig {
            epochs: 0,
            ..TrainConfig::segmentation()
        };
        let (seg, _) = train_segmentation(&seg_cfg(), &seg_train, &data, &split).unwrap();
        for s in &mut data.samples {
            s.mask = None;
        }
        let cls_cfg = ClsModelConfig {
            block_widths: vec![4, 4],
            encoder_feature_width: 8,
            ..Default::default()
        };
        let cfg = TrainConfig {
            epochs: 1,
            masked_input: true,
            ..TrainConfig::classification()
        };
        let err = train_classifier(&cls_cfg, &cfg, &data, &split, &seg).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }
}
