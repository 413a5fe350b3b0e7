//! Weighted multi-label loss, segmentation losses and evaluation metrics.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView, ArrayView2, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Probability clamp used before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;
/// Binarisation threshold for masks.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Binary `N x C` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch<F>(Array2<F>);

impl<F: Real> LabelBatch<F> {
    pub fn new(y: Array2<F>) -> Result<Self> {
        if y.nrows() == 0 || y.ncols() == 0 {
            return Err(Error::shape("label batch needs N >= 1 and C >= 1"));
        }
        if y.iter().any(|&v| v != F::zero() && v != F::one()) {
            return Err(Error::InvalidInput("labels must be 0 or 1".into()));
        }
        Ok(Self(y))
    }

    pub fn view(&self) -> ArrayView2<'_, F> {
        self.0.view()
    }

    pub fn num_classes(&self) -> usize {
        self.0.ncols()
    }
}

/// Per-class positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<F> {
    pub values: Array1<F>,
    /// Classes whose weight fell back to the negative count.
    pub warnings: Vec<String>,
}

impl<F: Real> WeightVector<F> {
    pub fn ones(classes: usize) -> Self {
        Self {
            values: Array1::ones(classes),
            warnings: Vec::new(),
        }
    }
}

/// `w_c = negatives(c) / positives(c)`. A class with no positives gets
/// `w_c = negatives(c)` and a warning.
pub fn class_weights<F: Real>(labels: &LabelBatch<F>) -> WeightVector<F> {
    let y = labels.view();
    let mut warnings = Vec::new();
    let values = Array1::from_iter(y.columns().into_iter().enumerate().map(|(c, col)| {
        let pos = col.iter().filter(|&&v| v == F::one()).count();
        let neg = col.len() - pos;
        if pos == 0 {
            let msg = format!("class {c} has no positive examples; weight capped at {neg}");
            log::warn!("{msg}");
            warnings.push(msg);
            F::from_usize(neg).unwrap()
        } else {
            F::from_usize(neg).unwrap() / F::from_usize(pos).unwrap()
        }
    }));
    WeightVector { values, warnings }
}

fn check_bce_shapes<F: Real>(
    x: &ArrayView2<F>,
    y: &LabelBatch<F>,
    w: &WeightVector<F>,
) -> Result<()> {
    if x.dim() != y.0.dim() {
        return Err(Error::shape(format!(
            "predictions {:?} vs labels {:?}",
            x.dim(),
            y.0.dim()
        )));
    }
    if w.values.len() != y.num_classes() {
        return Err(Error::shape(format!(
            "{} weights for {} classes",
            w.values.len(),
            y.num_classes()
        )));
    }
    Ok(())
}

/// Weighted binary cross-entropy; only the positive term carries `w_c`:
/// `-(1/NC) * sum(w_c * y * ln x + (1 - y) * ln(1 - x))` on clamped `x`.
pub fn weighted_bce<F: Real>(
    x: ArrayView2<F>,
    y: &LabelBatch<F>,
    w: &WeightVector<F>,
) -> Result<F> {
    check_bce_shapes(&x, y, w)?;
    let eps = F::lit(PROB_EPS);
    let mut total = F::zero();
    for ((n, c), &p) in x.indexed_iter() {
        let p = p.max(eps).min(F::one() - eps);
        let t = y.0[[n, c]];
        total += w.values[c] * t * p.ln() + (F::one() - t) * (F::one() - p).ln();
    }
    Ok(-total / F::from_usize(x.len()).unwrap())
}

/// Gradient of [`weighted_bce`] with respect to the probabilities. Zero
/// where the clamp is active.
pub fn weighted_bce_grad<F: Real>(
    x: ArrayView2<F>,
    y: &LabelBatch<F>,
    w: &WeightVector<F>,
) -> Result<Array2<F>> {
    check_bce_shapes(&x, y, w)?;
    let eps = F::lit(PROB_EPS);
    let scale = -F::one() / F::from_usize(x.len()).unwrap();
    Ok(Array2::from_shape_fn(x.dim(), |(n, c)| {
        let p = x[[n, c]];
        if p < eps || p > F::one() - eps {
            return F::zero();
        }
        let t = y.0[[n, c]];
        scale * (w.values[c] * t / p - (F::one() - t) / (F::one() - p))
    }))
}

/// Gradient of [`weighted_bce`] with respect to the logits feeding a
/// logistic output, evaluated on the unclamped probabilities `p`.
pub fn weighted_bce_logit_grad<F: Real>(
    p: ArrayView2<F>,
    y: &LabelBatch<F>,
    w: &WeightVector<F>,
) -> Result<Array2<F>> {
    check_bce_shapes(&p, y, w)?;
    let scale = -F::one() / F::from_usize(p.len()).unwrap();
    Ok(Array2::from_shape_fn(p.dim(), |(n, c)| {
        let (q, t) = (p[[n, c]], y.0[[n, c]]);
        scale * (w.values[c] * t * (F::one() - q) - (F::one() - t) * q)
    }))
}

fn check_same<D: Dimension, A, B>(a: &ArrayView<A, D>, b: &ArrayView<B, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "prediction shape {:?} vs target shape {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2 sum(p t) + s) / (sum p + sum t + s)`.
pub fn dice_loss_smooth<F: Real, D: Dimension>(
    pred: ArrayView<F, D>,
    target: ArrayView<F, D>,
    smooth: F,
) -> Result<F> {
    check_same(&pred, &target)?;
    let (mut inter, mut sp, mut st) = (F::zero(), F::zero(), F::zero());
    for (&p, &t) in pred.iter().zip(target.iter()) {
        inter += p * t;
        sp += p;
        st += t;
    }
    Ok(F::one() - (F::lit(2.0) * inter + smooth) / (sp + st + smooth))
}

/// [`dice_loss_smooth`] with the default smoothing of 1.
pub fn dice_loss<F: Real, D: Dimension>(
    pred: ArrayView<F, D>,
    target: ArrayView<F, D>,
) -> Result<F> {
    dice_loss_smooth(pred, target, F::lit(DICE_SMOOTH))
}

/// Gradient of [`dice_loss_smooth`] with respect to `pred`.
pub fn dice_loss_grad<F: Real, D: Dimension>(
    pred: ArrayView<F, D>,
    target: ArrayView<F, D>,
    smooth: F,
) -> Result<ndarray::Array<F, D>> {
    check_same(&pred, &target)?;
    let (mut inter, mut sp, mut st) = (F::zero(), F::zero(), F::zero());
    for (&p, &t) in pred.iter().zip(target.iter()) {
        inter += p * t;
        sp += p;
        st += t;
    }
    let num = F::lit(2.0) * inter + smooth;
    let den = sp + st + smooth;
    let mut g = target.to_owned();
    g.mapv_inplace(|t| -(F::lit(2.0) * t * den - num) / (den * den));
    Ok(g)
}

/// Overlap of binarised prediction and target: `(iou, fscore)`.
/// Two empty masks count as a perfect match.
pub fn iou_fscore<F: Real, D: Dimension>(
    pred: ArrayView<F, D>,
    target: ArrayView<F, D>,
    threshold: F,
) -> Result<(f64, f64)> {
    check_same(&pred, &target)?;
    let half = F::lit(0.5);
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let pb = p >= threshold;
        let tb = t >= half;
        np += pb as usize;
        nt += tb as usize;
        inter += (pb && tb) as usize;
    }
    let union = np + nt - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((
        inter as f64 / union as f64,
        2.0 * inter as f64 / (np + nt) as f64,
    ))
}

/// Area under the ROC curve as the normalised Mann-Whitney statistic; ties
/// count one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc("labels contain a single class"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, with mid-ranks for ties
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled mid-rank = i + j + 2
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank2_sum += pos_in_group * (i + j + 2) as u64;
        i = j + 1;
    }
    let np = n_pos as u64;
    // doubled U statistic: 2*sum(ranks) - np*(np+1)
    let u2 = rank2_sum - np * (np + 1);
    Ok((u2 as f64 * 0.5) / (n_pos as f64 * n_neg as f64))
}

/// Flat metric table: one `(name, class, value)` triple per row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub class: String,
    pub value: f64,
}

impl EvalReport {
    pub fn push(&mut self, name: impl Into<String>, class: impl Into<String>, value: f64) {
        self.rows.push(MetricRow {
            name: name.into(),
            class: class.into(),
            value,
        });
    }

    pub fn get(&self, name: &str, class: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.name == name && r.class == class)
            .map(|r| r.value)
    }

    /// `name<TAB>class<TAB>value` per line; values printed with 6 decimals.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            writeln!(s, "{}\t{}\t{:.6}", r.name, r.class, r.value).unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1 as A1};
    use proptest::prelude::*;

    fn labels(v: Vec<f64>, n: usize, c: usize) -> LabelBatch<f64> {
        LabelBatch::new(Array2::from_shape_vec((n, c), v).unwrap()).unwrap()
    }

    #[test]
    fn weights_from_counts() {
        let mut v = vec![0.0; 100];
        v[..10].fill(1.0);
        assert_eq!(class_weights(&labels(v, 100, 1)).values[0], 9.0);
        let v: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        assert_eq!(class_weights(&labels(v, 100, 1)).values[0], 1.0);
    }

    #[test]
    fn absent_class_is_capped() {
        let w = class_weights(&labels(vec![0.0; 40], 40, 1));
        let negatives = 40usize;
        assert_eq!(w.values[0], negatives as f64);
        assert_eq!(w.warnings.len(), 1);
    }

    #[test]
    fn labels_must_be_binary() {
        assert!(LabelBatch::new(array![[0.5f64]]).is_err());
        assert!(LabelBatch::<f64>::new(Array2::zeros((0, 4))).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn bce_hand_values() {
        let y = labels(vec![1.0], 1, 1);
        let x = array![[0.5f64]];
        let one = WeightVector::ones(1);
        assert!((weighted_bce(x.view(), &y, &one).unwrap() - 0.693147).abs() < 1e-6);
        let nine = WeightVector {
            values: A1::from(vec![9.0]),
            warnings: vec![],
        };
        let want = 9.0 * -(0.5f64.ln());
        assert!((weighted_bce(x.view(), &y, &nine).unwrap() - want).abs() < 1e-12);
        assert!((want - 6.238325).abs() < 1e-6);
        let perfect = array![[1.0 - PROB_EPS]];
        assert!(weighted_bce(perfect.view(), &y, &nine).unwrap() < 1e-5);
    }

    #[test]
    fn bce_saturated_prediction_is_finite() {
        let y = labels(vec![1.0, 0.0], 1, 2);
        let x = array![[0.0f64, 1.0]];
        let l = weighted_bce(x.view(), &y, &WeightVector::ones(2)).unwrap();
        assert!(l.is_finite() && l > 10.0);
    }

    #[test]
    fn bce_shape_mismatch() {
        let y = labels(vec![1.0, 0.0], 1, 2);
        assert!(weighted_bce(array![[0.5f64]].view(), &y, &WeightVector::ones(2)).is_err());
        assert!(weighted_bce(array![[0.5f64, 0.5]].view(), &y, &WeightVector::ones(3)).is_err());
    }

    #[test]
    fn logit_grad_is_chain_rule() {
        let y = labels(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let w = WeightVector {
            values: A1::from(vec![3.0, 0.5]),
            warnings: vec![],
        };
        let p = array![[0.3f64, 0.8], [0.6, 0.1]];
        let gx = weighted_bce_grad(p.view(), &y, &w).unwrap();
        let gz = weighted_bce_logit_grad(p.view(), &y, &w).unwrap();
        for ((i, j), &g) in gz.indexed_iter() {
            let q = p[[i, j]];
            assert!((g - gx[[i, j]] * q * (1.0 - q)).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_hand_values() {
        let mut t = A1::<f64>::zeros(100);
        t.slice_mut(ndarray::s![..10]).fill(1.0);
        assert!(dice_loss(t.view(), t.view()).unwrap() < 0.05);

        let mut p = A1::<f64>::zeros(100);
        let mut q = A1::<f64>::zeros(100);
        p[0] = 1.0;
        p[1] = 1.0;
        q[5] = 1.0;
        q[6] = 1.0;
        assert!((dice_loss(p.view(), q.view()).unwrap() - 0.8).abs() < 1e-12);

        q[5] = 0.0;
        q[1] = 1.0;
        let l = dice_loss_smooth(p.view(), q.view(), 0.0).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iou_hand_values() {
        let a = array![1.0f64, 1.0, 0.0, 0.0];
        let b = array![0.0f64, 1.0, 1.0, 0.0];
        let c = array![0.0f64, 0.0, 1.0, 1.0];
        assert_eq!(iou_fscore(a.view(), a.view(), 0.5).unwrap(), (1.0, 1.0));
        assert_eq!(iou_fscore(a.view(), c.view(), 0.5).unwrap(), (0.0, 0.0));
        let (iou, f) = iou_fscore(a.view(), b.view(), 0.5).unwrap();
        assert_eq!((iou, f), (1.0 / 3.0, 0.5));
        let z = A1::<f64>::zeros(4);
        assert_eq!(iou_fscore(z.view(), z.view(), 0.5).unwrap(), (1.0, 1.0));
        assert!(iou_fscore(a.view(), array![1.0f64].view(), 0.5).is_err());
    }

    #[test]
    fn auc_hand_values() {
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.3, 0.4], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &l).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedAuc(_))
        ));
    }

    #[test]
    fn report_formats() {
        let mut r = EvalReport::default();
        r.push("auc", "hypodensity", 0.75);
        assert_eq!(r.to_tsv(), "auc\thypodensity\t0.750000\n");
        assert_eq!(r.get("auc", "hypodensity"), Some(0.75));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn unit_weights_equal_plain_bce(ps in prop::collection::vec(0.001f64..0.999, 12), ys in prop::collection::vec(any::<bool>(), 12)) {
            let y = labels(ys.iter().map(|&b| b as u8 as f64).collect(), 3, 4);
            let x = Array2::from_shape_vec((3, 4), ps.clone()).unwrap();
            let got = weighted_bce(x.view(), &y, &WeightVector::ones(4)).unwrap();
            let plain = -ps.iter().zip(&ys).map(|(&p, &t)| if t { p.ln() } else { (1.0 - p).ln() }).sum::<f64>() / 12.0;
            prop_assert!((got - plain).abs() < 1e-9);
        }

        #[test]
        fn auc_invariant_under_monotone_map(scores in prop::collection::vec(-5.0f64..5.0, 2..60), seed in any::<u64>()) {
            let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&mapped, &labels).unwrap());
        }
    }
}
