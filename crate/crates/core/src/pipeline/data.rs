use std::path::Path;

use ndarray::{Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::io::{self, ImageFormat, Manifest};
use crate::phantom::{Location, PhantomCase, SignLabels};
use crate::preprocess::{self, HuSlice, IntensityImage, PreprocessConfig};

/// One slice ready for the networks: intensities scaled to `[0, 1]`, mask
/// as `0/1`, both already moved by the centering offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub case_id: String,
    pub patient_id: String,
    pub location: Location,
    pub labels: SignLabels,
    pub image: Array2<f32>,
    pub mask: Option<Array2<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub preprocessed: bool,
}

fn prepare(
    img: IntensityImage,
    mask: Option<Array2<u8>>,
    pre: &PreprocessConfig,
    preprocessed: bool,
) -> Result<(Array2<f32>, Option<Array2<f32>>)> {
    let (img, offset) = if preprocessed {
        preprocess::clean_with_offset(img, pre)?
    } else {
        (img, (0, 0))
    };
    if let Some(m) = &mask {
        if m.dim() != img.dim() {
            return Err(Error::Data(format!(
                "mask {:?} does not match image {:?}",
                m.dim(),
                img.dim()
            )));
        }
    }
    let mask =
        mask.map(|m| preprocess::translate(&m.mapv(|v| if v > 0 { 1.0f32 } else { 0.0 }), offset));
    Ok((img.into_values().mapv_into(|v| v / 255.0), mask))
}

fn sample_from(
    meta: (&str, &str, Location, SignLabels),
    img: IntensityImage,
    mask: Option<Array2<u8>>,
    pre: &PreprocessConfig,
    preprocessed: bool,
) -> Result<Sample> {
    let (case_id, patient_id, location, labels) = meta;
    let (image, mask) = prepare(img, mask, pre, preprocessed)
        .map_err(|e| Error::Data(format!("case {case_id}: {e}")))?;
    Ok(Sample {
        case_id: case_id.to_string(),
        patient_id: patient_id.to_string(),
        location,
        labels,
        image,
        mask,
    })
}

fn window(slice: &HuSlice, pre: &PreprocessConfig) -> Result<IntensityImage> {
    preprocess::window_hu(slice, pre.window)
}

impl Dataset {
    /// Loads every manifest row. With `preprocessed` the full cleanup
    /// pipeline runs after windowing; otherwise only windowing. A mask path
    /// of `-` marks a case without a mask.
    pub fn from_manifest(
        manifest: &Manifest,
        pre: &PreprocessConfig,
        preprocessed: bool,
    ) -> Result<Self> {
        pre.validate()?;
        let mut samples = Vec::with_capacity(manifest.rows.len());
        for row in &manifest.rows {
            let path = manifest.resolve(&row.image_path);
            let img = match manifest.image_format {
                ImageFormat::Hu16 => window(&io::read_hu(&path)?, pre)?,
                ImageFormat::Png8 => IntensityImage::from_u8(&io::read_png_gray(&path)?),
            };
            let mask = if row.mask_path.as_os_str() == "-" {
                None
            } else {
                Some(io::read_png_gray(&manifest.resolve(&row.mask_path))?)
            };
            samples.push(sample_from(
                (&row.case_id, &row.patient_id, row.location, row.labels),
                img,
                mask,
                pre,
                preprocessed,
            )?);
        }
        Self::checked(samples, preprocessed)
    }

    pub fn load(manifest_path: &Path, pre: &PreprocessConfig, preprocessed: bool) -> Result<Self> {
        Self::from_manifest(&Manifest::read(manifest_path)?, pre, preprocessed)
    }

    /// Builds a dataset straight from generated phantom cases.
    pub fn from_cases(
        cases: &[PhantomCase],
        pre: &PreprocessConfig,
        preprocessed: bool,
    ) -> Result<Self> {
        pre.validate()?;
        let samples = cases
            .iter()
            .map(|c| {
                sample_from(
                    (&c.case_id, &c.patient_id, c.location, c.labels),
                    window(&c.slice, pre)?,
                    Some(c.mask.clone()),
                    pre,
                    preprocessed,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::checked(samples, preprocessed)
    }

    fn checked(samples: Vec<Sample>, preprocessed: bool) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Data("dataset is empty".into()));
        };
        let dim = first.image.dim();
        if let Some(bad) = samples.iter().find(|s| s.image.dim() != dim) {
            return Err(Error::Data(format!(
                "case {} is {:?}, expected {:?}",
                bad.case_id,
                bad.image.dim(),
                dim
            )));
        }
        Ok(Self {
            samples,
            preprocessed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_dim(&self) -> (usize, usize) {
        self.samples[0].image.dim()
    }

    /// `(case_id, patient_id)` per sample, the input of
    /// [`split_dataset`](super::split_dataset).
    pub fn keys(&self) -> Vec<(&str, &str)> {
        self.samples
            .iter()
            .map(|s| (s.case_id.as_str(), s.patient_id.as_str()))
            .collect()
    }

    /// Stacks the images at `idx` into `N x 1 x H x W`.
    pub fn images(&self, idx: &[usize]) -> Array4<f32> {
        stack(
            idx.iter().map(|&i| &self.samples[i].image),
            self.image_dim(),
        )
    }

    /// Stacks the masks at `idx`; a data error names the first case
    /// without one.
    pub fn masks(&self, idx: &[usize]) -> Result<Array4<f32>> {
        let masks = idx
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                s.mask
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("case {} has no mask", s.case_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(stack(masks.into_iter(), self.image_dim()))
    }

    /// `N x 4` label matrix in sign order.
    pub fn labels(&self, idx: &[usize]) -> Array2<f32> {
        Array2::from_shape_fn((idx.len(), 4), |(n, c)| {
            if self.samples[idx[n]].labels.as_array()[c] {
                1.0
            } else {
                0.0
            }
        })
    }
}

fn stack<'a>(items: impl Iterator<Item = &'a Array2<f32>>, (h, w): (usize, usize)) -> Array4<f32> {
    let views: Vec<_> = items.map(|a| a.view().insert_axis(Axis(0))).collect();
    if views.is_empty() {
        return Array4::zeros((0, 1, h, w));
    }
    ndarray::stack(Axis(0), &views).expect("equal shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cases, PhantomSpec};

    fn spec() -> PhantomSpec {
        PhantomSpec {
            image_size: 64,
            patients: 2,
            slices_per_patient: 2,
            ..Default::default()
        }
    }

    #[test]
    fn masks_follow_centering() {
        let cases = generate_cases(&spec()).unwrap();
        let pre = PreprocessConfig::default();
        let raw = Dataset::from_cases(&cases, &pre, false).unwrap();
        let cooked = Dataset::from_cases(&cases, &pre, true).unwrap();
        for (r, c) in raw.samples.iter().zip(&cooked.samples) {
            let (rm, cm) = (r.mask.as_ref().unwrap(), c.mask.as_ref().unwrap());
            assert_eq!(rm.sum(), cm.sum());
            // the shifted mask still covers the same hematoma pixels
            let raw_inside = (&r.image * rm).sum();
            let cooked_inside = (&c.image * cm).sum();
            assert!((raw_inside - cooked_inside).abs() < 1e-3 * raw_inside);
        }
        assert_eq!(cooked.images(&[0, 3]).dim(), (2, 1, 64, 64));
        assert_eq!(cooked.labels(&[1]).dim(), (1, 4));
    }

    #[test]
    fn manifest_roundtrip_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = crate::phantom::generate_dataset(&spec(), dir.path()).unwrap();
        let pre = PreprocessConfig::default();
        let from_disk = Dataset::load(&manifest, &pre, true).unwrap();
        let in_memory = Dataset::from_cases(&generate_cases(&spec()).unwrap(), &pre, true).unwrap();
        assert_eq!(from_disk, in_memory);
    }
}
