//! Synthetic CT slices with known hematoma masks and sign labels.
//!
//! Each patient owns a brain geometry (ellipse, skull ring, intensity
//! offsets) and a hematoma site; every slice of the patient reuses them with
//! small jitter, so slices of one patient are near-duplicates. The four sign
//! labels are drawn per slice and each one deterministically modifies the
//! blob:
//!
//! * hypodensity: a darker disk in the blob centre,
//! * irregular: the boundary radius follows a multi-lobe sinusoid,
//! * blend: one vertical half of the blob is darker than the other,
//! * fluid level: the upper half of the blob is darker (horizontal interface).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{self, ImageFormat, Manifest, ManifestRow};
use crate::preprocess::{HuSlice, MIN_SLICE_EDGE};

pub const SIGN_NAMES: [&str; 4] = ["hypodensity", "irregular", "blend", "fluid_level"];

pub const AIR_HU: f64 = -1000.0;
pub const SKULL_HU: f64 = 1200.0;
const HEADREST_HU: f64 = 400.0;
const SPECK_HU: f64 = 600.0;

/// Intensity offsets applied inside the blob for each sign.
pub const HYPODENSITY_DROP_HU: f64 = 38.0;
pub const BLEND_DROP_HU: f64 = 24.0;
pub const FLUID_DROP_HU: f64 = 22.0;
/// Hypodense disk radius relative to the blob radius.
pub const HYPODENSITY_RADIUS: f64 = 0.45;

const PLACEMENT_ATTEMPTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SignLabels {
    pub hypodensity: bool,
    pub irregular: bool,
    pub blend: bool,
    pub fluid_level: bool,
}

impl SignLabels {
    pub fn as_array(&self) -> [bool; 4] {
        [
            self.hypodensity,
            self.irregular,
            self.blend,
            self.fluid_level,
        ]
    }

    pub fn from_array(a: [bool; 4]) -> Self {
        Self {
            hypodensity: a[0],
            irregular: a[1],
            blend: a[2],
            fluid_level: a[3],
        }
    }

    pub fn any(&self) -> bool {
        self.as_array().iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Putamen,
    Thalamus,
    Subcortical,
}

impl Location {
    pub const ALL: [Location; 3] = [Location::Putamen, Location::Thalamus, Location::Subcortical];

    pub fn as_str(&self) -> &'static str {
        match self {
            Location::Putamen => "putamen",
            Location::Thalamus => "thalamus",
            Location::Subcortical => "subcortical",
        }
    }

    /// Image regions (fractions of the edge length, half-open
    /// `[row_lo, row_hi) x [col_lo, col_hi)`) that contain the blob centroid.
    pub fn regions(&self) -> &'static [[f64; 4]] {
        match self {
            Location::Putamen => &[[0.40, 0.52, 0.34, 0.42], [0.40, 0.52, 0.58, 0.66]],
            Location::Thalamus => &[[0.52, 0.62, 0.45, 0.55]],
            Location::Subcortical => &[[0.30, 0.38, 0.38, 0.62]],
        }
    }

    pub fn contains(&self, row: f64, col: f64, size: usize) -> bool {
        let (r, c) = (row / size as f64, col / size as f64);
        self.regions()
            .iter()
            .any(|[r0, r1, c0, c1]| r >= *r0 && r < *r1 && c >= *c0 && c < *c1)
    }

    /// One-line description of all regions, as written to manifest headers.
    pub fn describe_regions() -> String {
        Location::ALL
            .iter()
            .map(|l| {
                let rects: Vec<String> = l
                    .regions()
                    .iter()
                    .map(|[a, b, c, d]| format!("rows[{a},{b})xcols[{c},{d})"))
                    .collect();
                format!("{}={}", l.as_str(), rects.join("|"))
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "putamen" => Ok(Location::Putamen),
            "thalamus" => Ok(Location::Thalamus),
            "subcortical" => Ok(Location::Subcortical),
            other => Err(Error::Config(format!("unknown location `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub patients: usize,
    pub slices_per_patient: usize,
    /// Per-class label probability, in [`SIGN_NAMES`] order.
    pub prevalence: [f64; 4],
    /// Probability of putamen, thalamus, subcortical.
    pub location_mix: [f64; 3],
    pub hu_brain: f64,
    pub hu_blood: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            patients: 25,
            slices_per_patient: 10,
            prevalence: [0.35, 0.25, 0.15, 0.05],
            location_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            hu_brain: 30.0,
            hu_blood: 60.0,
            noise_sd: 4.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_SLICE_EDGE.max(32) || !self.image_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "image_size {} must be even and at least 32",
                self.image_size
            )));
        }
        if self.patients == 0 || self.slices_per_patient == 0 {
            return Err(Error::Config(
                "patients and slices_per_patient must be positive".into(),
            ));
        }
        let probs = self.prevalence.iter().chain(self.location_mix.iter());
        if probs.clone().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if (self.location_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("location_mix must sum to 1".into()));
        }
        if self.hu_blood.partial_cmp(&self.hu_brain) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("hu_blood must exceed hu_brain".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config(
                "noise_sd must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn patient_id(index: usize) -> String {
        format!("P{index:03}")
    }

    pub fn case_id(patient_id: &str, case_index: usize) -> String {
        format!("{patient_id}_S{case_index:02}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub slice: HuSlice,
    /// 1 = hematoma.
    pub mask: Array2<u8>,
    pub labels: SignLabels,
    pub patient_id: String,
    pub location: Location,
    pub case_id: String,
}

/// Brain geometry and hematoma site shared by all slices of a patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientGeometry {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub skull_thickness: f64,
    pub brain_offset_hu: f64,
    pub blood_offset_hu: f64,
    pub location: Location,
    /// Region index within the location (left/right for putamen).
    pub side: usize,
    /// Blob centre as a fraction of the region, `(row, col)`.
    pub site: (f64, f64),
    pub radius_frac: f64,
    pub lobes: u32,
    pub lobe_phase: f64,
    pub lobe_depth: f64,
    pub blend_left_dark: bool,
    pub specks: Vec<(usize, usize)>,
}

fn stream(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn choose_location(mix: &[f64; 3], u: f64) -> Location {
    let mut acc = 0.0;
    for (loc, p) in Location::ALL.iter().zip(mix) {
        acc += p;
        if u < acc {
            return *loc;
        }
    }
    // guard against rounding in the cumulative sum
    *Location::ALL
        .iter()
        .zip(mix)
        .rev()
        .find(|(_, p)| **p > 0.0)
        .map(|(l, _)| l)
        .unwrap_or(&Location::Subcortical)
}

/// Deterministic per-patient geometry.
pub fn patient_geometry(spec: &PhantomSpec, patient_id: &str) -> PatientGeometry {
    let mut rng = stream(&[b"patient", &spec.seed.to_le_bytes(), patient_id.as_bytes()]);
    let s = spec.image_size as f64;
    let location = choose_location(&spec.location_mix, rng.random());
    let sides = location.regions().len();
    let n_specks = rng.random_range(0..=3);
    let specks = (0..n_specks)
        .map(|_| {
            // corners, outside the skull
            let r = if rng.random() {
                rng.random_range(0.01..0.06)
            } else {
                rng.random_range(0.90..0.94)
            };
            let c = if rng.random() {
                rng.random_range(0.01..0.06)
            } else {
                rng.random_range(0.92..0.97)
            };
            ((r * s) as usize, (c * s) as usize)
        })
        .collect();
    PatientGeometry {
        center: (
            s * (0.5 + rng.random_range(-0.02..0.02)),
            s * (0.5 + rng.random_range(-0.025..0.025)),
        ),
        radii: (
            s * rng.random_range(0.35..0.39),
            s * rng.random_range(0.34..0.37),
        ),
        skull_thickness: (0.03 * s).max(2.0),
        brain_offset_hu: rng.random_range(-4.0..4.0),
        blood_offset_hu: rng.random_range(-3.0..3.0),
        location,
        side: rng.random_range(0..sides),
        site: (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
        radius_frac: rng.random_range(0.08..0.11),
        lobes: rng.random_range(3..=5),
        lobe_phase: rng.random_range(0.0..std::f64::consts::TAU),
        lobe_depth: rng.random_range(0.25..0.32),
        blend_left_dark: rng.random(),
        specks,
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    irregular: bool,
    lobes: u32,
    phase: f64,
    depth: f64,
}

impl Blob {
    fn boundary(&self, theta: f64) -> f64 {
        if self.irregular {
            self.radius * (1.0 + self.depth * (self.lobes as f64 * theta + self.phase).sin())
        } else {
            self.radius
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let d = (dy * dy + dx * dx).sqrt();
        d <= self.boundary(dy.atan2(dx))
    }
}

fn inside_ellipse(y: f64, x: f64, c: (f64, f64), r: (f64, f64)) -> bool {
    let (u, v) = ((y - c.0) / r.0, (x - c.1) / r.1);
    u * u + v * v <= 1.0
}

/// Generates one slice; a pure function of `(spec, patient_id, case_index)`.
pub fn generate_case(
    spec: &PhantomSpec,
    patient_id: &str,
    case_index: usize,
) -> Result<PhantomCase> {
    spec.validate()?;
    let geo = patient_geometry(spec, patient_id);
    let mut rng = stream(&[
        b"case",
        &spec.seed.to_le_bytes(),
        patient_id.as_bytes(),
        &(case_index as u64).to_le_bytes(),
    ]);
    let n = spec.image_size;
    let s = n as f64;

    let labels = SignLabels::from_array(std::array::from_fn(|c| {
        rng.random::<f64>() < spec.prevalence[c]
    }));

    let [r0, r1, c0, c1] = geo.location.regions()[geo.side];
    let margin = (0.015 * s).max(1.0);
    let inner = (geo.radii.0 - margin, geo.radii.1 - margin);
    let mut placed = None;
    for attempt in 0..PLACEMENT_ATTEMPTS {
        // later attempts pull the blob toward the region centre and shrink it
        let t = attempt as f64 / PLACEMENT_ATTEMPTS as f64;
        let pull = |f: f64| f + t * (0.5 - f);
        let fy = pull((geo.site.0 + rng.random_range(-0.08..0.08)).clamp(0.05, 0.95));
        let fx = pull((geo.site.1 + rng.random_range(-0.08..0.08)).clamp(0.05, 0.95));
        let blob = Blob {
            cy: s * (r0 + fy * (r1 - r0)),
            cx: s * (c0 + fx * (c1 - c0)),
            radius: s * geo.radius_frac * rng.random_range(0.9..1.1) * (1.0 - 0.5 * t),
            irregular: labels.irregular,
            lobes: geo.lobes,
            phase: geo.lobe_phase,
            depth: geo.lobe_depth,
        };
        let mut mask = Array2::<u8>::zeros((n, n));
        let mut fits = true;
        for ((r, c), m) in mask.indexed_iter_mut() {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            if blob.contains(y, x) {
                if !inside_ellipse(y, x, geo.center, inner) {
                    fits = false;
                }
                *m = 1;
            }
        }
        if fits && mask.iter().any(|&m| m == 1) {
            placed = Some((blob, mask));
            break;
        }
    }
    let (blob, mask) = placed.ok_or_else(|| {
        Error::Generation(format!(
            "{patient_id} slice {case_index}: hematoma does not fit inside the brain after {PLACEMENT_ATTEMPTS} attempts"
        ))
    })?;

    let brain_hu = spec.hu_brain + geo.brain_offset_hu;
    let blood_hu = spec.hu_blood + geo.blood_offset_hu;
    let outer = (
        geo.radii.0 + geo.skull_thickness,
        geo.radii.1 + geo.skull_thickness,
    );
    let mut hu = Array2::<f64>::from_elem((n, n), AIR_HU);
    for ((r, c), v) in hu.indexed_iter_mut() {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        if inside_ellipse(y, x, geo.center, geo.radii) {
            *v = if mask[[r, c]] == 1 {
                let mut b = blood_hu;
                let (dy, dx) = (y - blob.cy, x - blob.cx);
                if labels.hypodensity
                    && (dy * dy + dx * dx).sqrt() <= HYPODENSITY_RADIUS * blob.radius
                {
                    b -= HYPODENSITY_DROP_HU;
                }
                if labels.blend && ((dx < 0.0) == geo.blend_left_dark) {
                    b -= BLEND_DROP_HU;
                }
                if labels.fluid_level && dy < 0.0 {
                    b -= FLUID_DROP_HU;
                }
                b
            } else {
                brain_hu
            };
        } else if inside_ellipse(y, x, geo.center, outer) {
            *v = SKULL_HU;
        }
    }
    if n >= 64 {
        let (c_lo, c_hi) = ((0.2 * s) as usize, (0.8 * s) as usize);
        for r in n - 2..n {
            for c in c_lo..c_hi {
                hu[[r, c]] = HEADREST_HU;
            }
        }
    }
    for &(r, c) in &geo.specks {
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            if r + dr < n && c + dc < n {
                hu[[r + dr, c + dc]] = SPECK_HU;
            }
        }
    }
    if spec.noise_sd > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sd).expect("validated sd");
        hu.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    let values = hu.mapv(|v| v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);

    Ok(PhantomCase {
        slice: HuSlice::new(values)?,
        mask,
        labels,
        patient_id: patient_id.to_string(),
        location: geo.location,
        case_id: PhantomSpec::case_id(patient_id, case_index),
    })
}

/// All cases in patient-major order.
pub fn generate_cases(spec: &PhantomSpec) -> Result<Vec<PhantomCase>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.patients * spec.slices_per_patient);
    for p in 0..spec.patients {
        let pid = PhantomSpec::patient_id(p);
        for s in 0..spec.slices_per_patient {
            out.push(generate_case(spec, &pid, s)?);
        }
    }
    Ok(out)
}

/// Writes every case (HU file + mask PNG) and a manifest; returns the
/// manifest path.
pub fn generate_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<PathBuf> {
    let cases = generate_cases(spec)?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rows = Vec::with_capacity(cases.len());
    for case in &cases {
        let image_path = PathBuf::from("images").join(format!("{}.hu", case.case_id));
        let mask_path = PathBuf::from("masks").join(format!("{}.png", case.case_id));
        io::write_hu(&out_dir.join(&image_path), &case.slice)?;
        io::write_png_gray(&out_dir.join(&mask_path), &case.mask.mapv(|m| m * 255))?;
        rows.push(ManifestRow {
            case_id: case.case_id.clone(),
            patient_id: case.patient_id.clone(),
            image_path,
            mask_path,
            labels: case.labels,
            location: case.location,
        });
    }
    let manifest = Manifest {
        image_format: ImageFormat::Hu16,
        rows,
        base_dir: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.tsv");
    manifest.write(&path)?;
    let spec_path = out_dir.join("phantom.json");
    std::fs::write(
        &spec_path,
        serde_json::to_string_pretty(spec).expect("spec serialises"),
    )
    .map_err(|e| Error::io(&spec_path, e))?;
    Ok(path)
}
