//! On-disk formats: raw HU slices, 8-bit PNGs and the dataset manifest.
//!
//! HU slice file: three little-endian `i32` header fields (height, width,
//! reserved = 0) followed by `height * width` little-endian `i16` values in
//! row-major order.
//!
//! Manifest: UTF-8, tab-separated, one case per line. Lines starting with `#`
//! are header lines; the last of them names the columns:
//!
//! ```text
//! #case_id  patient_id  image_path  mask_path  hypodensity  irregular  blend  fluid_level  location
//! ```
//!
//! A header line `# image_format=png8` marks images that are already-windowed
//! 8-bit PNGs; otherwise images are HU slice files. Paths are relative to the
//! manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::phantom::{Location, SignLabels};
use crate::preprocess::HuSlice;

pub const HU_HEADER_BYTES: usize = 12;

pub fn encode_hu(slice: &HuSlice) -> Vec<u8> {
    let (h, w) = slice.values().dim();
    let mut buf = Vec::with_capacity(HU_HEADER_BYTES + 2 * h * w);
    for v in [h as i32, w as i32, 0i32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in slice.values().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_hu(bytes: &[u8]) -> Result<HuSlice> {
    if bytes.len() < HU_HEADER_BYTES {
        return Err(Error::Data("HU file shorter than its header".into()));
    }
    let field = |i: usize| i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (h, w) = (field(0), field(1));
    if h <= 0 || w <= 0 {
        return Err(Error::Data(format!("HU file declares {h}x{w} pixels")));
    }
    let (h, w) = (h as usize, w as usize);
    let body = &bytes[HU_HEADER_BYTES..];
    if body.len() != 2 * h * w {
        return Err(Error::Data(format!(
            "HU file declares {h}x{w} pixels but carries {} bytes of data",
            body.len()
        )));
    }
    let values: Vec<i16> = body
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    HuSlice::new(Array2::from_shape_vec((h, w), values).expect("length checked"))
}

pub fn write_hu(path: &Path, slice: &HuSlice) -> Result<()> {
    std::fs::write(path, encode_hu(slice)).map_err(|e| Error::io(path, e))
}

pub fn read_hu(path: &Path) -> Result<HuSlice> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_hu(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_png_gray(path: &Path, values: &Array2<u8>) -> Result<()> {
    let (h, w) = values.dim();
    let raw: Vec<u8> = values.iter().copied().collect();
    image::save_buffer(path, &raw, w as u32, h as u32, image::ColorType::L8).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    image::save_buffer(
        path,
        rgb,
        width as u32,
        height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_png_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("luma buffer"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Raw HU slice files.
    Hu16,
    /// Already-windowed 8-bit grayscale PNGs.
    Png8,
}

impl ImageFormat {
    fn tag(&self) -> &'static str {
        match self {
            ImageFormat::Hu16 => "hu16",
            ImageFormat::Png8 => "png8",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub case_id: String,
    pub patient_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub labels: SignLabels,
    pub location: Location,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub image_format: ImageFormat,
    pub rows: Vec<ManifestRow>,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

const COLUMNS: [&str; 9] = [
    "case_id",
    "patient_id",
    "image_path",
    "mask_path",
    "hypodensity",
    "irregular",
    "blend",
    "fluid_level",
    "location",
];

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# ichnet manifest v1").unwrap();
        writeln!(s, "# image_format={}", self.image_format.tag()).unwrap();
        writeln!(
            s,
            "# location regions (fractions of edge): {}",
            Location::describe_regions()
        )
        .unwrap();
        writeln!(s, "#{}", COLUMNS.join("\t")).unwrap();
        for r in &self.rows {
            let l = r.labels.as_array().map(|b| if b { "1" } else { "0" });
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.case_id,
                r.patient_id,
                r.image_path.display(),
                r.mask_path.display(),
                l[0],
                l[1],
                l[2],
                l[3],
                r.location
            )
            .unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut image_format = ImageFormat::Hu16;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |msg: String| Error::Data(format!("manifest line {}: {msg}", lineno + 1));
            if let Some(header) = line.strip_prefix('#') {
                if let Some(fmt) = header.trim().strip_prefix("image_format=") {
                    image_format = match fmt.trim() {
                        "hu16" => ImageFormat::Hu16,
                        "png8" => ImageFormat::Png8,
                        other => return Err(bad(format!("unknown image format `{other}`"))),
                    };
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(bad(format!(
                    "expected {} fields, found {}",
                    COLUMNS.len(),
                    f.len()
                )));
            }
            let flag = |i: usize| match f[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(bad(format!("{} must be 0 or 1, got `{other}`", COLUMNS[i]))),
            };
            rows.push(ManifestRow {
                case_id: f[0].to_string(),
                patient_id: f[1].to_string(),
                image_path: PathBuf::from(f[2]),
                mask_path: PathBuf::from(f[3]),
                labels: SignLabels::from_array([flag(4)?, flag(5)?, flag(6)?, flag(7)?]),
                location: f[8].parse().map_err(|e: Error| bad(e.to_string()))?,
            });
        }
        Ok(Self {
            image_format,
            rows,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hu_roundtrip(h in 16usize..24, w in 16usize..24, seed in any::<i16>()) {
            let values = Array2::from_shape_fn((h, w), |(r, c)| seed.wrapping_add((r * 31 + c * 7) as i16));
            let s = HuSlice::new(values).unwrap();
            prop_assert_eq!(decode_hu(&encode_hu(&s)).unwrap(), s);
        }
    }

    #[test]
    fn hu_header_layout() {
        let s = HuSlice::new(Array2::from_elem((16, 17), -2i16)).unwrap();
        let b = encode_hu(&s);
        assert_eq!(&b[..12], &[16, 0, 0, 0, 17, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[12..14], &[0xfe, 0xff]);
        assert!(decode_hu(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let m = Manifest {
            image_format: ImageFormat::Png8,
            rows: vec![ManifestRow {
                case_id: "P000_S00".into(),
                patient_id: "P000".into(),
                image_path: "images/a.png".into(),
                mask_path: "masks/a.png".into(),
                labels: SignLabels::from_array([true, false, false, true]),
                location: Location::Thalamus,
            }],
            base_dir: PathBuf::from("/data"),
        };
        let text = m.to_text();
        assert!(text
            .lines()
            .nth(3)
            .unwrap()
            .starts_with("#case_id\tpatient_id"));
        assert_eq!(Manifest::parse(&text, Path::new("/data")).unwrap(), m);
        let broken = text.replace("\tthalamus", "\tcerebellum");
        assert!(matches!(
            Manifest::parse(&broken, Path::new(".")),
            Err(Error::Data(_))
        ));
    }
}
