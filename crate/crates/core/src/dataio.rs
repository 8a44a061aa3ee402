//! Image and label-map codecs (PNG, binary PPM/PGM), dataset manifests and
//! colorized label rendering.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// Void label in 8-bit annotations.
pub const VOID_LABEL: u32 = 255;

const PALETTE_SEED: u64 = 0x5EED_C0105;

/// A 3×H×W RGB image with values in `[0, 1]` and H, W ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (c, h, w) = tensor.dims3()?;
        if c != 3 {
            return Err(contract(format!("images are RGB, got {c} channels")));
        }
        if h < 2 || w < 2 {
            return Err(Error::Degenerate(format!("image {w}x{h} is smaller than 2x2")));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self(tensor))
    }

    /// Interleaved 8-bit RGB rows → planar `p / 255`.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(contract("rgb buffer size does not match dimensions"));
        }
        let n = width * height;
        let t = Tensor::from_fn(&[3, height, width], |i| f64::from(rgb[(i % n) * 3 + i / n]) / 255.0);
        Self::new(t)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.height() * self.width();
        let d = self.0.data();
        (0..n * 3)
            .map(|i| (d[(i % 3) * n + i / 3] * 255.0).round() as u8)
            .collect()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let fail = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    ImageReader::open(path)
        .map_err(|e| fail(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| fail(e.to_string()))?
        .decode()
        .map_err(|e| fail(e.to_string()))
}

/// Loads an 8-bit PNG or binary PPM as RGB in `[0, 1]`. Grayscale inputs are
/// replicated across the three channels; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = decode(path)?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("unsupported pixel format {other:?}; expected 8 bits per channel"),
            })
        }
    }
    let rgb = img.to_rgb8();
    ImageTensor::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw()).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Writes an image quantized to 8 bits: binary PPM for `.ppm`, PNG otherwise.
pub fn save_image(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (image.width(), image.height());
    let rgb = image.to_rgb8();
    if has_extension(path, "ppm") {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(&rgb);
        return fs::write(path, bytes).map_err(|e| write_err(path, e));
    }
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, rgb).expect("sized above");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| write_err(path, e))
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Loads a single-channel 8- or 16-bit PNG or binary PGM of label ids.
/// 8-bit maps treat 255 as void.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let map = match img {
        DynamicImage::ImageLuma8(buf) => {
            LabelMap::new(h, w, buf.into_raw().into_iter().map(u32::from).collect())?.with_void(VOID_LABEL)
        }
        DynamicImage::ImageLuma16(buf) => LabelMap::new(h, w, buf.into_raw().into_iter().map(u32::from).collect())?,
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!(
                    "label maps must be single-channel, found {:?}; convert to an 8/16-bit grayscale PNG or PGM",
                    other.color()
                ),
            })
        }
    };
    Ok(map)
}

/// Writes a binary PGM (P5) label map with maxval 255. Labels must be < 256.
pub fn save_label_map_pgm(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if labels.max_label() > 255 {
        return Err(write_err(path, "PGM label maps hold ids up to 255"));
    }
    let mut file = fs::File::create(path).map_err(|e| write_err(path, e))?;
    write!(file, "P5\n{} {}\n255\n", labels.width(), labels.height()).map_err(|e| write_err(path, e))?;
    let bytes: Vec<u8> = labels.labels().iter().map(|&l| l as u8).collect();
    file.write_all(&bytes).map_err(|e| write_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelOutput {
    /// 16-bit grayscale PNG of label ids.
    Raw,
    /// RGB PNG, one stable color per label id.
    Colorized,
}

/// Stable color for a label id.
pub fn palette_color(label: u32) -> [u8; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(PALETTE_SEED);
    rng.set_stream(u64::from(label));
    rng.gen()
}

pub fn colorize(labels: &LabelMap) -> Vec<u8> {
    let colors: BTreeMap<u32, [u8; 3]> = labels.distinct().into_iter().map(|l| (l, palette_color(l))).collect();
    labels.labels().iter().flat_map(|l| colors[l]).collect()
}

pub fn save_label_map(labels: &LabelMap, path: impl AsRef<Path>, mode: LabelOutput) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (labels.width() as u32, labels.height() as u32);
    match mode {
        LabelOutput::Raw => {
            if labels.max_label() > u32::from(u16::MAX) {
                return Err(write_err(
                    path,
                    format!("label {} does not fit in 16 bits", labels.max_label()),
                ));
            }
            let data: Vec<u16> = labels.labels().iter().map(|&l| l as u16).collect();
            let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w, h, data).expect("sized by label map");
            buf.save_with_format(path, ImageFormat::Png)
                .map_err(|e| write_err(path, e))
        }
        LabelOutput::Colorized => {
            let buf: ImageBuffer<Rgb<u8>, _> =
                ImageBuffer::from_raw(w, h, colorize(labels)).expect("sized by label map");
            buf.save_with_format(path, ImageFormat::Png)
                .map_err(|e| write_err(path, e))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub ground_truth: Vec<PathBuf>,
}

impl ManifestEntry {
    /// File stem of the image, used to name outputs.
    pub fn stem(&self) -> String {
        image_stem(&self.image)
    }
}

pub fn image_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn single(image: PathBuf) -> Self {
        Self {
            entries: vec![ManifestEntry {
                image,
                ground_truth: Vec::new(),
            }],
        }
    }
}

/// Parses manifest text. Each non-blank line holds an image path followed by
/// tab-separated ground-truth paths; `#` starts a comment line. Relative
/// paths resolve against `base`. Returns every problem found, each tagged
/// with its line number.
pub fn parse_manifest(text: &str, base: &Path) -> std::result::Result<DatasetManifest, Vec<String>> {
    let mut entries = Vec::new();
    let mut diagnostics = Vec::new();
    let mut stems: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut paths = Vec::new();
        let mut ok = true;
        for (col, field) in line.split('\t').enumerate() {
            let field = field.trim();
            if field.is_empty() {
                diagnostics.push(format!("line {line_no}: column {} is empty", col + 1));
                ok = false;
                continue;
            }
            let p = base.join(field);
            if !p.is_file() {
                diagnostics.push(format!("line {line_no}: {} does not exist", p.display()));
                ok = false;
            }
            paths.push(p);
        }
        if !ok || paths.is_empty() {
            continue;
        }
        let image = paths.remove(0);
        let stem = image_stem(&image);
        if let Some(first) = stems.insert(stem.clone(), line_no) {
            diagnostics.push(format!(
                "line {line_no}: image stem '{stem}' already used on line {first}"
            ));
            continue;
        }
        entries.push(ManifestEntry {
            image,
            ground_truth: paths,
        });
    }
    if entries.is_empty() && diagnostics.is_empty() {
        diagnostics.push("manifest has no entries".to_string());
    }
    if diagnostics.is_empty() {
        Ok(DatasetManifest { entries })
    } else {
        Err(diagnostics)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        diagnostics: vec![e.to_string()],
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base).map_err(|diagnostics| Error::Manifest {
        path: path.to_path_buf(),
        diagnostics,
    })
}
