//! On-disk formats.
//!
//! A cube is a pair of files: a JSON header with exactly the keys
//! `height, width, bands, dtype, layout` and a raw little-endian payload in
//! band-interleaved-by-pixel order (pixel-major, band innermost). Cubes are
//! stored as `f32`; ground-truth and label rasters use the same scheme with
//! `u16` payloads and `bands = 1`. Class id 0 in a ground truth marks an
//! unlabeled pixel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::HyperCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U16,
}

impl Dtype {
    fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Bip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: Dtype,
    pub layout: Layout,
}

impl CubeHeader {
    fn payload_bytes(&self) -> u64 {
        (self.height * self.width * self.bands) as u64 * self.dtype.size()
    }
}

/// Per-pixel class ids. In ground truth, 0 is the unlabeled sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl GroundTruth {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// Largest class id present.
    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

fn read_header(path: &Path, dtype: Dtype) -> Result<CubeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: CubeHeader =
        serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if header.height == 0 || header.width == 0 || header.bands == 0 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            message: "height, width and bands must be at least 1".into(),
        });
    }
    if header.dtype != dtype {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            message: format!("expected dtype {dtype:?}, found {:?}", header.dtype),
        });
    }
    Ok(header)
}

fn read_payload(path: &Path, header: &CubeHeader) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = header.payload_bytes();
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn write_header(path: &Path, header: &CubeHeader) -> Result<()> {
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads an `f32` cube and promotes it to `f64`.
pub fn load_cube(header_path: impl AsRef<Path>, data_path: impl AsRef<Path>) -> Result<HyperCube> {
    let header = read_header(header_path.as_ref(), Dtype::F32)?;
    let bytes = read_payload(data_path.as_ref(), &header)?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    HyperCube::new(header.height, header.width, header.bands, data)
}

/// Writes a cube, quantizing every entry to `f32`.
pub fn save_cube(
    cube: &HyperCube,
    header_path: impl AsRef<Path>,
    data_path: impl AsRef<Path>,
) -> Result<()> {
    let header = CubeHeader {
        height: cube.height(),
        width: cube.width(),
        bands: cube.bands(),
        dtype: Dtype::F32,
        layout: Layout::Bip,
    };
    let mut bytes = Vec::with_capacity(cube.data().len() * 4);
    for &v in cube.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let data_path = data_path.as_ref();
    fs::write(data_path, bytes).map_err(|e| Error::io(data_path, e))?;
    write_header(header_path.as_ref(), &header)
}

pub fn load_ground_truth(
    header_path: impl AsRef<Path>,
    data_path: impl AsRef<Path>,
) -> Result<GroundTruth> {
    let header_path = header_path.as_ref();
    let header = read_header(header_path, Dtype::U16)?;
    if header.bands != 1 {
        return Err(Error::MalformedHeader {
            path: header_path.to_path_buf(),
            message: format!("label rasters have one band, found {}", header.bands),
        });
    }
    let bytes = read_payload(data_path.as_ref(), &header)?;
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    GroundTruth::new(header.height, header.width, labels)
}

pub fn save_ground_truth(
    gt: &GroundTruth,
    header_path: impl AsRef<Path>,
    data_path: impl AsRef<Path>,
) -> Result<()> {
    let header = CubeHeader {
        height: gt.height,
        width: gt.width,
        bands: 1,
        dtype: Dtype::U16,
        layout: Layout::Bip,
    };
    let bytes: Vec<u8> = gt.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    let data_path = data_path.as_ref();
    fs::write(data_path, bytes).map_err(|e| Error::io(data_path, e))?;
    write_header(header_path.as_ref(), &header)
}

/// Palette with black for class 0 followed by `classes` distinct colors.
///
/// The first colors are a fixed qualitative set; beyond that, hues are spread
/// evenly around the color wheel.
pub fn default_palette(classes: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 16] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ];
    let mut palette = vec![[0, 0, 0]];
    for c in 0..classes {
        if c < BASE.len() {
            palette.push(BASE[c]);
        } else {
            palette.push(hue_color(c as f64 * 0.618_033_988_75));
        }
    }
    palette
}

fn hue_color(turns: f64) -> [u8; 3] {
    let h = turns.fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Encodes a label raster as an 8-bit RGB PNG, one pixel per grid cell.
pub fn encode_label_png(
    labels: &[u16],
    height: usize,
    width: usize,
    palette: &[[u8; 3]],
) -> Result<Vec<u8>> {
    if labels.len() != height * width || height == 0 || width == 0 {
        return Err(Error::Shape(format!(
            "{} labels for a {height}x{width} image",
            labels.len()
        )));
    }
    let mut rgb = Vec::with_capacity(labels.len() * 3);
    for &id in labels {
        let color = palette.get(id as usize).ok_or(Error::PaletteRange {
            id: id as usize,
            len: palette.len(),
        })?;
        rgb.extend_from_slice(color);
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn save_label_png(
    path: impl AsRef<Path>,
    labels: &[u16],
    height: usize,
    width: usize,
    palette: &[[u8; 3]],
) -> Result<()> {
    let bytes = encode_label_png(labels, height, width, palette)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One evaluation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub seed: u64,
}

pub fn format_scores_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("oa,aa,kappa,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{:.6},{:.6},{:.6},{}\n",
            r.oa, r.aa, r.kappa, r.seed
        ));
    }
    out
}

pub fn save_scores_csv(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_scores_csv(rows)).map_err(|e| Error::io(path, e))
}
