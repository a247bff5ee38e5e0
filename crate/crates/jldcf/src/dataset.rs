//! Dataset ingestion: paired RGB / depth / ground-truth directories keyed
//! by filename stem, resized to the network input resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::DataError;
use crate::jl::{depth_to_3ch, DepthMap};
use crate::kernels::resize_bilinear_plane;
use crate::metrics::GroundTruth;
use crate::tensor::Tensor;

/// Directory layout and resize policy of one dataset.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub rgb_dir: String,
    pub depth_dir: String,
    pub gt_dir: String,
    /// Network input side length everything is resized to.
    pub input_size: usize,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, input_size: usize) -> Self {
        DatasetSpec {
            root: root.into(),
            rgb_dir: "RGB".into(),
            depth_dir: "depth".into(),
            gt_dir: "GT".into(),
            input_size,
        }
    }
}

/// One RGB-D training sample with its ground truth, already resized.
#[derive(Debug, Clone)]
pub struct SampleTriple {
    pub stem: String,
    /// 1x3xHxH in [0, 1].
    pub rgb: Tensor,
    /// 1x3xHxH in [0, 1]: depth normalized to [0, 255], replicated to
    /// three channels, then scaled by 1/255 like the RGB input.
    pub depth3: Tensor,
    /// 1x1xHxH soft target in [0, 1] (bilinear from the native mask).
    pub gt_train: Tensor,
    /// Native-resolution binary ground truth, for evaluation.
    pub gt_native: GroundTruth,
    pub native_width: usize,
    pub native_height: usize,
}

/// Ingestion result: triples in lexicographic stem order plus the stems
/// that were skipped and why.
#[derive(Debug)]
pub struct IngestReport {
    pub triples: Vec<SampleTriple>,
    pub skipped: Vec<(String, String)>,
}

fn is_image_ext(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png") | Some("jpg") | Some("jpeg")
    )
}

fn stems_of(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DataError> {
    if !dir.is_dir() {
        return Err(DataError::MissingDir(dir.to_path_buf()));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_ext(p))
        .collect();
    entries.sort();
    let mut map = BTreeMap::new();
    for path in entries {
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            map.entry(stem.to_string()).or_insert(path);
        }
    }
    Ok(map)
}

fn decode(path: &Path) -> Result<image::DynamicImage, DataError> {
    image::open(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// RGB image as three planes in [0, 1].
pub fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = vec![0.0; 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planes[c * w * h + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok((w, h, planes))
}

/// Depth map with its raw stored values (8- or 16-bit).
pub fn load_depth(path: &Path) -> Result<DepthMap, DataError> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        image::DynamicImage::ImageLuma16(ref buf) => {
            buf.pixels().map(|p| p.0[0] as f64).collect()
        }
        other => other.to_luma8().pixels().map(|p| p.0[0] as f64).collect(),
    };
    Ok(DepthMap::new(w, h, data))
}

/// Stored 8-bit mask as raw luma bytes.
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw()))
}

pub fn save_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), DataError> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn resize_planes(planes: &[f64], channels: usize, (sw, sh): (usize, usize), target: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels * target * target);
    for c in 0..channels {
        let plane = &planes[c * sw * sh..(c + 1) * sw * sh];
        out.extend(resize_bilinear_plane(plane, (sw, sh), (target, target)));
    }
    out
}

/// Assemble one triple from decoded images, applying the resize policy.
pub fn build_triple(
    stem: &str,
    (rgb_w, rgb_h, rgb_planes): (usize, usize, Vec<f64>),
    depth: DepthMap,
    (gt_w, gt_h, gt_bytes): (usize, usize, Vec<u8>),
    input_size: usize,
) -> Result<SampleTriple, DataError> {
    let h0 = input_size;
    let rgb = Tensor::new(
        vec![1, 3, h0, h0],
        resize_planes(&rgb_planes, 3, (rgb_w, rgb_h), h0),
    );
    let depth_resized = DepthMap::new(
        h0,
        h0,
        resize_bilinear_plane(&depth.data, (depth.width, depth.height), (h0, h0)),
    );
    let mut depth3 = depth_to_3ch(&depth_resized)?;
    for v in &mut depth3.data {
        *v /= 255.0;
    }
    let gt_native = GroundTruth::from_u8(gt_w, gt_h, &gt_bytes);
    let gt_plane: Vec<f64> = gt_native
        .data
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let gt_train = Tensor::new(
        vec![1, 1, h0, h0],
        resize_bilinear_plane(&gt_plane, (gt_w, gt_h), (h0, h0)),
    );
    Ok(SampleTriple {
        stem: stem.to_string(),
        rgb,
        depth3,
        gt_train,
        gt_native,
        native_width: gt_w,
        native_height: gt_h,
    })
}

/// Walk the three subdirectories, pair files by stem, and load every stem
/// present in all of them (deterministic lexicographic order). Stems
/// missing from any directory are reported and skipped.
pub fn ingest(spec: &DatasetSpec) -> Result<IngestReport, DataError> {
    let rgb_map = stems_of(&spec.root.join(&spec.rgb_dir))?;
    let depth_map = stems_of(&spec.root.join(&spec.depth_dir))?;
    let gt_map = stems_of(&spec.root.join(&spec.gt_dir))?;

    let mut skipped = Vec::new();
    let mut all_stems: Vec<&String> = rgb_map
        .keys()
        .chain(depth_map.keys())
        .chain(gt_map.keys())
        .collect();
    all_stems.sort();
    all_stems.dedup();

    let mut triples = Vec::new();
    for stem in all_stems {
        match (rgb_map.get(stem), depth_map.get(stem), gt_map.get(stem)) {
            (Some(rgb_path), Some(depth_path), Some(gt_path)) => {
                let rgb = load_rgb(rgb_path)?;
                let depth = load_depth(depth_path)?;
                let gt = load_gray(gt_path)?;
                triples.push(build_triple(stem, rgb, depth, gt, spec.input_size)?);
            }
            (r, d, g) => {
                let mut missing = Vec::new();
                if r.is_none() {
                    missing.push(spec.rgb_dir.as_str());
                }
                if d.is_none() {
                    missing.push(spec.depth_dir.as_str());
                }
                if g.is_none() {
                    missing.push(spec.gt_dir.as_str());
                }
                skipped.push((stem.clone(), format!("missing in {}", missing.join(", "))));
            }
        }
    }
    if triples.is_empty() {
        return Err(DataError::EmptyIntersection);
    }
    Ok(IngestReport { triples, skipped })
}

/// Horizontal mirror of one triple (the training augmentation).
pub fn mirror_triple(t: &SampleTriple) -> SampleTriple {
    let flip = |data: &[f64], channels: usize, h: usize, w: usize| -> Vec<f64> {
        let mut out = data.to_vec();
        for c in 0..channels {
            for y in 0..h {
                let row = c * h * w + y * w;
                out[row..row + w].reverse();
            }
        }
        out
    };
    let h0 = t.rgb.shape[2];
    SampleTriple {
        stem: format!("{}_mirror", t.stem),
        rgb: Tensor::new(t.rgb.shape.clone(), flip(&t.rgb.data, 3, h0, h0)),
        depth3: Tensor::new(t.depth3.shape.clone(), flip(&t.depth3.data, 3, h0, h0)),
        gt_train: Tensor::new(t.gt_train.shape.clone(), flip(&t.gt_train.data, 1, h0, h0)),
        gt_native: {
            let mut flipped = t.gt_native.data.clone();
            for y in 0..t.native_height {
                flipped[y * t.native_width..(y + 1) * t.native_width].reverse();
            }
            GroundTruth::new(t.native_width, t.native_height, flipped)
        },
        native_width: t.native_width,
        native_height: t.native_height,
    }
}
