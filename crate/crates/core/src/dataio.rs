//! On-disk formats. All binary data is little-endian; see `docs/formats.md`
//! or [`FORMATS_DOC`] for the byte layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::data_model::{validate, Box2D, CameraImage, CameraView, FrameBundle, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{CalibrationChain, CameraIntrinsics, RigidTransform};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
/// Default per-frame read cap.
pub const DEFAULT_CAP_BYTES: u64 = 1 << 30;
pub const CAP_ENV: &str = "LIFSEG_DATA_CAP_BYTES";

pub const FORMATS_DOC: &str = include_str!("../../../docs/formats.md");

/// Read cap in bytes, from the environment when set.
pub fn read_cap() -> u64 {
    std::env::var(CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_CAP_BYTES)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a file after checking its size against the remaining budget.
fn read_capped(path: &Path, budget: &mut u64) -> Result<Vec<u8>> {
    let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if len > *budget {
        return Err(Error::corrupt(path, format!("{len} bytes exceeds read cap")));
    }
    *budget -= len;
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f64s_from(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

// ---------------------------------------------------------------------------
// points

/// `[N u64][D u64][N*D f64]`.
pub fn encode_points(dims: usize, data: &[f64]) -> Vec<u8> {
    let n = if dims == 0 { 0 } else { data.len() / dims };
    let mut out = Vec::with_capacity(16 + 8 * data.len());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(dims as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses `points.bin`, returning `(N, D, data)`.
pub fn decode_points(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 16 {
        return Err(Error::corrupt(path, "header shorter than 16 bytes"));
    }
    let (n, d) = (u64_at(bytes, 0), u64_at(bytes, 8));
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(16));
    if expected != Some(bytes.len() as u64) {
        return Err(Error::corrupt(
            path,
            format!("header says {n} x {d} but file has {} bytes", bytes.len()),
        ));
    }
    Ok((n as usize, d as usize, f64s_from(&bytes[16..])))
}

pub fn write_points(path: &Path, dims: usize, data: &[f64]) -> Result<()> {
    write_file(path, &encode_points(dims, data))
}

pub fn read_points(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = read_capped(path, &mut read_cap())?;
    decode_points(path, &bytes)
}

// ---------------------------------------------------------------------------
// images

/// Binary PPM, 8-bit, `round(255 x)` per channel.
pub fn encode_ppm(image: &CameraImage<f64>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Parses a P6 file with maxval 255; pixels become `byte / 255`.
pub fn decode_ppm(path: &Path, bytes: &[u8], timestamp: f64) -> Result<CameraImage<f64>> {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::corrupt(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::corrupt(path, "not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::corrupt(path, "bad PPM header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::corrupt(path, "PPM maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    at += 1;
    let expected = w.checked_mul(h).and_then(|v| v.checked_mul(3));
    if expected.map(|e| at.checked_add(e)) != Some(Some(bytes.len())) {
        return Err(Error::corrupt(path, "PPM raster size does not match header"));
    }
    let pixels = bytes[at..].iter().map(|b| *b as f64 / 255.0).collect();
    CameraImage::new(h, w, pixels, timestamp).map_err(|e| Error::corrupt(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// JSON records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub classes: usize,
    pub dims: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraCalib {
    timestamp: f64,
    ego_from_lidar: [[f64; 4]; 4],
    global_from_ego_sweep: [[f64; 4]; 4],
    ego_image_from_global: [[f64; 4]; 4],
    cam_from_ego: [[f64; 4]; 4],
    intrinsics: [[f64; 4]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CalibFile {
    lidar_timestamp: f64,
    cameras: Vec<CameraCalib>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BoxRecord {
    camera: usize,
    #[serde(flatten)]
    b: Box2D,
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("serializable");
    s.push(b'\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::corrupt(path, e.to_string()))
}

pub fn write_meta(root: &Path, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_file(&root.join("meta.json"), &to_json(meta))
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join("meta.json");
    let bytes = read_capped(&path, &mut read_cap())?;
    let raw: serde_json::Value = from_json(&path, &bytes)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::corrupt(&path, "missing format_version"))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: found.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    let meta: DatasetMeta = from_json(&path, &bytes)?;
    if meta.class_names.len() != meta.classes {
        return Err(Error::corrupt(&path, "class_names length differs from classes"));
    }
    Ok(meta)
}

// ---------------------------------------------------------------------------
// frames

/// Writes every file of one frame into `dir`, creating it if needed.
pub fn write_frame(dir: &Path, bundle: &FrameBundle<f64>) -> Result<()> {
    validate(bundle)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cloud = &bundle.cloud;
    write_file(&dir.join("points.bin"), &encode_points(cloud.dims(), cloud.data()))?;
    let labels_path = dir.join("labels.bin");
    match cloud.labels() {
        Some(labels) => {
            let mut out = Vec::with_capacity(2 * labels.len());
            for &l in labels {
                let l = u16::try_from(l).map_err(|_| Error::InvalidBundle("label fits u16".into()))?;
                out.extend_from_slice(&l.to_le_bytes());
            }
            write_file(&labels_path, &out)?;
        }
        None => remove_if_present(&labels_path)?,
    }
    let gt_path = dir.join("gt_offsets.bin");
    match &bundle.gt_offsets {
        Some(gt) => {
            let mut out = Vec::with_capacity(16 * gt.len());
            for v in gt.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            write_file(&gt_path, &out)?;
        }
        None => remove_if_present(&gt_path)?,
    }
    let mut calib = CalibFile {
        lidar_timestamp: bundle.lidar_timestamp,
        cameras: Vec::new(),
    };
    let mut boxes = Vec::new();
    for (i, cam) in bundle.cameras.iter().enumerate() {
        write_file(&dir.join(format!("cam_{i}.ppm")), &encode_ppm(&cam.image))?;
        calib.cameras.push(CameraCalib {
            timestamp: cam.image.timestamp,
            ego_from_lidar: *cam.chain.ego_from_lidar.matrix(),
            global_from_ego_sweep: *cam.chain.global_from_ego_sweep.matrix(),
            ego_image_from_global: *cam.chain.ego_image_from_global.matrix(),
            cam_from_ego: *cam.chain.cam_from_ego.matrix(),
            intrinsics: *cam.intrinsics.matrix(),
        });
        boxes.extend(cam.boxes.iter().map(|b| BoxRecord { camera: i, b: *b }));
    }
    write_file(&dir.join("calib.json"), &to_json(&calib))?;
    write_file(&dir.join("boxes.json"), &to_json(&boxes))
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn rigid(path: &Path, m: [[f64; 4]; 4], what: &str) -> Result<RigidTransform<f64>> {
    RigidTransform::try_new(m).map_err(|e| Error::corrupt(path, format!("{what}: {e}")))
}

/// Reads one frame; `class_count` comes from the dataset metadata.
pub fn read_frame(dir: &Path, class_count: usize) -> Result<FrameBundle<f64>> {
    let mut budget = read_cap();
    let points_path = dir.join("points.bin");
    let bytes = read_capped(&points_path, &mut budget)?;
    let (n, d, data) = decode_points(&points_path, &bytes)?;
    drop(bytes);

    let labels_path = dir.join("labels.bin");
    let labels = if labels_path.exists() {
        let bytes = read_capped(&labels_path, &mut budget)?;
        if bytes.len() != 2 * n {
            return Err(Error::corrupt(&labels_path, format!("expected {} bytes for {n} labels", 2 * n)));
        }
        Some(
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
                .collect(),
        )
    } else {
        None
    };
    let cloud = PointCloud::new(d, data, labels).map_err(|e| Error::corrupt(&points_path, e.to_string()))?;

    let gt_path = dir.join("gt_offsets.bin");
    let gt_offsets = if gt_path.exists() {
        let bytes = read_capped(&gt_path, &mut budget)?;
        if bytes.len() != 16 * n {
            return Err(Error::corrupt(&gt_path, format!("expected {} bytes for {n} offsets", 16 * n)));
        }
        Some(f64s_from(&bytes).chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    } else {
        None
    };

    let calib_path = dir.join("calib.json");
    let calib: CalibFile = from_json(&calib_path, &read_capped(&calib_path, &mut budget)?)?;
    let boxes_path = dir.join("boxes.json");
    let boxes: Vec<BoxRecord> = from_json(&boxes_path, &read_capped(&boxes_path, &mut budget)?)?;
    if let Some(b) = boxes.iter().find(|b| b.camera >= calib.cameras.len()) {
        return Err(Error::corrupt(&boxes_path, format!("box refers to camera {}", b.camera)));
    }

    let mut cameras = Vec::with_capacity(calib.cameras.len());
    for (i, c) in calib.cameras.iter().enumerate() {
        let img_path = dir.join(format!("cam_{i}.ppm"));
        let image = decode_ppm(&img_path, &read_capped(&img_path, &mut budget)?, c.timestamp)?;
        let chain = CalibrationChain {
            ego_from_lidar: rigid(&calib_path, c.ego_from_lidar, "ego_from_lidar")?,
            global_from_ego_sweep: rigid(&calib_path, c.global_from_ego_sweep, "global_from_ego_sweep")?,
            ego_image_from_global: rigid(&calib_path, c.ego_image_from_global, "ego_image_from_global")?,
            cam_from_ego: rigid(&calib_path, c.cam_from_ego, "cam_from_ego")?,
        };
        let intrinsics =
            CameraIntrinsics::try_new(c.intrinsics).map_err(|e| Error::corrupt(&calib_path, e.to_string()))?;
        cameras.push(CameraView {
            image,
            chain,
            intrinsics,
            boxes: boxes.iter().filter(|b| b.camera == i).map(|b| b.b).collect(),
        });
    }
    let bundle = FrameBundle {
        cloud,
        cameras,
        class_count,
        lidar_timestamp: calib.lidar_timestamp,
        gt_offsets,
    };
    validate(&bundle)?;
    Ok(bundle)
}

/// Frame directory name for index `k`.
pub fn frame_name(k: usize) -> String {
    format!("frame_{k:04}")
}

/// Writes `meta.json` and every frame under `root`.
pub fn write_dataset(root: &Path, meta: &DatasetMeta, frames: &[FrameBundle<f64>]) -> Result<()> {
    if meta.frames.len() != frames.len() {
        return Err(Error::InvalidConfig("meta frame list differs from frames".into()));
    }
    write_meta(root, meta)?;
    for (name, f) in meta.frames.iter().zip(frames) {
        write_frame(&root.join(name), f)?;
    }
    Ok(())
}

/// A dataset on disk; frames are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            meta: read_meta(root)?,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.frames.is_empty()
    }

    /// Reads frame `k` and checks it against the metadata.
    pub fn frame(&self, k: usize) -> Result<FrameBundle<f64>> {
        let name = self
            .meta
            .frames
            .get(k)
            .ok_or_else(|| Error::InvalidConfig(format!("frame {k} out of range ({} frames)", self.len())))?;
        let dir = self.root.join(name);
        let f = read_frame(&dir, self.meta.classes)?;
        let m = &self.meta;
        if f.cloud.dims() != m.dims || f.cameras.len() != m.cameras || f.image_size() != (m.height, m.width) {
            return Err(Error::corrupt(dir, "frame disagrees with meta.json (D, n, H or W)"));
        }
        Ok(f)
    }

    pub fn frames(&self) -> Result<Vec<FrameBundle<f64>>> {
        (0..self.len()).map(|k| self.frame(k)).collect()
    }
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, DenseArray<f64>)>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        metadata: ckpt.metadata.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("serializable");
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::corrupt(path, "missing header length"));
    }
    let hlen = u64_at(bytes, 0);
    let start = 8u64
        .checked_add(hlen)
        .filter(|s| *s <= bytes.len() as u64)
        .ok_or_else(|| Error::corrupt(path, "header length beyond end of file"))? as usize;
    let raw: serde_json::Value = from_json(path, &bytes[8..start])?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::corrupt(path, "missing format_version"))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: found.min(u32::MAX as u64) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: CheckpointHeader = from_json(path, &bytes[8..start])?;
    let payload = &bytes[start..];
    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.offset != expected {
            return Err(Error::corrupt(path, format!("tensor {} not contiguous", e.name)));
        }
        let len = e
            .shape
            .iter()
            .try_fold(1u64, |a, d| a.checked_mul(*d as u64))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::corrupt(path, "tensor size overflows"))?;
        let end = expected
            .checked_add(len)
            .filter(|e| *e <= payload.len() as u64)
            .ok_or_else(|| Error::corrupt(path, format!("tensor {} runs past end of file", e.name)))?;
        let data = f64s_from(&payload[expected as usize..end as usize]);
        tensors.push((e.name, DenseArray::new(e.shape, data)?));
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(Error::corrupt(path, "trailing bytes after last tensor"));
    }
    Ok(Checkpoint {
        metadata: header.metadata,
        tensors,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ckpt))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_capped(path, &mut read_cap())?;
    decode_checkpoint(path, &bytes)
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &to_json(value))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_capped(path, &mut read_cap())?;
    from_json(path, &bytes)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}
