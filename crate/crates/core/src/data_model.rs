//! Domain types shared by every stage: point clouds, camera images, 2D boxes
//! and the per-sample frame bundle.

use crate::error::{Error, Result};
use crate::geometry::{compose_chain, CalibrationChain, CameraIntrinsics};
use crate::scalar::Real;

/// `N x D` LiDAR points, row-major. Columns 0..3 are x, y, z in meters
/// (LiDAR frame); column 3, when present, is intensity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T: Real> {
    dims: usize,
    data: Vec<T>,
    labels: Option<Vec<usize>>,
}

impl<T: Real> PointCloud<T> {
    /// Only checks that `data` is a whole number of rows; the remaining
    /// invariants are checked by [`PointCloud::validate`].
    pub fn new(dims: usize, data: Vec<T>, labels: Option<Vec<usize>>) -> Result<Self> {
        if dims == 0 || data.len() % dims != 0 {
            return Err(Error::InvalidBundle(format!(
                "point data length {} is not a multiple of D = {dims}",
                data.len()
            )));
        }
        Ok(Self { dims, data, labels })
    }

    /// Like [`PointCloud::new`] but also requires `D >= 3`.
    pub fn from_rows(dims: usize, data: Vec<T>, labels: Option<Vec<usize>>) -> Result<Self> {
        if dims < 3 {
            return Err(Error::InvalidBundle("D ≥ 3".into()));
        }
        Self::new(dims, data, labels)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn xyz(&self, i: usize) -> [T; 3] {
        let r = self.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.dims);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            dims: self.dims,
            data,
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.dims < 3 {
            return Err(Error::InvalidBundle("D ≥ 3".into()));
        }
        if (0..self.len()).any(|i| self.xyz(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidBundle("coordinates finite".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::InvalidBundle("label length".into()));
            }
            if labels.iter().any(|&l| l >= class_count) {
                return Err(Error::InvalidBundle("label range".into()));
            }
        }
        Ok(())
    }
}

/// `H x W x 3` RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraImage<T: Real> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
    pub timestamp: T,
}

impl<T: Real> CameraImage<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>, timestamp: T) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidBundle(format!(
                "image buffer has {} values, expected {height}x{width}x3",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            timestamp,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3], timestamp: T) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            pixels,
            timestamp,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn rgb(&self, row: usize, col: usize) -> [T; 3] {
        let o = (row * self.width + col) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidBundle("H ≥ 1, W ≥ 1".into()));
        }
        if self
            .pixels
            .iter()
            .any(|v| !(*v >= T::zero() && *v <= T::one()))
        {
            return Err(Error::InvalidBundle("pixel range".into()));
        }
        Ok(())
    }
}

/// Inclusive pixel rectangle around one object instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Box2D {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
    pub class_id: usize,
    pub instance_id: u32,
}

impl Box2D {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.min_row..=self.max_row).contains(&row) && (self.min_col..=self.max_col).contains(&col)
    }

    pub fn area(&self) -> usize {
        (self.max_row - self.min_row + 1) * (self.max_col - self.min_col + 1)
    }

    /// Geometric center as `(row, col)`.
    pub fn center<T: Real>(&self) -> [T; 2] {
        let half = T::lit(0.5);
        [
            T::count(self.min_row + self.max_row) * half,
            T::count(self.min_col + self.max_col) * half,
        ]
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.min_row > self.max_row || self.max_row >= height {
            return Err(Error::InvalidBundle("box rows".into()));
        }
        if self.min_col > self.max_col || self.max_col >= width {
            return Err(Error::InvalidBundle("box cols".into()));
        }
        Ok(())
    }
}

/// Picks the box owning `(row, col)`: smallest area, ties to the lowest
/// instance id. `accept` filters candidate boxes.
pub fn owning_box<'a>(
    boxes: &'a [Box2D],
    row: usize,
    col: usize,
    mut accept: impl FnMut(&Box2D) -> bool,
) -> Option<&'a Box2D> {
    boxes
        .iter()
        .filter(|b| b.contains(row, col) && accept(b))
        .min_by_key(|b| (b.area(), b.instance_id))
}

/// One camera of a frame: image, calibration and its 2D boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView<T: Real> {
    pub image: CameraImage<T>,
    pub chain: CalibrationChain<T>,
    pub intrinsics: CameraIntrinsics<T>,
    pub boxes: Vec<Box2D>,
}

/// One synchronized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle<T: Real> {
    pub cloud: PointCloud<T>,
    pub cameras: Vec<CameraView<T>>,
    pub class_count: usize,
    pub lidar_timestamp: T,
    /// Per-point true pixel displacement in the owning camera; synthetic
    /// data only.
    pub gt_offsets: Option<Vec<[T; 2]>>,
}

impl<T: Real> FrameBundle<T> {
    /// Shared `(H, W)` of all cameras.
    pub fn image_size(&self) -> (usize, usize) {
        self.cameras
            .first()
            .map(|c| (c.image.height(), c.image.width()))
            .unwrap_or((0, 0))
    }
}

/// Succeeds iff every invariant of the bundle holds; otherwise names the
/// first violated one.
pub fn validate<T: Real>(bundle: &FrameBundle<T>) -> Result<()> {
    if bundle.class_count < 2 {
        return Err(Error::InvalidBundle("C ≥ 2".into()));
    }
    bundle.cloud.validate(bundle.class_count)?;
    if bundle.cameras.is_empty() {
        return Err(Error::InvalidBundle("n ≥ 1".into()));
    }
    let (h, w) = bundle.image_size();
    for cam in &bundle.cameras {
        cam.image.validate()?;
        if (cam.image.height(), cam.image.width()) != (h, w) {
            return Err(Error::InvalidBundle("cameras share (H, W)".into()));
        }
        compose_chain(&cam.chain)
            .map_err(|e| Error::InvalidBundle(format!("calibration chain: {e}")))?;
        CameraIntrinsics::try_new(*cam.intrinsics.matrix())?;
        for b in &cam.boxes {
            b.validate(h, w)?;
        }
    }
    if let Some(gt) = &bundle.gt_offsets {
        if gt.len() != bundle.cloud.len() {
            return Err(Error::InvalidBundle("gt offset length".into()));
        }
        if gt.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBundle("gt offsets finite".into()));
        }
    }
    Ok(())
}
