//! Early fusion: sample a `w x w` RGB window around every projected point
//! and append it to the point's row.

use crate::data_model::{CameraImage, FrameBundle, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{compose_chain, in_image_mask, project_points, PixelCoords, VisibilityMask};
use crate::scalar::Real;

/// Window size used unless configured otherwise.
pub const DEFAULT_WINDOW: usize = 3;

/// Projection of a cloud into one camera.
#[derive(Debug, Clone)]
pub struct CameraProjection<T: Real> {
    pub coords: PixelCoords<T>,
    pub mask: VisibilityMask,
}

/// Projects `cloud` into every camera of `bundle`, in camera order.
pub fn project_cameras<T: Real>(
    cloud: &PointCloud<T>,
    bundle: &FrameBundle<T>,
) -> Result<Vec<CameraProjection<T>>> {
    let (h, w) = bundle.image_size();
    bundle
        .cameras
        .iter()
        .map(|cam| {
            let t = compose_chain(&cam.chain)?;
            let coords = project_points(cloud, &t, &cam.intrinsics);
            let mask = in_image_mask(&coords, h, w);
            Ok(CameraProjection { coords, mask })
        })
        .collect()
}

/// For each point, the last camera (in index order) that sees it.
pub fn owner_cameras<T: Real>(projections: &[CameraProjection<T>]) -> Vec<Option<usize>> {
    let n = projections.first().map_or(0, |p| p.mask.len());
    (0..n)
        .map(|i| projections.iter().rposition(|p| p.mask.mask[i]))
        .collect()
}

/// Context windows for the visible points of one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPatch<T: Real> {
    pub window: usize,
    /// Indices of the visible points, ascending.
    pub points: Vec<usize>,
    /// `points.len() x w x w x 3`, row-major.
    pub values: Vec<T>,
}

impl<T: Real> ContextPatch<T> {
    pub fn patch(&self, k: usize) -> &[T] {
        let len = 3 * self.window * self.window;
        &self.values[k * len..(k + 1) * len]
    }
}

fn check_window(w: usize) -> Result<()> {
    if w == 0 || w % 2 == 0 {
        return Err(Error::BadWindow(w));
    }
    Ok(())
}

/// Gathers the `w x w` window centered on each visible point's rounded
/// pixel. Cells falling outside the image are zero.
pub fn sample_context<T: Real>(
    image: &CameraImage<T>,
    coords: &PixelCoords<T>,
    mask: &VisibilityMask,
    w: usize,
) -> Result<ContextPatch<T>> {
    check_window(w)?;
    if mask.len() != coords.len() {
        return Err(Error::shape("sample_context", &[mask.len()], &[coords.len()]));
    }
    let (h, wd) = (image.height(), image.width());
    let half = (w / 2) as isize;
    let points: Vec<usize> = (0..mask.len()).filter(|&i| mask.mask[i]).collect();
    let mut values = vec![T::zero(); points.len() * w * w * 3];
    for (k, &i) in points.iter().enumerate() {
        let (r0, c0) = coords
            .pixel(i, h, wd)
            .ok_or_else(|| Error::shape("sample_context: masked point outside image", &[i], &[h, wd]))?;
        let base = k * w * w * 3;
        for dr in 0..w {
            let r = r0 as isize + dr as isize - half;
            if r < 0 || r >= h as isize {
                continue;
            }
            for dc in 0..w {
                let c = c0 as isize + dc as isize - half;
                if c < 0 || c >= wd as isize {
                    continue;
                }
                let cell = base + (dr * w + dc) * 3;
                values[cell..cell + 3].copy_from_slice(&image.rgb(r as usize, c as usize));
            }
        }
    }
    Ok(ContextPatch {
        window: w,
        points,
        values,
    })
}

/// `[L | P]` with `P` holding each point's flattened context window.
#[derive(Debug, Clone, PartialEq)]
pub struct PaintedCloud<T: Real> {
    source_dims: usize,
    width: usize,
    rows: Vec<T>,
}

impl<T: Real> PaintedCloud<T> {
    /// Unpainted cloud: zero appended columns.
    pub fn passthrough(cloud: &PointCloud<T>) -> Self {
        Self {
            source_dims: cloud.dims(),
            width: cloud.dims(),
            rows: cloud.data().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn source_dims(&self) -> usize {
        self.source_dims
    }

    pub fn rows(&self) -> &[T] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    pub fn into_rows(self) -> Vec<T> {
        self.rows
    }
}

/// Paints `cloud` with the context of every camera in `bundle`.
pub fn paint<T: Real>(cloud: &PointCloud<T>, bundle: &FrameBundle<T>, w: usize) -> Result<PaintedCloud<T>> {
    check_window(w)?;
    let projections = project_cameras(cloud, bundle)?;
    paint_projected(cloud, bundle, &projections, w)
}

/// [`paint`] with precomputed projections. Cameras are visited in order and
/// later cameras overwrite earlier ones where they overlap.
pub fn paint_projected<T: Real>(
    cloud: &PointCloud<T>,
    bundle: &FrameBundle<T>,
    projections: &[CameraProjection<T>],
    w: usize,
) -> Result<PaintedCloud<T>> {
    check_window(w)?;
    if projections.len() != bundle.cameras.len() {
        return Err(Error::shape("paint", &[projections.len()], &[bundle.cameras.len()]));
    }
    let d = cloud.dims();
    let extra = 3 * w * w;
    let width = d + extra;
    let mut rows = vec![T::zero(); cloud.len() * width];
    for i in 0..cloud.len() {
        rows[i * width..i * width + d].copy_from_slice(cloud.row(i));
    }
    for (cam, proj) in bundle.cameras.iter().zip(projections) {
        let patch = sample_context(&cam.image, &proj.coords, &proj.mask, w)?;
        for (k, &i) in patch.points.iter().enumerate() {
            let o = i * width + d;
            rows[o..o + extra].copy_from_slice(patch.patch(k));
        }
    }
    Ok(PaintedCloud {
        source_dims: d,
        width,
        rows,
    })
}
