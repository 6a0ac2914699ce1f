//! Rigid transforms, the LiDAR-to-camera calibration chain and pinhole
//! projection.
//!
//! Pixel convention: index 0 of every pixel pair is the image row
//! (vertical), index 1 is the column.

use serde::{Deserialize, Serialize};

use crate::data_model::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Orthonormality / determinant tolerance for rigid transforms.
pub fn rigid_tolerance<T: Real>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(64.0))
}

fn mat4_mul<T: Real>(a: &[[T; 4]; 4], b: &[[T; 4]; 4]) -> [[T; 4]; 4] {
    let mut out = [[T::zero(); 4]; 4];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for k in 0..4 {
                acc = acc + a[r][k] * b[k][c];
            }
            *cell = acc;
        }
    }
    out
}

/// A 4x4 homogeneous rigid-body transform `dst <- src`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct RigidTransform<T: Real> {
    matrix: [[T; 4]; 4],
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Self { matrix: m }
    }

    /// Validates the matrix: fixed last row, orthonormal rotation block with
    /// determinant one.
    pub fn try_new(matrix: [[T; 4]; 4]) -> Result<Self> {
        let t = Self { matrix };
        t.check()?;
        Ok(t)
    }

    pub fn from_translation(t: [T; 3]) -> Self {
        let mut out = Self::identity();
        for (r, v) in t.iter().enumerate() {
            out.matrix[r][3] = *v;
        }
        out
    }

    /// Builds from a rotation block and translation.
    pub fn from_parts(rotation: [[T; 3]; 3], translation: [T; 3]) -> Result<Self> {
        let mut m = [[T::zero(); 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = rotation[r][c];
            }
            m[r][3] = translation[r];
        }
        m[3][3] = T::one();
        Self::try_new(m)
    }

    /// Rotation by `yaw` radians about +z, then translation.
    pub fn from_yaw_translation(yaw: T, translation: [T; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        let z = T::zero();
        let o = T::one();
        let mut m = [[c, -s, z, translation[0]], [s, c, z, translation[1]], [z, z, o, translation[2]], [z; 4]];
        m[3][3] = o;
        Self { matrix: m }
    }

    pub fn matrix(&self) -> &[[T; 4]; 4] {
        &self.matrix
    }

    pub fn rotation(&self) -> [[T; 3]; 3] {
        let m = &self.matrix;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> [T; 3] {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    fn check(&self) -> Result<()> {
        let m = &self.matrix;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonRigid("non-finite entry".into()));
        }
        if m[3] != [T::zero(), T::zero(), T::zero(), T::one()] {
            return Err(Error::NonRigid("last row must be (0,0,0,1)".into()));
        }
        let tol = rigid_tolerance::<T>();
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot = (0..3).fold(T::zero(), |acc, k| acc + r[i][k] * r[j][k]);
                let expected = if i == j { T::one() } else { T::zero() };
                if (dot - expected).abs() > tol {
                    return Err(Error::NonRigid(format!(
                        "rotation rows {i},{j} not orthonormal (dot = {dot})"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - T::one()).abs() > tol {
            return Err(Error::NonRigid(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    /// `self * rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &Self) -> Self {
        Self {
            matrix: mat4_mul(&self.matrix, &rhs.matrix),
        }
    }

    /// Closed-form inverse `[R^T | -R^T t]`.
    pub fn invert(&self) -> Self {
        let r = self.rotation();
        let t = self.translation();
        let mut m = [[T::zero(); 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[j][i];
            }
            m[i][3] = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        }
        m[3][3] = T::one();
        Self { matrix: m }
    }

    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let m = &self.matrix;
        let mut out = [T::zero(); 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
        }
        out
    }
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

/// The 3x4 camera projection matrix. Row 2 is fixed to `(0, 0, 1, 0)` so
/// the homogeneous scale equals camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct CameraIntrinsics<T: Real> {
    matrix: [[T; 4]; 3],
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn try_new(matrix: [[T; 4]; 3]) -> Result<Self> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBundle("intrinsics must be finite".into()));
        }
        if matrix[2] != [T::zero(), T::zero(), T::one(), T::zero()] {
            return Err(Error::InvalidBundle(
                "intrinsics row 2 must be (0,0,1,0)".into(),
            ));
        }
        if matrix[0][0] <= T::zero() || matrix[1][1] <= T::zero() {
            return Err(Error::InvalidBundle("focal lengths must be > 0".into()));
        }
        Ok(Self { matrix })
    }

    /// `fx` scales the column axis, `fy` the row axis; `(cx, cy)` is the
    /// principal point as (column, row).
    pub fn pinhole(fx: T, fy: T, cx: T, cy: T) -> Result<Self> {
        let z = T::zero();
        Self::try_new([[fx, z, cx, z], [z, fy, cy, z], [z, z, T::one(), z]])
    }

    pub fn matrix(&self) -> &[[T; 4]; 3] {
        &self.matrix
    }
}

/// LiDAR -> ego(sweep time) -> global -> ego(image time) -> camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct CalibrationChain<T: Real> {
    pub ego_from_lidar: RigidTransform<T>,
    pub global_from_ego_sweep: RigidTransform<T>,
    pub ego_image_from_global: RigidTransform<T>,
    pub cam_from_ego: RigidTransform<T>,
}

impl<T: Real> CalibrationChain<T> {
    pub fn identity() -> Self {
        let i = RigidTransform::identity();
        Self {
            ego_from_lidar: i,
            global_from_ego_sweep: i,
            ego_image_from_global: i,
            cam_from_ego: i,
        }
    }

    pub fn stages(&self) -> [&RigidTransform<T>; 4] {
        [
            &self.ego_from_lidar,
            &self.global_from_ego_sweep,
            &self.ego_image_from_global,
            &self.cam_from_ego,
        ]
    }
}

/// Composes the chain into a single `cam <- lidar` transform.
pub fn compose_chain<T: Real>(chain: &CalibrationChain<T>) -> Result<RigidTransform<T>> {
    for stage in chain.stages() {
        stage.check()?;
    }
    let out = chain
        .cam_from_ego
        .compose(&chain.ego_image_from_global)
        .compose(&chain.global_from_ego_sweep)
        .compose(&chain.ego_from_lidar);
    out.check()?;
    Ok(out)
}

/// Per-point pixel coordinates `(row, col)` and camera-frame depth.
/// Coordinates are NaN for points at or behind the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelCoords<T: Real> {
    pub idx: Vec<[T; 2]>,
    pub depth: Vec<T>,
}

impl<T: Real> PixelCoords<T> {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// Rounded `(row, col)` when the point lies in an `height x width` image.
    pub fn pixel(&self, i: usize, height: usize, width: usize) -> Option<(usize, usize)> {
        if !(self.depth[i] > T::zero()) {
            return None;
        }
        let [row, col] = self.idx[i];
        let (r, c) = (row.round(), col.round());
        if !(r >= T::zero() && c >= T::zero()) {
            return None;
        }
        let (r, c) = (r.to_usize()?, c.to_usize()?);
        (r < height && c < width).then_some((r, c))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask {
    pub mask: Vec<bool>,
}

impl VisibilityMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// `(a, b, w) = K * T * (x, y, z, 1)`; row = b / w, col = a / w.
pub fn project_points<T: Real>(
    cloud: &PointCloud<T>,
    cam_from_lidar: &RigidTransform<T>,
    intrinsics: &CameraIntrinsics<T>,
) -> PixelCoords<T> {
    let k = intrinsics.matrix();
    let mut idx = Vec::with_capacity(cloud.len());
    let mut depth = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let p = cam_from_lidar.apply(cloud.xyz(i));
        let a = k[0][0] * p[0] + k[0][1] * p[1] + k[0][2] * p[2] + k[0][3];
        let b = k[1][0] * p[0] + k[1][1] * p[1] + k[1][2] * p[2] + k[1][3];
        let w = p[2];
        depth.push(w);
        if w > T::lit(MIN_DEPTH) {
            idx.push([b / w, a / w]);
        } else {
            idx.push([T::nan(), T::nan()]);
        }
    }
    PixelCoords { idx, depth }
}

/// True where depth > 0 and the rounded pixel lies in `[0, H) x [0, W)`.
pub fn in_image_mask<T: Real>(coords: &PixelCoords<T>, height: usize, width: usize) -> VisibilityMask {
    VisibilityMask {
        mask: (0..coords.len())
            .map(|i| coords.pixel(i, height, width).is_some())
            .collect(),
    }
}

/// Closed-form inverse of a rigid transform.
pub fn invert<T: Real>(t: &RigidTransform<T>) -> RigidTransform<T> {
    t.invert()
}

/// Inverse projection: the camera-frame point at `(row, col)` with the given
/// depth.
pub fn back_project<T: Real>(intrinsics: &CameraIntrinsics<T>, row: T, col: T, depth: T) -> [T; 3] {
    let k = intrinsics.matrix();
    // Solve [k00 k01; k10 k11] [x; y] = [col*d - k02*d - k03; row*d - k12*d - k13].
    let rhs0 = col * depth - k[0][2] * depth - k[0][3];
    let rhs1 = row * depth - k[1][2] * depth - k[1][3];
    let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
    let x = (rhs0 * k[1][1] - k[0][1] * rhs1) / det;
    let y = (k[0][0] * rhs1 - k[1][0] * rhs0) / det;
    [x, y, depth]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::from_rows(3, points.iter().flatten().copied().collect(), None).unwrap()
    }

    #[test]
    fn identity_chain_composes_to_identity() {
        let c = CalibrationChain::<f64>::identity();
        assert_eq!(compose_chain(&c).unwrap(), RigidTransform::identity());
    }

    #[test]
    fn single_translation_survives_composition() {
        let mut c = CalibrationChain::<f64>::identity();
        c.global_from_ego_sweep = RigidTransform::from_translation([1.0, -2.0, 3.5]);
        let t = compose_chain(&c).unwrap();
        assert_eq!(t.translation(), [1.0, -2.0, 3.5]);
        assert_eq!(t.rotation(), RigidTransform::<f64>::identity().rotation());
    }

    #[test]
    fn non_rigid_stage_is_rejected() {
        let mut m = *RigidTransform::<f64>::identity().matrix();
        m[0][0] = 2.0;
        assert!(matches!(RigidTransform::try_new(m), Err(Error::NonRigid(_))));
        m[0][0] = 1.0;
        m[3][0] = 0.5;
        assert!(matches!(RigidTransform::try_new(m), Err(Error::NonRigid(_))));
        // reflection: orthonormal but det = -1
        let mut r = *RigidTransform::<f64>::identity().matrix();
        r[2][2] = -1.0;
        assert!(RigidTransform::try_new(r).is_err());
    }

    #[test]
    fn principal_axis_hits_principal_point() {
        let k = CameraIntrinsics::pinhole(100.0, 100.0, 50.0, 50.0).unwrap();
        let c = cloud(&[[0.0, 0.0, 10.0], [0.0, 0.0, -5.0]]);
        let px = project_points(&c, &RigidTransform::identity(), &k);
        assert_eq!(px.idx[0], [50.0, 50.0]);
        assert_eq!(px.depth[0], 10.0);
        assert!(px.idx[1][0].is_nan() && px.idx[1][1].is_nan());
        assert_eq!(px.depth[1], -5.0);
        let m = in_image_mask(&px, 100, 100);
        assert_eq!(m.mask, vec![true, false]);
    }

    #[test]
    fn mask_bounds_and_rounding() {
        let px = PixelCoords {
            idx: vec![[-1.0, 5.0], [4.4, 9.6], [4.4, 9.4], [-0.4, 0.0], [9.49, 9.49]],
            depth: vec![1.0; 5],
        };
        assert_eq!(in_image_mask(&px, 10, 10).mask, vec![false, false, true, true, true]);
    }

    #[test]
    fn translation_inverse() {
        let t = RigidTransform::from_translation([1.0, 2.0, 3.0]);
        assert_eq!(invert(&t).translation(), [-1.0, -2.0, -3.0]);
        assert_eq!(invert(&RigidTransform::<f64>::identity()), RigidTransform::identity());
    }

    #[test]
    fn works_in_single_precision() {
        let t = RigidTransform::<f32>::from_yaw_translation(0.3, [1.0, 0.0, 0.5]);
        let chain = CalibrationChain {
            ego_from_lidar: t,
            ..CalibrationChain::identity()
        };
        let composed = compose_chain(&chain).unwrap();
        let back = composed.compose(&composed.invert());
        for (r, row) in back.matrix().iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-6);
            }
        }
    }
}
