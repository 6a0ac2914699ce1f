//! Offset rectification: scatter coarse point features into per-camera
//! pseudo-images, read the predicted offset field back at each point,
//! shift the point's image lookup by that offset and gather aligned image
//! features. Also builds the box-centroid supervision and its two losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, BackwardCtx, DenseArray, Tape, Var};
use crate::context::CameraProjection;
use crate::data_model::{owning_box, FrameBundle};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Norm threshold below which a point is left out of the direction loss.
pub const DIRECTION_EPS: f64 = 1e-8;

fn check_projections<T: Real>(projections: &[CameraProjection<T>], points: usize) -> Result<()> {
    for p in projections {
        if p.mask.len() != points || p.coords.len() != points {
            return Err(Error::shape("offset: projection length", &[p.mask.len()], &[points]));
        }
    }
    Ok(())
}

/// For each cell of the `n x H x W` pseudo-image, the visible point with the
/// smallest depth (ties to the lower index).
pub fn scatter_index<T: Real>(projections: &[CameraProjection<T>], height: usize, width: usize) -> Vec<Option<usize>> {
    let plane = height * width;
    let mut cells: Vec<Option<usize>> = vec![None; projections.len() * plane];
    for (cam, proj) in projections.iter().enumerate() {
        for i in 0..proj.mask.len() {
            if !proj.mask.mask[i] {
                continue;
            }
            let Some((r, c)) = proj.coords.pixel(i, height, width) else { continue };
            let cell = &mut cells[cam * plane + r * width + c];
            match cell {
                Some(j) if proj.coords.depth[*j] <= proj.coords.depth[i] => {}
                _ => *cell = Some(i),
            }
        }
    }
    cells
}

/// `F_points: [n, H, W, C0]`, nearest-depth point feature per cell, zero
/// where no point lands.
pub fn scatter_coarse<T: Real>(
    tape: &mut Tape<T>,
    coarse: Var,
    projections: &[CameraProjection<T>],
    height: usize,
    width: usize,
) -> Result<Var> {
    let shape = tape.shape(coarse).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("scatter_coarse", &shape, &[0, 0]));
    }
    check_projections(projections, shape[0])?;
    let cells = scatter_index(projections, height, width);
    let flat = tape.gather_rows(coarse, cells)?;
    tape.reshape(flat, vec![projections.len(), height, width, shape[1]])
}

/// For each point, its cell in the owning camera's offset field.
pub fn point_cells<T: Real>(
    projections: &[CameraProjection<T>],
    owners: &[Option<usize>],
    height: usize,
    width: usize,
) -> Vec<Option<usize>> {
    owners
        .iter()
        .enumerate()
        .map(|(i, owner)| {
            let cam = (*owner)?;
            let (r, c) = projections[cam].coords.pixel(i, height, width)?;
            Some((cam * height + r) * width + c)
        })
        .collect()
}

fn clamp_index<T: Real>(v: T, len: usize) -> usize {
    let hi = T::count(len - 1);
    let r = v.round();
    if r.is_nan() {
        return 0;
    }
    r.max(T::zero()).min(hi).to_usize().unwrap_or(0)
}

/// Output of [`rectified_gather`].
pub struct Rectified {
    /// `[N, C1]` image features at the updated positions.
    pub features: Var,
    /// `[N, 2]` point-wise offsets read from the field.
    pub offsets: Var,
    /// Cell each point's features were read from.
    pub cells: Vec<Option<usize>>,
}

/// Reads the offset field at each point's rounded pixel in its owning
/// camera, moves the lookup to `round(pixel + offset)` clamped to the image,
/// and gathers `F_image` there. Points seen by no camera get zero features
/// and zero offset. The updated index is not differentiable in the offset.
pub fn rectified_gather<T: Real>(
    tape: &mut Tape<T>,
    image_features: Var,
    offset_field: Var,
    projections: &[CameraProjection<T>],
    owners: &[Option<usize>],
) -> Result<Rectified> {
    let fs = tape.shape(image_features).to_vec();
    let os = tape.shape(offset_field).to_vec();
    if fs.len() != 4 || os.len() != 4 || os[3] != 2 || fs[..3] != os[..3] || fs[0] != projections.len() {
        return Err(Error::shape("rectified_gather", &fs, &os));
    }
    check_projections(projections, owners.len())?;
    let (n, h, w, c1) = (fs[0], fs[1], fs[2], fs[3]);
    let base = point_cells(projections, owners, h, w);
    let field = tape.reshape(offset_field, vec![n * h * w, 2])?;
    let offsets = tape.gather_rows(field, base.clone())?;
    let values = tape.value(offsets).data().to_vec();
    let cells: Vec<Option<usize>> = base
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let cell = (*cell)?;
            let cam = cell / (h * w);
            let [row, col] = projections[cam].coords.idx[i];
            let (dr, dc) = (values[2 * i], values[2 * i + 1]);
            let (dr, dc) = if dr.is_finite() && dc.is_finite() {
                (dr, dc)
            } else {
                (T::zero(), T::zero())
            };
            let r = clamp_index(row + dr, h);
            let c = clamp_index(col + dc, w);
            Some((cam * h + r) * w + c)
        })
        .collect();
    let flat = tape.reshape(image_features, vec![n * h * w, c1])?;
    let features = tape.gather_rows(flat, cells.clone())?;
    Ok(Rectified {
        features,
        offsets,
        cells,
    })
}

/// Image features at each point's own rounded pixel, no offset applied.
pub fn plain_gather<T: Real>(
    tape: &mut Tape<T>,
    image_features: Var,
    projections: &[CameraProjection<T>],
    owners: &[Option<usize>],
) -> Result<Var> {
    let fs = tape.shape(image_features).to_vec();
    if fs.len() != 4 || fs[0] != projections.len() {
        return Err(Error::shape("plain_gather", &fs, &[projections.len()]));
    }
    check_projections(projections, owners.len())?;
    let cells = point_cells(projections, owners, fs[1], fs[2]);
    let flat = tape.reshape(image_features, vec![fs[0] * fs[1] * fs[2], fs[3]])?;
    tape.gather_rows(flat, cells)
}

/// `[F_coarse | F'_image]`.
pub fn fuse<T: Real>(tape: &mut Tape<T>, coarse: Var, image_points: Var) -> Result<Var> {
    let (a, b) = (tape.shape(coarse), tape.shape(image_points));
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
        return Err(Error::shape("fuse", a, b));
    }
    tape.concat_lastdim(coarse, image_points)
}

// ---------------------------------------------------------------------------
// supervision targets

/// Where the per-box anchor point comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidMode {
    /// Mean projected position of the points inside the box.
    #[default]
    MemberMean,
    /// Geometric center of the box rectangle.
    BoxCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetOptions {
    pub centroid: CentroidMode,
    /// Only points whose label equals the box class are supervised.
    pub require_class_match: bool,
}

impl Default for TargetOptions {
    fn default() -> Self {
        Self {
            centroid: CentroidMode::MemberMean,
            require_class_match: true,
        }
    }
}

/// Per-point offset supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetTargets<T: Real> {
    /// `m_i`: point falls inside a box of its owning camera.
    pub mask: Vec<bool>,
    /// `c_hat_i`, meaningful where `mask` is set.
    pub centroid: Vec<[T; 2]>,
    /// `p_i`: projected `(row, col)` in the owning camera.
    pub position: Vec<[T; 2]>,
    /// `(camera, instance id)` of the owning box.
    pub group: Vec<Option<(usize, u32)>>,
}

impl<T: Real> OffsetTargets<T> {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// `c_hat_i - p_i`.
    pub fn target(&self, i: usize) -> [T; 2] {
        [
            self.centroid[i][0] - self.position[i][0],
            self.centroid[i][1] - self.position[i][1],
        ]
    }
}

/// Builds `m`, `c_hat` and `p` for every point from the boxes of its owning
/// camera. A point inside several boxes belongs to the smallest one.
pub fn compute_targets<T: Real>(
    bundle: &FrameBundle<T>,
    projections: &[CameraProjection<T>],
    owners: &[Option<usize>],
    options: TargetOptions,
) -> Result<OffsetTargets<T>> {
    let n = bundle.cloud.len();
    check_projections(projections, n)?;
    if owners.len() != n {
        return Err(Error::shape("compute_targets", &[owners.len()], &[n]));
    }
    let (h, w) = bundle.image_size();
    let labels = bundle.cloud.labels();
    let mut mask = vec![false; n];
    let mut position = vec![[T::zero(); 2]; n];
    let mut group: Vec<Option<(usize, u32)>> = vec![None; n];
    let mut box_center: Vec<[T; 2]> = vec![[T::zero(); 2]; n];
    for i in 0..n {
        let Some(cam) = owners[i] else { continue };
        let proj = &projections[cam];
        position[i] = proj.coords.idx[i];
        let Some((r, c)) = proj.coords.pixel(i, h, w) else { continue };
        let label = labels.map(|l| l[i]);
        let owner = owning_box(&bundle.cameras[cam].boxes, r, c, |b| {
            !options.require_class_match || label.map_or(true, |l| l == b.class_id)
        });
        if let Some(b) = owner {
            mask[i] = true;
            group[i] = Some((cam, b.instance_id));
            box_center[i] = b.center();
        }
    }
    let centroid = match options.centroid {
        CentroidMode::BoxCenter => box_center,
        CentroidMode::MemberMean => {
            let mut sums: std::collections::BTreeMap<(usize, u32), ([T; 2], usize)> = Default::default();
            for i in 0..n {
                if let Some(g) = group[i] {
                    let e = sums.entry(g).or_insert(([T::zero(); 2], 0));
                    e.0[0] = e.0[0] + position[i][0];
                    e.0[1] = e.0[1] + position[i][1];
                    e.1 += 1;
                }
            }
            (0..n)
                .map(|i| match group[i] {
                    Some(g) => {
                        let (s, k) = sums[&g];
                        let k = T::count(k);
                        [s[0] / k, s[1] / k]
                    }
                    None => [T::zero(); 2],
                })
                .collect()
        }
    };
    Ok(OffsetTargets {
        mask,
        centroid,
        position,
        group,
    })
}

// ---------------------------------------------------------------------------
// auxiliary losses

fn offsets_of<T: Real>(o: &[T]) -> impl Iterator<Item = [T; 2]> + '_ {
    o.chunks(2).map(|c| [c[0], c[1]])
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// L1 regression of the offsets onto `c_hat - p` over masked points; the
/// second element is the gradient with respect to `o`.
fn reg_kernel<T: Real>(o: &[T], targets: &OffsetTargets<T>) -> (T, Vec<T>) {
    let count = targets.count();
    let mut grad = vec![T::zero(); o.len()];
    if count == 0 {
        return (T::zero(), grad);
    }
    let inv = T::one() / T::count(count);
    let mut sum = T::zero();
    for (i, oi) in offsets_of(o).enumerate() {
        if !targets.mask[i] {
            continue;
        }
        let t = targets.target(i);
        for k in 0..2 {
            let r = oi[k] - t[k];
            sum = sum + r.abs();
            grad[2 * i + k] = sign(r) * inv;
        }
    }
    (sum * inv, grad)
}

fn norm2<T: Real>(v: [T; 2]) -> T {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Negative mean cosine between offsets and `c_hat - p`, skipping
/// near-zero vectors.
fn dir_kernel<T: Real>(o: &[T], targets: &OffsetTargets<T>) -> (T, Vec<T>) {
    let eps = T::lit(DIRECTION_EPS);
    let mut grad = vec![T::zero(); o.len()];
    let kept: Vec<usize> = offsets_of(o)
        .enumerate()
        .filter(|(i, oi)| targets.mask[*i] && norm2(*oi) >= eps && norm2(targets.target(*i)) >= eps)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return (T::zero(), grad);
    }
    let inv = T::one() / T::count(kept.len());
    let mut sum = T::zero();
    for &i in &kept {
        let oi = [o[2 * i], o[2 * i + 1]];
        let t = targets.target(i);
        let (on, tn) = (norm2(oi), norm2(t));
        let u = [t[0] / tn, t[1] / tn];
        let cos = (oi[0] * u[0] + oi[1] * u[1]) / on;
        sum = sum + cos;
        // d/do (o.u / |o|) = (u - cos * o/|o|) / |o|
        for k in 0..2 {
            grad[2 * i + k] = -inv * (u[k] - cos * oi[k] / on) / on;
        }
    }
    (-sum * inv, grad)
}

struct AuxLoss<T: Real> {
    grad: Vec<T>,
}

impl<T: Real> Backward<T> for AuxLoss<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let g = ctx.grad.data()[0];
        let data = self.grad.iter().map(|v| *v * g).collect();
        vec![Some(DenseArray::new(ctx.inputs[0].shape().to_vec(), data).unwrap())]
    }
}

fn aux_loss<T: Real>(
    tape: &mut Tape<T>,
    offsets: Var,
    targets: &OffsetTargets<T>,
    kernel: fn(&[T], &OffsetTargets<T>) -> (T, Vec<T>),
    name: &'static str,
) -> Result<Var> {
    let s = tape.shape(offsets);
    if s != [targets.len(), 2] {
        return Err(Error::shape(name, s, &[targets.len(), 2]));
    }
    let (value, grad) = kernel(tape.value(offsets).data(), targets);
    Ok(tape.custom(&[offsets], DenseArray::scalar(value), Box::new(AuxLoss { grad })))
}

/// `L_reg` on the tape.
pub fn loss_reg<T: Real>(tape: &mut Tape<T>, offsets: Var, targets: &OffsetTargets<T>) -> Result<Var> {
    aux_loss(tape, offsets, targets, reg_kernel, "loss_reg")
}

/// `L_dir` on the tape.
pub fn loss_dir<T: Real>(tape: &mut Tape<T>, offsets: Var, targets: &OffsetTargets<T>) -> Result<Var> {
    aux_loss(tape, offsets, targets, dir_kernel, "loss_dir")
}

/// `L_reg` for a plain `[o_row, o_col]` list.
pub fn loss_reg_value<T: Real>(offsets: &[[T; 2]], targets: &OffsetTargets<T>) -> T {
    let flat: Vec<T> = offsets.iter().flatten().copied().collect();
    reg_kernel(&flat, targets).0
}

/// `L_dir` for a plain `[o_row, o_col]` list.
pub fn loss_dir_value<T: Real>(offsets: &[[T; 2]], targets: &OffsetTargets<T>) -> T {
    let flat: Vec<T> = offsets.iter().flatten().copied().collect();
    dir_kernel(&flat, targets).0
}
