//! Helpers shared by the integration tests: finite differences, random
//! rigid transforms and random frame bundles.
#![allow(dead_code)]

use lifseg::autodiff::{DenseArray, Tape, Var};
use lifseg::data_model::{Box2D, CameraImage, CameraView, FrameBundle, PointCloud};
use lifseg::geometry::{CalibrationChain, CameraIntrinsics, RigidTransform};
use lifseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> DenseArray<f64> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
    DenseArray::new(shape, data).unwrap()
}

/// Entries with magnitude in `[0.1, scale)` and random sign, away from kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> DenseArray<f64> {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m = rng.gen_range(0.1..scale);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    DenseArray::new(shape, data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Worst relative error between tape gradients and central differences.
pub fn grad_check<F>(inputs: &[DenseArray<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |arrays: &[DenseArray<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[k]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Rotation from Z-Y-X Euler angles.
pub fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

pub fn random_rigid(rng: &mut ChaCha8Rng, angle: f64, shift: f64) -> RigidTransform<f64> {
    let r = rotation(
        rng.gen_range(-angle..=angle),
        rng.gen_range(-angle..=angle),
        rng.gen_range(-angle..=angle),
    );
    let t = [0; 3].map(|_| rng.gen_range(-shift..=shift));
    RigidTransform::from_parts(r, t).unwrap()
}

pub fn random_chain(rng: &mut ChaCha8Rng, angle: f64, shift: f64) -> CalibrationChain<f64> {
    CalibrationChain {
        ego_from_lidar: random_rigid(rng, angle, shift),
        global_from_ego_sweep: random_rigid(rng, angle, shift),
        ego_image_from_global: random_rigid(rng, angle, shift),
        cam_from_ego: random_rigid(rng, angle, shift),
    }
}

pub fn random_intrinsics(rng: &mut ChaCha8Rng, height: usize, width: usize) -> CameraIntrinsics<f64> {
    let f = rng.gen_range(0.6..1.4) * height.max(width) as f64;
    let skew = rng.gen_range(-0.1..0.1);
    CameraIntrinsics::try_new([
        [f * rng.gen_range(0.9..1.1), skew, width as f64 / 2.0 + rng.gen_range(-1.0..1.0), 0.0],
        [0.0, f, height as f64 / 2.0 + rng.gen_range(-1.0..1.0), 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])
    .unwrap()
}

/// Image whose channels are multiples of `1/255`.
pub fn random_image(rng: &mut ChaCha8Rng, height: usize, width: usize, timestamp: f64) -> CameraImage<f64> {
    let pixels = (0..height * width * 3).map(|_| rng.gen_range(0..=255u8) as f64 / 255.0).collect();
    CameraImage::new(height, width, pixels, timestamp).unwrap()
}

/// A valid bundle: points mostly in front of every camera, cameras with
/// similar poses so their views overlap, and windows that reach past the
/// image border at small sizes.
pub fn random_bundle(rng: &mut ChaCha8Rng) -> FrameBundle<f64> {
    let n = rng.gen_range(1..80);
    let dims = rng.gen_range(3..6);
    let classes = rng.gen_range(2..6);
    let (h, w) = (rng.gen_range(2..10), rng.gen_range(2..10));
    let mut data = Vec::with_capacity(n * dims);
    for _ in 0..n {
        data.push(rng.gen_range(-3.0..3.0));
        data.push(rng.gen_range(-3.0..3.0));
        data.push(rng.gen_range(-1.0..8.0));
        for _ in 3..dims {
            data.push(rng.gen_range(0.0..1.0));
        }
    }
    let labels = rng.gen_bool(0.8).then(|| (0..n).map(|_| rng.gen_range(0..classes)).collect());
    let cloud = PointCloud::new(dims, data, labels).unwrap();
    let cameras = (0..rng.gen_range(1..4))
        .map(|_| {
            let boxes = (0..rng.gen_range(0..4))
                .map(|k| {
                    let (r0, r1) = ordered(rng, h);
                    let (c0, c1) = ordered(rng, w);
                    Box2D {
                        min_row: r0,
                        max_row: r1,
                        min_col: c0,
                        max_col: c1,
                        class_id: rng.gen_range(0..classes),
                        instance_id: k as u32 + rng.gen_range(0..3) * 10,
                    }
                })
                .collect();
            let timestamp = rng.gen_range(0.0..10.0);
            CameraView {
                image: random_image(rng, h, w, timestamp),
                chain: random_chain(rng, 0.15, 0.3),
                intrinsics: random_intrinsics(rng, h, w),
                boxes,
            }
        })
        .collect();
    let gt_offsets = rng
        .gen_bool(0.5)
        .then(|| (0..n).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect());
    let bundle = FrameBundle {
        cloud,
        cameras,
        class_count: classes,
        lidar_timestamp: rng.gen_range(0.0..10.0),
        gt_offsets,
    };
    lifseg::data_model::validate(&bundle).unwrap();
    bundle
}

fn ordered(rng: &mut ChaCha8Rng, len: usize) -> (usize, usize) {
    let a = rng.gen_range(0..len);
    let b = rng.gen_range(0..len);
    (a.min(b), a.max(b))
}
