//! Synthetic street scenes with a known LiDAR/camera desynchronisation.
//!
//! The ego vehicle drives along the world x axis. The LiDAR sweep is taken
//! at `t_s`; camera `i` exposes at `t_s + skew_i` while the ego keeps
//! moving. The declared calibration chain uses the sweep-time pose for both
//! ego stages, so projecting with it lands points where they would have
//! been without motion. Images are rendered from the true exposure-time
//! pose, and the difference of the two projections is recorded as the
//! ground-truth offset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{owner_cameras, project_cameras};
use crate::data_model::{Box2D, CameraImage, CameraView, FrameBundle, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{back_project, compose_chain, project_points, CalibrationChain, CameraIntrinsics, RigidTransform};

pub const BACKGROUND: usize = 0;
pub const GROUND: usize = 1;
pub const VEHICLE: usize = 2;
pub const POLE: usize = 3;
pub const CLASS_NAMES: [&str; 4] = ["background", "ground", "vehicle", "pole"];

const CLASS_COLORS: [[f64; 3]; 4] = [[0.45, 0.45, 0.5], [0.25, 0.25, 0.25], [0.8, 0.15, 0.15], [0.9, 0.8, 0.1]];
const CLASS_INTENSITY: [f64; 4] = [0.35, 0.2, 0.45, 0.5];
const SKY: [f64; 3] = [0.55, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    /// Heading of the optical axis in the ego frame, degrees (0 = forward).
    pub yaw_deg: f64,
    /// Optical centre in the ego frame.
    pub position: [f64; 3],
    pub focal: f64,
    /// Exposure time minus sweep time, seconds.
    pub skew: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    /// Sensor origin in the ego frame; axes are aligned with the ego.
    pub mount: [f64; 3],
    /// Azimuth intervals `[start, end]` in degrees, counter-clockwise from
    /// forward.
    pub sectors_deg: Vec<[f64; 2]>,
    /// Rays per sector.
    pub azimuth_steps: usize,
    pub elevation_deg: [f64; 2],
    pub elevation_steps: usize,
    pub max_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Frame index; selects an independent random stream and the sweep time.
    pub frame: u64,
    pub vehicles: usize,
    pub poles: usize,
    /// Background boxes sized like vehicles; only colour tells them apart.
    pub clutter: usize,
    /// Forward speed, m/s.
    pub speed: f64,
    /// Yaw rate, rad/s.
    pub yaw_rate: f64,
    pub height: usize,
    pub width: usize,
    pub cameras: Vec<CameraRig>,
    pub lidar: LidarSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let side = |yaw: f64| CameraRig {
            yaw_deg: yaw,
            position: [0.0, 0.0, 1.6],
            focal: 72.0,
            skew: 0.05,
        };
        Self {
            seed: 0,
            frame: 0,
            vehicles: 3,
            poles: 4,
            clutter: 3,
            speed: 5.0,
            yaw_rate: 0.0,
            height: 64,
            width: 64,
            cameras: vec![side(90.0), side(-90.0)],
            lidar: LidarSpec {
                mount: [0.0, 0.0, 1.8],
                sectors_deg: vec![[62.0, 118.0], [-118.0, -62.0]],
                azimuth_steps: 100,
                elevation_deg: [-30.0, 15.0],
                elevation_steps: 20,
                max_range: 30.0,
            },
        }
    }
}

impl SceneSpec {
    /// Sets every camera's skew.
    pub fn with_skew(mut self, skew: f64) -> Self {
        for c in &mut self.cameras {
            c.skew = skew;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.cameras.is_empty() {
            return bad("at least one camera");
        }
        if self.cameras.iter().any(|c| !(c.skew >= 0.0) || !c.skew.is_finite()) {
            return bad("skew ≥ 0");
        }
        if self.cameras.iter().any(|c| !(c.focal > 0.0)) {
            return bad("focal > 0");
        }
        if !(self.lidar.max_range > 0.0) {
            return bad("max range > 0");
        }
        if self.height == 0 || self.width == 0 {
            return bad("H ≥ 1, W ≥ 1");
        }
        if !self.speed.is_finite() || !self.yaw_rate.is_finite() {
            return bad("finite motion");
        }
        if self.cameras.iter().any(|c| c.position[2] <= 0.0) || self.lidar.mount[2] <= 0.0 {
            return bad("sensors above ground");
        }
        Ok(())
    }

    /// Sweep timestamp of this frame.
    pub fn sweep_time(&self) -> f64 {
        self.frame as f64
    }
}

/// Axis-aligned solid standing on the ground.
#[derive(Debug, Clone, PartialEq)]
struct Solid {
    min: [f64; 3],
    max: [f64; 3],
    class: usize,
    instance: u32,
    color: [f64; 3],
    intensity: f64,
}

impl Solid {
    /// Entry distance along a ray, slab method.
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((self.min[k] - o[k]) / d[k], (self.max[k] - o[k]) / d[k]);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        (t0 > 1e-9).then_some(t0)
    }

    fn overlaps(&self, other: &Solid, margin: f64) -> bool {
        (0..2).all(|k| self.min[k] - margin < other.max[k] && other.min[k] - margin < self.max[k])
    }

    fn corners(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..8).map(move |i| {
            [
                if i & 1 == 0 { self.min[0] } else { self.max[0] },
                if i & 2 == 0 { self.min[1] } else { self.max[1] },
                if i & 4 == 0 { self.min[2] } else { self.max[2] },
            ]
        })
    }
}

/// What a ray hits first.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Hit {
    distance: f64,
    class: usize,
    instance: u32,
    color: [f64; 3],
    intensity: f64,
}

struct World {
    solids: Vec<Solid>,
    ground_color: [f64; 3],
    ground_intensity: f64,
}

const GROUND_INSTANCE: u32 = 0;

impl World {
    fn cast(&self, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if d[2] < 0.0 && o[2] > 0.0 {
            best = Some(Hit {
                distance: -o[2] / d[2],
                class: GROUND,
                instance: GROUND_INSTANCE,
                color: self.ground_color,
                intensity: self.ground_intensity,
            });
        }
        for s in &self.solids {
            if let Some(t) = s.hit(o, d) {
                if best.map_or(true, |b| t < b.distance) {
                    best = Some(Hit {
                        distance: t,
                        class: s.class,
                        instance: s.instance,
                        color: s.color,
                        intensity: s.intensity,
                    });
                }
            }
        }
        best
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn build_world(spec: &SceneSpec, rng: &mut ChaCha8Rng, x0: f64) -> World {
    let mut solids: Vec<Solid> = Vec::new();
    let mut next_id = GROUND_INSTANCE + 1;
    let mut add = |solids: &mut Vec<Solid>, rng: &mut ChaCha8Rng, min: [f64; 3], max: [f64; 3], class: usize| {
        solids.push(Solid {
            min,
            max,
            class,
            instance: next_id,
            color: jitter(rng, CLASS_COLORS[class], 0.08),
            intensity: CLASS_INTENSITY[class] + rng.gen_range(-0.15..=0.15),
        });
        next_id += 1;
    };
    // facades on both sides of the street
    for side in [-1.0f64, 1.0] {
        let mut x = x0 - 20.0;
        while x < x0 + 20.0 {
            let len = rng.gen_range(5.0..12.0);
            let near = rng.gen_range(7.5..9.0);
            let h = rng.gen_range(4.0..10.0);
            let (ya, yb) = (side * near, side * (near + 5.0));
            add(&mut solids, rng, [x, ya.min(yb), 0.0], [x + len, ya.max(yb), h], BACKGROUND);
            x += len + rng.gen_range(0.0..3.0);
        }
    }
    let facades = solids.len();
    let objects = [(spec.vehicles, VEHICLE), (spec.clutter, BACKGROUND), (spec.poles, POLE)];
    for (count, class) in objects {
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count && attempts < 200 * count.max(1) {
            attempts += 1;
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let cx = x0 + rng.gen_range(-7.0..7.0);
            let (len, wid, h, lat) = match class {
                VEHICLE => (
                    rng.gen_range(3.5..4.8),
                    rng.gen_range(1.6..1.9),
                    rng.gen_range(1.4..1.8),
                    rng.gen_range(4.0..6.0),
                ),
                POLE => {
                    let t = rng.gen_range(0.15..0.25);
                    (t, t, rng.gen_range(3.0..6.0), rng.gen_range(3.0..6.5))
                }
                _ => (
                    rng.gen_range(1.0..4.5),
                    rng.gen_range(1.0..2.0),
                    rng.gen_range(0.8..1.8),
                    rng.gen_range(4.0..6.5),
                ),
            };
            let cy = side * lat;
            let candidate = Solid {
                min: [cx - len / 2.0, cy - wid / 2.0, 0.0],
                max: [cx + len / 2.0, cy + wid / 2.0, h],
                class,
                instance: 0,
                color: [0.0; 3],
                intensity: 0.0,
            };
            if solids[facades..].iter().any(|s| s.overlaps(&candidate, 0.3)) {
                continue;
            }
            add(&mut solids, rng, candidate.min, candidate.max, class);
            placed += 1;
        }
    }
    World {
        solids,
        ground_color: jitter(rng, CLASS_COLORS[GROUND], 0.03),
        ground_intensity: CLASS_INTENSITY[GROUND] + rng.gen_range(-0.05..=0.05),
    }
}

/// Ego pose `global <- ego` at `dt` seconds after the sweep, closed-form
/// constant speed and yaw rate starting at heading zero.
pub fn ego_pose(spec: &SceneSpec, origin_x: f64, dt: f64) -> RigidTransform<f64> {
    let (v, w) = (spec.speed, spec.yaw_rate);
    let yaw = w * dt;
    let (x, y) = if w.abs() < 1e-12 {
        (v * dt, 0.0)
    } else {
        (v / w * yaw.sin(), v / w * (1.0 - yaw.cos()))
    };
    RigidTransform::from_yaw_translation(yaw, [origin_x + x, y, 0.0])
}

/// `cam <- ego` for a rig: camera z along the optical axis, x right, y down.
pub fn cam_from_ego(rig: &CameraRig) -> RigidTransform<f64> {
    let psi = rig.yaw_deg.to_radians();
    let (s, c) = psi.sin_cos();
    let r = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
    let p = rig.position;
    let t = [0, 1, 2].map(|i| -(r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]));
    RigidTransform::from_parts(r, t).expect("rotation is orthonormal")
}

pub fn intrinsics(rig: &CameraRig, height: usize, width: usize) -> CameraIntrinsics<f64> {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    CameraIntrinsics::pinhole(rig.focal, rig.focal, cx, cy).expect("focal > 0")
}

/// A generated frame together with what only the generator knows.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    /// The bundle as a consumer sees it: declared chains, true images.
    pub bundle: FrameBundle<f64>,
    /// Chains using the exposure-time ego pose.
    pub true_chains: Vec<CalibrationChain<f64>>,
    /// Instance hit by each LiDAR ray.
    pub instances: Vec<u32>,
}

/// Ground-truth pixel offsets: projection through each point's owning
/// camera under the true chain minus under the declared chain. Points seen
/// by no camera get `[0, 0]`.
pub fn ground_truth_offsets(bundle: &FrameBundle<f64>, true_chains: &[CalibrationChain<f64>]) -> Result<Vec<[f64; 2]>> {
    let declared = project_cameras(&bundle.cloud, bundle)?;
    let owners = owner_cameras(&declared);
    let truth: Vec<_> = bundle
        .cameras
        .iter()
        .zip(true_chains)
        .map(|(cam, chain)| Ok(project_points(&bundle.cloud, &compose_chain(chain)?, &cam.intrinsics)))
        .collect::<Result<_>>()?;
    Ok(owners
        .iter()
        .enumerate()
        .map(|(i, owner)| match owner {
            Some(c) => {
                let (t, d) = (truth[*c].idx[i], declared[*c].coords.idx[i]);
                [t[0] - d[0], t[1] - d[1]]
            }
            None => [0.0, 0.0],
        })
        .collect())
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn normalize(d: [f64; 3]) -> [f64; 3] {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    d.map(|v| v / n)
}

/// Generates one frame.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticFrame> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.frame);
    let x0 = spec.frame as f64 * 50.0;
    let world = build_world(spec, &mut rng, x0);

    let sweep_pose = ego_pose(spec, x0, 0.0);
    let ego_from_lidar = RigidTransform::from_translation(spec.lidar.mount);
    let global_from_lidar = sweep_pose.compose(&ego_from_lidar);
    let lidar_from_global = global_from_lidar.invert();
    let origin = global_from_lidar.apply([0.0; 3]);

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut instances = Vec::new();
    let [e0, e1] = spec.lidar.elevation_deg;
    let steps = |lo: f64, hi: f64, n: usize, i: usize| {
        if n <= 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    for sector in &spec.lidar.sectors_deg {
        for a in 0..spec.lidar.azimuth_steps {
            let az = steps(sector[0], sector[1], spec.lidar.azimuth_steps, a).to_radians();
            for e in 0..spec.lidar.elevation_steps {
                let el = steps(e0, e1, spec.lidar.elevation_steps, e).to_radians();
                let local = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
                let d = global_from_lidar.rotation();
                let dir = [0, 1, 2].map(|r| d[r][0] * local[0] + d[r][1] * local[1] + d[r][2] * local[2]);
                let Some(hit) = world.cast(origin, dir) else { continue };
                if hit.distance > spec.lidar.max_range {
                    continue;
                }
                let pw = add3(origin, dir.map(|v| v * hit.distance));
                let p = lidar_from_global.apply(pw);
                let intensity = (hit.intensity + rng.gen_range(-0.05..=0.05)).clamp(0.0, 1.0);
                data.extend_from_slice(&[p[0], p[1], p[2], intensity]);
                labels.push(hit.class);
                instances.push(hit.instance);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::DegenerateScene("no LiDAR ray hit the scene".into()));
    }
    let cloud = PointCloud::from_rows(4, data, Some(labels))?;

    let (h, w) = (spec.height, spec.width);
    let t_s = spec.sweep_time();
    let mut cameras = Vec::new();
    let mut true_chains = Vec::new();
    for rig in &spec.cameras {
        let k = intrinsics(rig, h, w);
        let c_from_e = cam_from_ego(rig);
        let true_pose = ego_pose(spec, x0, rig.skew);
        let declared = CalibrationChain {
            ego_from_lidar,
            global_from_ego_sweep: sweep_pose,
            ego_image_from_global: sweep_pose.invert(),
            cam_from_ego: c_from_e,
        };
        let truth = CalibrationChain {
            ego_image_from_global: true_pose.invert(),
            ..declared
        };
        let global_from_cam = true_pose.compose(&c_from_e.invert());
        let cam_origin = global_from_cam.apply([0.0; 3]);
        let rot = global_from_cam.rotation();
        let mut pixels = Vec::with_capacity(h * w * 3);
        let mut visible: Vec<u32> = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let local = back_project(&k, r as f64, c as f64, 1.0);
                let dir = normalize([0, 1, 2].map(|i| rot[i][0] * local[0] + rot[i][1] * local[1] + rot[i][2] * local[2]));
                let rgb = match world.cast(cam_origin, dir) {
                    Some(hit) => {
                        if hit.class == VEHICLE || hit.class == POLE {
                            visible.push(hit.instance);
                        }
                        jitter(&mut rng, hit.color, 0.05)
                    }
                    None => jitter(&mut rng, SKY, 0.02),
                };
                // 8-bit levels, so frames survive the PPM round trip exactly
                pixels.extend(rgb.map(|v| (v * 255.0).round() / 255.0));
            }
        }
        visible.sort_unstable();
        visible.dedup();
        let cam_from_global = global_from_cam.invert();
        let mut boxes = Vec::new();
        for s in world.solids.iter().filter(|s| visible.binary_search(&s.instance).is_ok()) {
            if let Some(b) = projected_box(s, &cam_from_global, &k, h, w) {
                boxes.push(b);
            }
        }
        cameras.push(CameraView {
            image: CameraImage::new(h, w, pixels, t_s + rig.skew)?,
            chain: declared,
            intrinsics: k,
            boxes,
        });
        true_chains.push(truth);
    }
    let mut bundle = FrameBundle {
        cloud,
        cameras,
        class_count: CLASS_NAMES.len(),
        lidar_timestamp: t_s,
        gt_offsets: None,
    };
    bundle.gt_offsets = Some(ground_truth_offsets(&bundle, &true_chains)?);
    Ok(SyntheticFrame {
        bundle,
        true_chains,
        instances,
    })
}

/// Rounded bounding rectangle of the solid's projected corners, clipped to
/// the image. `None` when a corner is behind the camera or the rectangle
/// misses the image.
fn projected_box(
    s: &Solid,
    cam_from_global: &RigidTransform<f64>,
    k: &CameraIntrinsics<f64>,
    h: usize,
    w: usize,
) -> Option<Box2D> {
    let m = k.matrix();
    let (mut r0, mut r1, mut c0, mut c1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in s.corners() {
        let q = cam_from_global.apply(p);
        if q[2] <= 1e-6 {
            return None;
        }
        let col = (m[0][0] * q[0] + m[0][1] * q[1] + m[0][2] * q[2] + m[0][3]) / q[2];
        let row = (m[1][0] * q[0] + m[1][1] * q[1] + m[1][2] * q[2] + m[1][3]) / q[2];
        r0 = r0.min(row);
        r1 = r1.max(row);
        c0 = c0.min(col);
        c1 = c1.max(col);
    }
    let clip = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
    if r1.round() < 0.0 || c1.round() < 0.0 || r0.round() > (h - 1) as f64 || c0.round() > (w - 1) as f64 {
        return None;
    }
    Some(Box2D {
        min_row: clip(r0, h),
        min_col: clip(c0, w),
        max_row: clip(r1, h),
        max_col: clip(c1, w),
        class_id: s.class,
        instance_id: s.instance,
    })
}

/// Frames `0..frames` of one seeded dataset.
pub fn generate_dataset(spec: &SceneSpec, frames: usize) -> Result<Vec<SyntheticFrame>> {
    (0..frames as u64)
        .map(|f| generate(&SceneSpec { frame: f, ..spec.clone() }))
        .collect()
}

/// Seeded disjoint split of `0..len` into `(train, held_out)`; both sides
/// keep at least one item and preserve ascending order.
pub fn split(len: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if len < 2 {
        return Err(Error::TooFewFrames(len));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidConfig("train fraction in [0, 1]".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..len).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_train = ((len as f64 * train_fraction).round() as usize).clamp(1, len - 1);
    let mut train = order[..n_train].to_vec();
    let mut held = order[n_train..].to_vec();
    train.sort_unstable();
    held.sort_unstable();
    Ok((train, held))
}
