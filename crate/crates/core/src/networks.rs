//! Trainable components: a point segmenter producing `F_coarse`, a
//! per-pixel image segmenter producing `F_image` and the offset head.
//!
//! Parameters live in a [`Parameters`] set. A forward pass first binds the
//! set onto a tape with [`Parameters::bind`]; after `backward` the same
//! binding is used to apply an update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_uniform, sgd_step, DenseArray, Gradients, Tape, Var};
use crate::data_model::CameraImage;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Named parameter arrays in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters<T: Real> {
    names: Vec<String>,
    arrays: Vec<DenseArray<T>>,
}

/// Tape handles of a bound [`Parameters`] set.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl From<Vec<Var>> for Bound {
    /// Binds arbitrary tape variables, in parameter order.
    fn from(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl Bound {
    pub fn get(&self, i: usize) -> Var {
        self.0[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> Parameters<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseArray<T>) -> usize {
        self.names.push(name.into());
        self.arrays.push(value);
        self.arrays.len() - 1
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[DenseArray<T>] {
        &self.arrays
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray<T>)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    /// Number of scalar parameters.
    pub fn size(&self) -> usize {
        self.arrays.iter().map(DenseArray::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.arrays.iter().map(|a| tape.leaf(a.clone())).collect())
    }

    /// Gradients for every parameter, zero where the loss does not reach it.
    pub fn gradients(&self, tape: &Tape<T>, grads: &Gradients<T>, bound: &Bound) -> Vec<DenseArray<T>> {
        bound.0.iter().map(|v| grads.wrt(tape, *v)).collect()
    }

    pub fn sgd(&mut self, tape: &Tape<T>, grads: &Gradients<T>, bound: &Bound, lr: T) -> Result<()> {
        let g = self.gradients(tape, grads, bound);
        sgd_step(&mut self.arrays, &g, lr)
    }

    /// Replaces the values by name; names and shapes must match exactly.
    pub fn load(&mut self, entries: Vec<(String, DenseArray<T>)>) -> Result<()> {
        if entries.len() != self.arrays.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.arrays.len()
            )));
        }
        for (name, value) in entries {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown tensor {name}")))?;
            if self.arrays[i].shape() != value.shape() {
                return Err(Error::shape("load", self.arrays[i].shape(), value.shape()));
            }
            self.arrays[i] = value;
        }
        Ok(())
    }

    fn add_linear<R: Rng + ?Sized>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> usize {
        let w = self.push(format!("{prefix}.weight"), glorot_uniform(vec![fan_in, fan_out], fan_in, fan_out, rng));
        self.push(format!("{prefix}.bias"), DenseArray::zeros(vec![fan_out]));
        w
    }

    fn add_conv3<R: Rng + ?Sized>(&mut self, prefix: &str, cin: usize, cout: usize, rng: &mut R) -> usize {
        let shape = vec![3, 3, cin, cout];
        let w = self.push(format!("{prefix}.weight"), glorot_uniform(shape, 9 * cin, 9 * cout, rng));
        self.push(format!("{prefix}.bias"), DenseArray::zeros(vec![cout]));
        w
    }
}

fn linear<T: Real>(tape: &mut Tape<T>, bound: &Bound, at: usize, x: Var) -> Result<Var> {
    tape.conv2d_1x1(x, bound.get(at), bound.get(at + 1))
}

fn conv3<T: Real>(tape: &mut Tape<T>, bound: &Bound, at: usize, x: Var) -> Result<Var> {
    tape.conv2d_3x3(x, bound.get(at), bound.get(at + 1))
}

/// Point branch: `[N, D']` features to `[N, C0]`.
pub trait CoarseSegmenter<T: Real> {
    fn parameters(&self) -> &Parameters<T>;
    fn parameters_mut(&mut self) -> &mut Parameters<T>;
    fn input_dims(&self) -> usize;
    fn output_dims(&self) -> usize;
    /// `features` is `[N, input_dims]`, `xyz` the matching coordinates.
    fn forward(&self, tape: &mut Tape<T>, bound: &Bound, features: Var, xyz: &[[T; 3]]) -> Result<Var>;
}

/// Image branch: RGB images to `[n, H, W, C1]`.
pub trait ImageSegmenter<T: Real> {
    fn parameters(&self) -> &Parameters<T>;
    fn parameters_mut(&mut self) -> &mut Parameters<T>;
    fn output_dims(&self) -> usize;
    fn forward(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> Result<Var>;
}

/// Shape of the voxel grid used by [`GridPoolSegmenter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Default for GridShape {
    fn default() -> Self {
        Self { x: 32, y: 32, z: 8 }
    }
}

impl GridShape {
    pub fn cells(&self) -> usize {
        self.x * self.y * self.z
    }

    /// Cell of every point over the cloud's axis-aligned bounds.
    pub fn assign<T: Real>(&self, xyz: &[[T; 3]]) -> Vec<usize> {
        let dims = [self.x, self.y, self.z];
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for p in xyz {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        xyz.iter()
            .map(|p| {
                let mut cell = 0;
                for k in 0..3 {
                    let extent = hi[k] - lo[k];
                    let n = dims[k];
                    let i = if extent > T::zero() {
                        ((p[k] - lo[k]) / extent * T::count(n)).floor().to_usize().unwrap_or(0).min(n - 1)
                    } else {
                        0
                    };
                    cell = cell * n + i;
                }
                cell
            })
            .collect()
    }
}

/// Two-layer per-point perceptron over `[x | pool(x)]`, where `pool` is the
/// mean of the input rows sharing a voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoolSegmenter<T: Real> {
    params: Parameters<T>,
    input_dims: usize,
    hidden: usize,
    classes: usize,
    pub grid: GridShape,
}

impl<T: Real> GridPoolSegmenter<T> {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        input_dims: usize,
        hidden: usize,
        classes: usize,
        grid: GridShape,
        rng: &mut R,
    ) -> Self {
        let mut params = Parameters::new();
        params.add_linear(&format!("{prefix}.hidden"), 2 * input_dims, hidden, rng);
        params.add_linear(&format!("{prefix}.out"), hidden, classes, rng);
        Self {
            params,
            input_dims,
            hidden,
            classes,
            grid,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

impl<T: Real> CoarseSegmenter<T> for GridPoolSegmenter<T> {
    fn parameters(&self) -> &Parameters<T> {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    fn input_dims(&self) -> usize {
        self.input_dims
    }

    fn output_dims(&self) -> usize {
        self.classes
    }

    fn forward(&self, tape: &mut Tape<T>, bound: &Bound, features: Var, xyz: &[[T; 3]]) -> Result<Var> {
        let s = tape.shape(features);
        if s.len() != 2 || s[1] != self.input_dims || s[0] != xyz.len() {
            return Err(Error::shape("GridPoolSegmenter", s, &[xyz.len(), self.input_dims]));
        }
        let cells = self.grid.assign(xyz);
        let pooled = tape.scatter_rows_mean(features, cells.clone(), self.grid.cells())?;
        let back = tape.gather_rows(pooled, cells.into_iter().map(Some).collect())?;
        let u = tape.concat_lastdim(features, back)?;
        let h = linear(tape, bound, 0, u)?;
        let h = tape.relu(h);
        linear(tape, bound, 2, h)
    }
}

/// Two 3x3 convolutions over RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelConvSegmenter<T: Real> {
    params: Parameters<T>,
    channels: usize,
}

impl<T: Real> PixelConvSegmenter<T> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, channels: usize, rng: &mut R) -> Self {
        let mut params = Parameters::new();
        params.add_conv3("image.conv1", 3, hidden, rng);
        params.add_conv3("image.conv2", hidden, channels, rng);
        Self { params, channels }
    }
}

impl<T: Real> ImageSegmenter<T> for PixelConvSegmenter<T> {
    fn parameters(&self) -> &Parameters<T> {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    fn output_dims(&self) -> usize {
        self.channels
    }

    fn forward(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> Result<Var> {
        let h = conv3(tape, bound, 0, images)?;
        let h = tape.relu(h);
        conv3(tape, bound, 2, h)
    }
}

/// `[n, H, W, C0 + C1]` to a two-channel `(row, col)` offset field. The
/// output layer starts at zero, so an untrained head predicts no offset.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetHead<T: Real> {
    params: Parameters<T>,
    input_dims: usize,
}

impl<T: Real> OffsetHead<T> {
    pub fn new<R: Rng + ?Sized>(input_dims: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = Parameters::new();
        params.add_conv3("offset.conv1", input_dims, hidden, rng);
        params.add_conv3("offset.conv2", hidden, hidden, rng);
        params.push("offset.out.weight", DenseArray::zeros(vec![hidden, 2]));
        params.push("offset.out.bias", DenseArray::zeros(vec![2]));
        Self { params, input_dims }
    }

    pub fn parameters(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    pub fn input_dims(&self) -> usize {
        self.input_dims
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var> {
        let s = tape.shape(features);
        if s.len() != 4 || s[3] != self.input_dims {
            return Err(Error::shape("OffsetHead", s, &[self.input_dims]));
        }
        let h = conv3(tape, bound, 0, features)?;
        let h = tape.relu(h);
        let h = conv3(tape, bound, 2, h)?;
        let h = tape.relu(h);
        linear(tape, bound, 4, h)
    }
}

/// Stacks camera images into `[n, H, W, 3]`.
pub fn stack_images<T: Real>(images: &[&CameraImage<T>]) -> Result<DenseArray<T>> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidBundle("n ≥ 1".into()));
    };
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::InvalidBundle("cameras share (H, W)".into()));
        }
        data.extend_from_slice(img.pixels());
    }
    DenseArray::new(vec![images.len(), h, w, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_array, rng};

    #[test]
    fn grid_assignment_bounds() {
        let g = GridShape { x: 2, y: 2, z: 1 };
        let cells = g.assign(&[[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.4, 0.6, 0.0]]);
        assert_eq!(cells, vec![0, 3, 1]);
        assert_eq!(g.assign::<f64>(&[]), Vec::<usize>::new());
    }

    #[test]
    fn coarse_shapes_and_determinism() {
        let mut r = rng(1);
        let net = GridPoolSegmenter::<f64>::new("coarse", 5, 8, 4, GridShape::default(), &mut r);
        let x = random_array(&mut r, vec![10, 5], 1.0);
        let xyz: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 1.0]).collect();
        let run = || {
            let mut t = Tape::new();
            let b = net.parameters().bind(&mut t);
            let xv = t.constant(x.clone());
            let y = net.forward(&mut t, &b, xv, &xyz).unwrap();
            t.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[10, 4]);
        assert_eq!(a, run());
    }

    #[test]
    fn same_seed_same_init() {
        let a = OffsetHead::<f64>::new(6, 4, &mut rng(3));
        let b = OffsetHead::<f64>::new(6, 4, &mut rng(3));
        assert_eq!(a, b);
        let c = OffsetHead::<f64>::new(6, 4, &mut rng(4));
        assert_ne!(a, c);
    }

    #[test]
    fn untrained_head_predicts_zero() {
        let mut r = rng(8);
        let head = OffsetHead::<f64>::new(5, 4, &mut r);
        let mut t = Tape::new();
        let b = head.parameters().bind(&mut t);
        let x = t.constant(random_array(&mut r, vec![1, 4, 4, 5], 1.0));
        let o = head.forward(&mut t, &b, x).unwrap();
        assert!(t.value(o).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_points_in_one_voxel_agree() {
        let mut r = rng(9);
        let net = GridPoolSegmenter::<f64>::new("coarse", 4, 8, 3, GridShape::default(), &mut r);
        let row = [0.3, -0.1, 0.7, 0.2];
        let other = [0.9, 0.4, -0.5, 0.0];
        let x = DenseArray::new(vec![3, 4], [row, row, other].concat()).unwrap();
        let xyz = [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [5.0, 3.0, 0.0]];
        let mut t = Tape::new();
        let b = net.parameters().bind(&mut t);
        let xv = t.constant(x);
        let y = net.forward(&mut t, &b, xv, &xyz).unwrap();
        assert_eq!(t.value(y).row(0), t.value(y).row(1));
    }

    #[test]
    fn image_segmenter_shift_equivariant_inside() {
        let mut r = rng(10);
        let seg = PixelConvSegmenter::<f64>::new(4, 16, &mut r);
        let (h, w) = (8, 8);
        let img = random_array(&mut r, vec![1, h, w, 3], 1.0);
        let mut shifted = DenseArray::zeros(vec![1, h, w, 3]);
        for y in 0..h {
            for x in 1..w {
                for c in 0..3 {
                    shifted.data_mut()[(y * w + x) * 3 + c] = img.data()[(y * w + x - 1) * 3 + c];
                }
            }
        }
        let run = |a: &DenseArray<f64>| {
            let mut t = Tape::new();
            let b = seg.parameters().bind(&mut t);
            let v = t.constant(a.clone());
            let o = seg.forward(&mut t, &b, v).unwrap();
            t.value(o).clone()
        };
        let (a, b) = (run(&img), run(&shifted));
        assert_eq!(a.shape(), &[1, 8, 8, 16]);
        // two stacked 3x3 convs see 2 px; stay that far from every border
        for y in 2..h - 2 {
            for x in 3..w - 2 {
                for c in 0..16 {
                    let (u, v) = (a.data()[((y * w) + x - 1) * 16 + c], b.data()[(y * w + x) * 16 + c]);
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
        let zero = run(&DenseArray::zeros(vec![2, 8, 8, 3]));
        assert_eq!(zero.shape(), &[2, 8, 8, 16]);
        assert!(zero.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn image_and_offset_shapes() {
        let mut r = rng(2);
        let seg = PixelConvSegmenter::<f64>::new(4, 6, &mut r);
        let head = OffsetHead::<f64>::new(6 + 3, 4, &mut r);
        let mut t = Tape::new();
        let bs = seg.parameters().bind(&mut t);
        let bh = head.parameters().bind(&mut t);
        let img = t.constant(random_array(&mut r, vec![2, 5, 7, 3], 1.0));
        let f = seg.forward(&mut t, &bs, img).unwrap();
        assert_eq!(t.shape(f), &[2, 5, 7, 6]);
        let extra = t.constant(DenseArray::zeros(vec![2, 5, 7, 3]));
        let cat = t.concat_lastdim(f, extra).unwrap();
        let o = head.forward(&mut t, &bh, cat).unwrap();
        assert_eq!(t.shape(o), &[2, 5, 7, 2]);
        assert!(head.forward(&mut t, &bh, f).is_err());
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut p = OffsetHead::<f64>::new(3, 2, &mut rng(0)).parameters().clone();
        let entries: Vec<_> = p.iter().map(|(n, a)| (n.to_string(), a.clone())).collect();
        p.load(entries.clone()).unwrap();
        let mut bad = entries.clone();
        bad[0].0 = "nope".into();
        assert!(p.load(bad).is_err());
        let mut bad = entries;
        bad[0].1 = DenseArray::zeros(vec![1]);
        assert!(p.load(bad).is_err());
    }

    #[test]
    fn sgd_reduces_simple_loss() {
        let mut r = rng(5);
        let mut net = GridPoolSegmenter::<f64>::new("coarse", 3, 8, 2, GridShape { x: 2, y: 1, z: 1 }, &mut r);
        let x = random_array(&mut r, vec![6, 3], 1.0);
        let xyz: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
        let labels = [0, 1, 0, 1, 0, 1];
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let mut t = Tape::new();
            let b = net.parameters().bind(&mut t);
            let xv = t.constant(x.clone());
            let y = net.forward(&mut t, &b, xv, &xyz).unwrap();
            let l = crate::losses::cross_entropy(&mut t, y, &labels).unwrap();
            last = t.value(l).item().unwrap();
            first.get_or_insert(last);
            let g = t.backward(l).unwrap();
            net.parameters_mut().sgd(&t, &g, &b, 0.5).unwrap();
        }
        assert!(last < first.unwrap() * 0.5, "{first:?} -> {last}");
    }
}
