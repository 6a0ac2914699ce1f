//! Forward ops and their backward rules.
//!
//! Image tensors are `[n, H, W, C]` (channels last). Convolution weights are
//! `[3, 3, C_in, C_out]` and `[C_in, C_out]`.

use super::{Backward, BackwardCtx, DenseArray, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

// ---------------------------------------------------------------------------
// kernels

/// `[m, k] x [k, n]`.
fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
    out
}

/// `g [m, n] x b^T` -> `[m, k]`.
fn matmul_grad_a<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).fold(T::zero(), |acc, (x, y)| acc + *x * *y);
        }
    }
    out
}

/// `a^T x g` -> `[k, n]`.
fn matmul_grad_b<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * *gv;
            }
        }
    }
    out
}

fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvDims {
    batch: usize,
    height: usize,
    width: usize,
    cin: usize,
    cout: usize,
}

impl ConvDims {
    /// Yields `(out_pixel, in_pixel, tap)` for every valid 3x3 tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.height as isize, self.width as isize);
        for n in 0..self.batch {
            for y in 0..h {
                for x in 0..w {
                    let out_px = (n * self.height + y as usize) * self.width + x as usize;
                    for dy in 0..3isize {
                        let yy = y + dy - 1;
                        if yy < 0 || yy >= h {
                            continue;
                        }
                        for dx in 0..3isize {
                            let xx = x + dx - 1;
                            if xx < 0 || xx >= w {
                                continue;
                            }
                            let in_px = (n * self.height + yy as usize) * self.width + xx as usize;
                            f(out_px, in_px, (dy * 3 + dx) as usize);
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_kernel<T: Real>(x: &[T], w: &[T], b: &[T], d: ConvDims) -> Vec<T> {
    let (ci, co) = (d.cin, d.cout);
    let pixels = d.batch * d.height * d.width;
    let mut out = Vec::with_capacity(pixels * co);
    for _ in 0..pixels {
        out.extend_from_slice(b);
    }
    d.for_each_tap(|o, i, tap| {
        let xin = &x[i * ci..(i + 1) * ci];
        let orow = &mut out[o * co..(o + 1) * co];
        let wtap = &w[tap * ci * co..(tap + 1) * ci * co];
        for (c, xv) in xin.iter().enumerate() {
            if *xv == T::zero() {
                continue;
            }
            let wrow = &wtap[c * co..(c + 1) * co];
            for (ov, wv) in orow.iter_mut().zip(wrow) {
                *ov = *ov + *xv * *wv;
            }
        }
    });
    out
}

// ---------------------------------------------------------------------------
// backward rules

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> Backward<T> for MatMul {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
        let ga = ctx.needs[0].then(|| {
            DenseArray::new(a.shape().to_vec(), matmul_grad_a(g, b.data(), self.m, self.k, self.n)).unwrap()
        });
        let gb = ctx.needs[1].then(|| {
            DenseArray::new(b.shape().to_vec(), matmul_grad_b(a.data(), g, self.m, self.k, self.n)).unwrap()
        });
        vec![ga, gb]
    }
}

struct AddBias;

impl<T: Real> Backward<T> for AddBias {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let bias = ctx.inputs[1];
        let gb = ctx.needs[1]
            .then(|| DenseArray::new(bias.shape().to_vec(), column_sums(ctx.grad.data(), bias.len())).unwrap());
        vec![ctx.needs[0].then(|| ctx.grad.clone()), gb]
    }
}

struct Conv3x3 {
    dims: ConvDims,
}

impl<T: Real> Backward<T> for Conv3x3 {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let d = self.dims;
        let (ci, co) = (d.cin, d.cout);
        let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![T::zero(); x.len()];
            d.for_each_tap(|o, i, tap| {
                let grow = &g[o * co..(o + 1) * co];
                let wtap = &w[tap * ci * co..(tap + 1) * ci * co];
                let gxrow = &mut gx[i * ci..(i + 1) * ci];
                for (c, gxv) in gxrow.iter_mut().enumerate() {
                    let wrow = &wtap[c * co..(c + 1) * co];
                    *gxv = *gxv + grow.iter().zip(wrow).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
                }
            });
            DenseArray::new(ctx.inputs[0].shape().to_vec(), gx).unwrap()
        });
        let gw = ctx.needs[1].then(|| {
            let mut gw = vec![T::zero(); w.len()];
            d.for_each_tap(|o, i, tap| {
                let grow = &g[o * co..(o + 1) * co];
                let xin = &x[i * ci..(i + 1) * ci];
                let gtap = &mut gw[tap * ci * co..(tap + 1) * ci * co];
                for (c, xv) in xin.iter().enumerate() {
                    if *xv == T::zero() {
                        continue;
                    }
                    for (gwv, gv) in gtap[c * co..(c + 1) * co].iter_mut().zip(grow) {
                        *gwv = *gwv + *xv * *gv;
                    }
                }
            });
            DenseArray::new(ctx.inputs[1].shape().to_vec(), gw).unwrap()
        });
        let gb = ctx.needs[2].then(|| DenseArray::new(vec![co], column_sums(g, co)).unwrap());
        vec![gx, gw, gb]
    }
}

struct Conv1x1 {
    rows: usize,
    cin: usize,
    cout: usize,
}

impl<T: Real> Backward<T> for Conv1x1 {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
        let (m, k, n) = (self.rows, self.cin, self.cout);
        vec![
            ctx.needs[0]
                .then(|| DenseArray::new(x.shape().to_vec(), matmul_grad_a(g, w.data(), m, k, n)).unwrap()),
            ctx.needs[1]
                .then(|| DenseArray::new(w.shape().to_vec(), matmul_grad_b(x.data(), g, m, k, n)).unwrap()),
            ctx.needs[2].then(|| DenseArray::new(vec![n], column_sums(g, n)).unwrap()),
        ]
    }
}

struct Relu;

impl<T: Real> Backward<T> for Relu {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let x = ctx.inputs[0];
        let data = x
            .data()
            .iter()
            .zip(ctx.grad.data())
            .map(|(xv, gv)| if *xv > T::zero() { *gv } else { T::zero() })
            .collect();
        vec![Some(DenseArray::new(x.shape().to_vec(), data).unwrap())]
    }
}

struct Softmax;

impl<T: Real> Backward<T> for Softmax {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let y = ctx.output;
        let c = y.last_dim();
        let mut out = Vec::with_capacity(y.len());
        for (yr, gr) in y.data().chunks(c).zip(ctx.grad.data().chunks(c)) {
            let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
            out.extend(yr.iter().zip(gr).map(|(yv, gv)| *yv * (*gv - dot)));
        }
        vec![Some(DenseArray::new(y.shape().to_vec(), out).unwrap())]
    }
}

struct Concat {
    left: usize,
    right: usize,
}

impl<T: Real> Backward<T> for Concat {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let total = self.left + self.right;
        let g = ctx.grad.data();
        let split = |lo: usize, width: usize, shape: &[usize]| {
            let data = g.chunks(total).flat_map(|r| r[lo..lo + width].iter().copied()).collect();
            DenseArray::new(shape.to_vec(), data).unwrap()
        };
        vec![
            ctx.needs[0].then(|| split(0, self.left, ctx.inputs[0].shape())),
            ctx.needs[1].then(|| split(self.left, self.right, ctx.inputs[1].shape())),
        ]
    }
}

struct Gather {
    index: Vec<Option<usize>>,
}

impl<T: Real> Backward<T> for Gather {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let x = ctx.inputs[0];
        let c = x.last_dim();
        let mut gx = vec![T::zero(); x.len()];
        for (k, src) in self.index.iter().enumerate() {
            let Some(r) = src else { continue };
            for (a, b) in gx[r * c..(r + 1) * c].iter_mut().zip(&ctx.grad.data()[k * c..(k + 1) * c]) {
                *a = *a + *b;
            }
        }
        vec![Some(DenseArray::new(x.shape().to_vec(), gx).unwrap())]
    }
}

struct ScatterMean {
    group: Vec<usize>,
    counts: Vec<usize>,
}

impl<T: Real> Backward<T> for ScatterMean {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let x = ctx.inputs[0];
        let c = x.last_dim();
        let g = ctx.grad.data();
        let mut gx = Vec::with_capacity(x.len());
        for &grp in &self.group {
            let scale = T::one() / T::count(self.counts[grp]);
            gx.extend(g[grp * c..(grp + 1) * c].iter().map(|v| *v * scale));
        }
        vec![Some(DenseArray::new(x.shape().to_vec(), gx).unwrap())]
    }
}

struct Add;

impl<T: Real> Backward<T> for Add {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        vec![
            ctx.needs[0].then(|| ctx.grad.clone()),
            ctx.needs[1].then(|| ctx.grad.clone()),
        ]
    }
}

struct MulScalar<T> {
    factor: T,
}

impl<T: Real> Backward<T> for MulScalar<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let data = ctx.grad.data().iter().map(|g| *g * self.factor).collect();
        vec![Some(DenseArray::new(ctx.inputs[0].shape().to_vec(), data).unwrap())]
    }
}

struct MeanAll;

impl<T: Real> Backward<T> for MeanAll {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let x = ctx.inputs[0];
        let g = ctx.grad.data()[0] / T::count(x.len().max(1));
        vec![Some(DenseArray::full(x.shape().to_vec(), g))]
    }
}

struct Reshape;

impl<T: Real> Backward<T> for Reshape {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        vec![Some(
            ctx.grad.clone().reshaped(ctx.inputs[0].shape().to_vec()).unwrap(),
        )]
    }
}

// ---------------------------------------------------------------------------
// forward ops

impl<T: Real> Tape<T> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = DenseArray::new(vec![m, n], out)?;
        Ok(self.custom(&[a, b], value, Box::new(MatMul { m, k, n })))
    }

    /// Adds a `[c]` bias to every row of a `[..., c]` array.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let b = self.value(bias).data();
        let c = b.len();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v = *v + *bv;
            }
        }
        let value = DenseArray::new(sx.to_vec(), data)?;
        Ok(self.custom(&[x, bias], value, Box::new(AddBias)))
    }

    /// Stride 1, zero padding 1. `x: [n, H, W, ci]`, `w: [3, 3, ci, co]`, `b: [co]`.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[3] {
            return Err(Error::shape("conv2d_3x3", sx, sw));
        }
        if sb != [sw[3]] {
            return Err(Error::shape("conv2d_3x3 bias", sw, sb));
        }
        let dims = ConvDims {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            cin: sx[3],
            cout: sw[3],
        };
        let out = conv3x3_kernel(self.value(x).data(), self.value(w).data(), self.value(b).data(), dims);
        let value = DenseArray::new(vec![dims.batch, dims.height, dims.width, dims.cout], out)?;
        Ok(self.custom(&[x, w, b], value, Box::new(Conv3x3 { dims })))
    }

    /// Per-pixel linear map over the channel axis. `x: [..., ci]`, `w: [ci, co]`.
    pub fn conv2d_1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.is_empty() || sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("conv2d_1x1", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(Error::shape("conv2d_1x1 bias", sw, sb));
        }
        let (cin, cout) = (sw[0], sw[1]);
        let rows = self.value(x).rows();
        let mut out = matmul_kernel(self.value(x).data(), self.value(w).data(), rows, cin, cout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v = *v + *bv;
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = DenseArray::new(shape, out)?;
        Ok(self.custom(&[x, w, b], value, Box::new(Conv1x1 { rows, cin, cout })))
    }

    /// Subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.max(T::zero())).collect();
        let value = DenseArray::new(v.shape().to_vec(), data).unwrap();
        self.custom(&[x], value, Box::new(Relu))
    }

    /// Max-shifted softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = DenseArray::new(v.shape().to_vec(), softmax_rows(v.data(), v.last_dim())).unwrap();
        self.custom(&[x], value, Box::new(Softmax))
    }

    /// Concatenates along the last dimension; leading dimensions must match.
    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_lastdim", sa, sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (va, vb) = (self.value(a), self.value(b));
        let rows = va.rows();
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let value = DenseArray::new(shape, data)?;
        Ok(self.custom(&[a, b], value, Box::new(Concat { left: ca, right: cb })))
    }

    /// Row gather from `x: [R, C]`. `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("gather_rows", sx, &[index.len()]));
        }
        let (r, c) = (sx[0], sx[1]);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows index", sx, &[*bad]));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for src in &index {
            match src {
                Some(i) => data.extend_from_slice(&v[i * c..(i + 1) * c]),
                None => data.extend(std::iter::repeat(T::zero()).take(c)),
            }
        }
        let value = DenseArray::new(vec![index.len(), c], data)?;
        Ok(self.custom(&[x], value, Box::new(Gather { index })))
    }

    /// Mean of the rows of `x: [R, C]` falling in each of `groups` groups.
    /// Empty groups are zero.
    pub fn scatter_rows_mean(&mut self, x: Var, group: Vec<usize>, groups: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != group.len() {
            return Err(Error::shape("scatter_rows_mean", sx, &[group.len()]));
        }
        if let Some(bad) = group.iter().find(|&&g| g >= groups) {
            return Err(Error::shape("scatter_rows_mean group", &[groups], &[*bad]));
        }
        let c = sx[1];
        let v = self.value(x).data();
        let mut counts = vec![0usize; groups];
        let mut data = vec![T::zero(); groups * c];
        for (r, &g) in group.iter().enumerate() {
            counts[g] += 1;
            for (o, xv) in data[g * c..(g + 1) * c].iter_mut().zip(&v[r * c..(r + 1) * c]) {
                *o = *o + *xv;
            }
        }
        for (g, &n) in counts.iter().enumerate() {
            if n > 1 {
                let inv = T::one() / T::count(n);
                data[g * c..(g + 1) * c].iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        let value = DenseArray::new(vec![groups, c], data)?;
        Ok(self.custom(&[x], value, Box::new(ScatterMean { group, counts })))
    }

    /// Elementwise sum of equal shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = DenseArray::new(sa.to_vec(), data)?;
        Ok(self.custom(&[a, b], value, Box::new(Add)))
    }

    pub fn mul_scalar(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| *a * factor).collect();
        let value = DenseArray::new(v.shape().to_vec(), data).unwrap();
        self.custom(&[x], value, Box::new(MulScalar { factor }))
    }

    /// Mean of all elements as a scalar; zero for an empty array.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = if v.is_empty() {
            T::zero()
        } else {
            v.data().iter().copied().sum::<T>() / T::count(v.len())
        };
        self.custom(&[x], DenseArray::scalar(mean), Box::new(MeanAll))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.custom(&[x], value, Box::new(Reshape)))
    }
}

/// Row-wise max-shifted softmax.
pub(crate) fn softmax_rows<T: Real>(data: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for v in row {
            let e = (*v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / sum);
    }
    out
}
