//! Minimal reverse-mode automatic differentiation tape.
//!
//! A flat arena of nodes, each holding its forward value and an op record
//! pointing at parent indices. `backward` walks the arena in reverse and
//! accumulates adjoints in a fixed order, so gradients are bit-reproducible.
//! The tape is generic over the float type: f32 for training speed, f64 for
//! finite-difference verification of every layer.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use crate::error::{Result, RevdiffError};

/// Float bound shared by tape and networks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lossless-enough constant conversion from f64 literals.
pub fn c<F: Scalar>(v: f64) -> F {
    F::from(v).expect("float conversion")
}

pub type Idx = usize;

enum Op<F: Scalar> {
    Leaf,
    /// y = conv2d(x, w) + b. `x` is `[C, H, W]`, `w` is `[Cout, C, k, k]`,
    /// `b` is `[Cout]`. Caches the im2col matrix for the backward pass.
    Conv2d { x: Idx, w: Idx, b: Idx, stride: usize, pad: usize, cols: Array2<F> },
    /// y = x · wᵀ + b with x `[n, in]`, w `[out, in]`, b `[out]`.
    Linear { x: Idx, w: Idx, b: Idx },
    MatMul { a: Idx, b: Idx },
    Transpose { a: Idx },
    Reshape { a: Idx },
    SliceCols { a: Idx, from: Idx, to: Idx },
    ConcatCols { parts: Vec<Idx> },
    /// Channel-axis concat of two `[C, H, W]` maps.
    ConcatChannels { a: Idx, b: Idx },
    AddSame { a: Idx, b: Idx },
    /// y = ca·a + cb·b, same shapes.
    Affine2 { a: Idx, ca: F, b: Idx, cb: F },
    /// y = c·x + g for a constant grid g.
    ScaleAddConst { x: Idx, cfac: F },
    /// y = x · s[0] for a single-element gate node s.
    ScaleBy { x: Idx, s: Idx },
    /// bias `[C]` broadcast over `[C, H, W]`.
    AddChannelBias { x: Idx, bias: Idx },
    Silu { x: Idx },
    SoftmaxRows { x: Idx },
    GroupNorm { x: Idx, gamma: Idx, beta: Idx, groups: usize, xhat: ArrayD<F>, inv_std: Vec<F> },
    SpaceToDepth { x: Idx, f: usize },
    DepthToSpace { x: Idx, f: usize },
    UpsampleNearest { x: Idx, f: usize },
    /// Global average pool `[C, H, W]` → `[C]`.
    Gap { x: Idx },
    L2NormRows { x: Idx },
    /// Pass-through inside (−1, 1), zero gradient outside.
    ClampUnit { x: Idx },
    /// mean((x − target)²), scalar output `[1]`.
    MseTo { x: Idx, target: ArrayD<F> },
    /// mean(|x − target|), scalar output `[1]`.
    L1To { x: Idx, target: ArrayD<F> },
    WeightedSum { parts: Vec<(Idx, F)> },
    /// Supervised contrastive loss over similarity logits `[n, n]`
    /// (self-similarities on the diagonal are excluded).
    SupConFromLogits { logits: Idx, labels: Vec<usize> },
}

pub struct Tape<F: Scalar> {
    values: Vec<ArrayD<F>>,
    ops: Vec<Op<F>>,
}

pub struct Grads<F: Scalar>(Vec<ArrayD<F>>);

impl<F: Scalar> Grads<F> {
    pub fn get(&self, i: Idx) -> &ArrayD<F> {
        &self.0[i]
    }
}

fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

fn im2col<F: Scalar>(x: &Array3<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (ch, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((ch * k * k, oh * ow));
    for ci in 0..ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::zeros((ch, h, w));
    for ci in 0..ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> Array2<F> {
    a.clone().into_dimensionality().expect("2-d node")
}

fn as3<F: Scalar>(a: &ArrayD<F>) -> Array3<F> {
    a.clone().into_dimensionality().expect("3-d node")
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, i: Idx) -> &ArrayD<F> {
        &self.values[i]
    }

    /// Scalar node value (shape `[1]`).
    pub fn scalar(&self, i: Idx) -> F {
        self.values[i][[0]]
    }

    fn push(&mut self, v: ArrayD<F>, op: Op<F>) -> Idx {
        self.values.push(v);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, v: ArrayD<F>) -> Idx {
        self.push(v, Op::Leaf)
    }

    pub fn leaf2(&mut self, v: Array2<F>) -> Idx {
        self.leaf(v.into_dyn())
    }

    pub fn leaf3(&mut self, v: Array3<F>) -> Idx {
        self.leaf(v.into_dyn())
    }

    pub fn leaf1(&mut self, v: Array1<F>) -> Idx {
        self.leaf(v.into_dyn())
    }

    pub fn conv2d(&mut self, x: Idx, w: Idx, b: Idx, stride: usize, pad: usize) -> Idx {
        let xv = as3(&self.values[x]);
        let wv = &self.values[w];
        let (cout, cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(cin, xv.dim().0, "conv input channels");
        assert_eq!(k, wv.shape()[3], "square kernels only");
        let cols = im2col(&xv, k, stride, pad);
        let wm = as2(&wv.clone().into_shape_with_order(IxDyn(&[cout, cin * k * k])).unwrap());
        let mut ym = wm.dot(&cols).as_standard_layout().to_owned();
        let bv = &self.values[b];
        for (mut row, bi) in ym.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + *bi);
        }
        let (_, h, wdt) = xv.dim();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wdt + 2 * pad - k) / stride + 1;
        let y = ym.into_shape_with_order((cout, oh, ow)).unwrap().into_dyn();
        self.push(y, Op::Conv2d { x, w, b, stride, pad, cols })
    }

    pub fn linear(&mut self, x: Idx, w: Idx, b: Idx) -> Idx {
        let xv = as2(&self.values[x]);
        let wv = as2(&self.values[w]);
        let bv = &self.values[b];
        let mut y = xv.dot(&wv.t());
        for mut row in y.rows_mut() {
            for (v, bi) in row.iter_mut().zip(bv.iter()) {
                *v += *bi;
            }
        }
        self.push(y.into_dyn(), Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Idx, b: Idx) -> Idx {
        let y = as2(&self.values[a]).dot(&as2(&self.values[b]));
        self.push(y.into_dyn(), Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: Idx) -> Idx {
        let y = as2(&self.values[a]).t().as_standard_layout().to_owned();
        self.push(y.into_dyn(), Op::Transpose { a })
    }

    pub fn reshape(&mut self, a: Idx, shape: &[usize]) -> Idx {
        let y = self.values[a]
            .clone()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        self.push(y, Op::Reshape { a })
    }

    pub fn slice_cols(&mut self, a: Idx, from: usize, to: usize) -> Idx {
        let av = as2(&self.values[a]);
        let y = av.slice(ndarray::s![.., from..to]).to_owned();
        self.push(y.into_dyn(), Op::SliceCols { a, from, to })
    }

    pub fn concat_cols(&mut self, parts: &[Idx]) -> Idx {
        let views: Vec<Array2<F>> = parts.iter().map(|&p| as2(&self.values[p])).collect();
        let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let y = ndarray::concatenate(Axis(1), &refs).expect("concat cols");
        self.push(y.into_dyn(), Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_channels(&mut self, a: Idx, b: Idx) -> Idx {
        let av = as3(&self.values[a]);
        let bv = as3(&self.values[b]);
        let y = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).expect("concat ch");
        self.push(y.into_dyn(), Op::ConcatChannels { a, b })
    }

    pub fn add(&mut self, a: Idx, b: Idx) -> Idx {
        let y = &self.values[a] + &self.values[b];
        self.push(y, Op::AddSame { a, b })
    }

    pub fn affine2(&mut self, a: Idx, ca: F, b: Idx, cb: F) -> Idx {
        let y = self.values[a].mapv(|v| v * ca) + self.values[b].mapv(|v| v * cb);
        self.push(y, Op::Affine2 { a, ca, b, cb })
    }

    pub fn scale_add_const(&mut self, x: Idx, cfac: F, g: &ArrayD<F>) -> Idx {
        let y = self.values[x].mapv(|v| v * cfac) + g;
        self.push(y, Op::ScaleAddConst { x, cfac })
    }

    pub fn scale(&mut self, x: Idx, cfac: F) -> Idx {
        let g = ArrayD::zeros(self.values[x].raw_dim());
        self.scale_add_const(x, cfac, &g)
    }

    /// Broadcast-multiply `x` by the single-element node `s`.
    pub fn scale_by(&mut self, x: Idx, s: Idx) -> Idx {
        debug_assert_eq!(self.values[s].len(), 1, "gate node must hold one value");
        let sv = *self.values[s].iter().next().unwrap();
        let y = self.values[x].mapv(|v| v * sv);
        self.push(y, Op::ScaleBy { x, s })
    }

    pub fn add_channel_bias(&mut self, x: Idx, bias: Idx) -> Idx {
        let xv = as3(&self.values[x]);
        let bv = &self.values[bias];
        let mut y = xv.clone();
        for (mut plane, bi) in y.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            plane.mapv_inplace(|v| v + *bi);
        }
        self.push(y.into_dyn(), Op::AddChannelBias { x, bias })
    }

    pub fn silu(&mut self, x: Idx) -> Idx {
        let y = self.values[x].mapv(|v| v * sigmoid(v));
        self.push(y, Op::Silu { x })
    }

    pub fn softmax_rows(&mut self, x: Idx) -> Idx {
        let xv = as2(&self.values[x]);
        let mut y = xv.clone();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: F = row.iter().cloned().sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(y.into_dyn(), Op::SoftmaxRows { x })
    }

    pub fn group_norm(&mut self, x: Idx, gamma: Idx, beta: Idx, groups: usize) -> Idx {
        let xv = as3(&self.values[x]);
        let (ch, h, w) = xv.dim();
        assert_eq!(ch % groups, 0, "channels divisible by groups");
        let per = ch / groups;
        let eps = c::<F>(1e-5);
        let mut xhat = Array3::<F>::zeros((ch, h, w));
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let sl = xv.slice(ndarray::s![g * per..(g + 1) * per, .., ..]);
            let n = c::<F>((per * h * w) as f64);
            let mean = sl.iter().cloned().sum::<F>() / n;
            let var = sl.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            let mut dst = xhat.slice_mut(ndarray::s![g * per..(g + 1) * per, .., ..]);
            dst.assign(&sl.mapv(|v| (v - mean) * is));
        }
        let gv = &self.values[gamma];
        let bv = &self.values[beta];
        let mut y = xhat.clone();
        for (ci, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (g, b) = (gv[[ci]], bv[[ci]]);
            plane.mapv_inplace(|v| v * g + b);
        }
        self.push(
            y.into_dyn(),
            Op::GroupNorm { x, gamma, beta, groups, xhat: xhat.into_dyn(), inv_std },
        )
    }

    pub fn space_to_depth(&mut self, x: Idx, f: usize) -> Idx {
        let xv = as3(&self.values[x]);
        let (ch, h, w) = xv.dim();
        assert_eq!(h % f, 0);
        assert_eq!(w % f, 0);
        let mut y = Array3::zeros((ch * f * f, h / f, w / f));
        for ci in 0..ch {
            for fy in 0..f {
                for fx in 0..f {
                    let oc = (ci * f + fy) * f + fx;
                    for oy in 0..h / f {
                        for ox in 0..w / f {
                            y[[oc, oy, ox]] = xv[[ci, oy * f + fy, ox * f + fx]];
                        }
                    }
                }
            }
        }
        self.push(y.into_dyn(), Op::SpaceToDepth { x, f })
    }

    pub fn depth_to_space(&mut self, x: Idx, f: usize) -> Idx {
        let xv = as3(&self.values[x]);
        let (ch, h, w) = xv.dim();
        assert_eq!(ch % (f * f), 0);
        let oc = ch / (f * f);
        let mut y = Array3::zeros((oc, h * f, w * f));
        for co in 0..oc {
            for fy in 0..f {
                for fx in 0..f {
                    let ci = (co * f + fy) * f + fx;
                    for iy in 0..h {
                        for ix in 0..w {
                            y[[co, iy * f + fy, ix * f + fx]] = xv[[ci, iy, ix]];
                        }
                    }
                }
            }
        }
        self.push(y.into_dyn(), Op::DepthToSpace { x, f })
    }

    pub fn upsample_nearest(&mut self, x: Idx, f: usize) -> Idx {
        let xv = as3(&self.values[x]);
        let (ch, h, w) = xv.dim();
        let mut y = Array3::zeros((ch, h * f, w * f));
        for ci in 0..ch {
            for iy in 0..h * f {
                for ix in 0..w * f {
                    y[[ci, iy, ix]] = xv[[ci, iy / f, ix / f]];
                }
            }
        }
        self.push(y.into_dyn(), Op::UpsampleNearest { x, f })
    }

    pub fn gap(&mut self, x: Idx) -> Idx {
        let xv = as3(&self.values[x]);
        let (_, h, w) = xv.dim();
        let n = c::<F>((h * w) as f64);
        let y: Array1<F> = xv.axis_iter(Axis(0)).map(|p| p.iter().cloned().sum::<F>() / n).collect();
        self.push(y.into_dyn(), Op::Gap { x })
    }

    pub fn l2_normalize_rows(&mut self, x: Idx) -> Idx {
        let xv = as2(&self.values[x]);
        let mut y = xv.clone();
        for mut row in y.rows_mut() {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(c(1e-12));
            row.mapv_inplace(|v| v / n);
        }
        self.push(y.into_dyn(), Op::L2NormRows { x })
    }

    pub fn clamp_unit(&mut self, x: Idx) -> Idx {
        let one = F::one();
        let y = self.values[x].mapv(|v| v.max(-one).min(one));
        self.push(y, Op::ClampUnit { x })
    }

    pub fn mse_to(&mut self, x: Idx, target: &ArrayD<F>) -> Idx {
        assert_eq!(self.values[x].shape(), target.shape());
        let n = c::<F>(target.len() as f64);
        let s: F = self.values[x]
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), s / n);
        self.push(v, Op::MseTo { x, target: target.clone() })
    }

    pub fn l1_to(&mut self, x: Idx, target: &ArrayD<F>) -> Idx {
        assert_eq!(self.values[x].shape(), target.shape());
        let n = c::<F>(target.len() as f64);
        let s: F = self.values[x].iter().zip(target.iter()).map(|(&a, &b)| (a - b).abs()).sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), s / n);
        self.push(v, Op::L1To { x, target: target.clone() })
    }

    pub fn weighted_sum(&mut self, parts: &[(Idx, F)]) -> Idx {
        let s: F = parts.iter().map(|&(i, w)| self.values[i][[0]] * w).sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), s);
        self.push(v, Op::WeightedSum { parts: parts.to_vec() })
    }

    /// Anchors whose class has no other member are skipped; a batch with no
    /// valid anchor is an error.
    pub fn supcon_from_logits(&mut self, logits: Idx, labels: &[usize]) -> Result<Idx> {
        let lv = as2(&self.values[logits]);
        let n = labels.len();
        assert_eq!(lv.dim(), (n, n), "square logits");
        let (loss, _) = supcon_loss_and_grad(&lv, labels)?;
        let v = ArrayD::from_elem(IxDyn(&[1]), loss);
        Ok(self.push(v, Op::SupConFromLogits { logits, labels: labels.to_vec() }))
    }

    /// Reverse sweep from a scalar root; returns adjoints for every node.
    pub fn backward(&self, root: Idx) -> Grads<F> {
        let mut g: Vec<ArrayD<F>> =
            self.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect();
        g[root].fill(F::one());
        for i in (0..self.ops.len()).rev() {
            if g[i].iter().all(|v| *v == F::zero()) {
                continue;
            }
            // Adjoints can pick up a non-standard layout from transposed
            // contributions; reshapes below need contiguous memory.
            let dy = g[i].as_standard_layout().to_owned();
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    let wv = &self.values[*w];
                    let (cout, cin, k) =
                        (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                    let dym = as2(
                        &dy.clone()
                            .into_shape_with_order(IxDyn(&[cout, dy.len() / cout]))
                            .unwrap(),
                    );
                    // `dot` may return a stride-tricked array when one side
                    // has a single column; force standard layout to reshape.
                    let dw = dym.dot(&cols.t()).as_standard_layout().to_owned();
                    g[*w] += &dw.into_shape_with_order((cout, cin, k, k)).unwrap().into_dyn();
                    let db: Array1<F> = dym.rows().into_iter().map(|r| r.iter().cloned().sum()).collect();
                    g[*b] += &db.into_dyn();
                    let wm = as2(
                        &wv.clone().into_shape_with_order(IxDyn(&[cout, cin * k * k])).unwrap(),
                    );
                    let dcols = wm.t().dot(&dym);
                    let xv = as3(&self.values[*x]);
                    let (_, h, wdt) = xv.dim();
                    g[*x] += &col2im(&dcols, cin, h, wdt, k, *stride, *pad).into_dyn();
                }
                Op::Linear { x, w, b } => {
                    let dym = as2(&dy);
                    let xv = as2(&self.values[*x]);
                    let wv = as2(&self.values[*w]);
                    g[*x] += &dym.dot(&wv).into_dyn();
                    g[*w] += &dym.t().dot(&xv).into_dyn();
                    let db: Array1<F> =
                        (0..dym.ncols()).map(|j| dym.column(j).iter().cloned().sum()).collect();
                    g[*b] += &db.into_dyn();
                }
                Op::MatMul { a, b } => {
                    let dym = as2(&dy);
                    let av = as2(&self.values[*a]);
                    let bv = as2(&self.values[*b]);
                    g[*a] += &dym.dot(&bv.t()).into_dyn();
                    g[*b] += &av.t().dot(&dym).into_dyn();
                }
                Op::Transpose { a } => {
                    let dym = as2(&dy);
                    g[*a] += &dym.t().as_standard_layout().to_owned().into_dyn();
                }
                Op::Reshape { a } => {
                    let shaped = dy
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(self.values[*a].raw_dim())
                        .unwrap();
                    g[*a] += &shaped;
                }
                Op::SliceCols { a, from, to } => {
                    let dym = as2(&dy);
                    let mut da = Array2::<F>::zeros(as2(&self.values[*a]).dim());
                    da.slice_mut(ndarray::s![.., *from..*to]).assign(&dym);
                    g[*a] += &da.into_dyn();
                }
                Op::ConcatCols { parts } => {
                    let dym = as2(&dy);
                    let mut off = 0;
                    for &p in parts {
                        let wid = self.values[p].shape()[1];
                        let da = dym.slice(ndarray::s![.., off..off + wid]).to_owned();
                        g[p] += &da.into_dyn();
                        off += wid;
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let dym = as3(&dy);
                    let ca = self.values[*a].shape()[0];
                    g[*a] += &dym.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn();
                    g[*b] += &dym.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn();
                }
                Op::AddSame { a, b } => {
                    g[*a] += &dy;
                    g[*b] += &dy;
                }
                Op::Affine2 { a, ca, b, cb } => {
                    g[*a] += &dy.mapv(|v| v * *ca);
                    g[*b] += &dy.mapv(|v| v * *cb);
                }
                Op::ScaleAddConst { x, cfac } => {
                    g[*x] += &dy.mapv(|v| v * *cfac);
                }
                Op::ScaleBy { x, s } => {
                    let sv = *self.values[*s].iter().next().unwrap();
                    g[*x] += &dy.mapv(|v| v * sv);
                    let ds: F = dy
                        .iter()
                        .zip(self.values[*x].iter())
                        .map(|(&d, &v)| d * v)
                        .sum();
                    *g[*s].iter_mut().next().unwrap() += ds;
                }
                Op::AddChannelBias { x, bias } => {
                    g[*x] += &dy;
                    let dym = as3(&dy);
                    let db: Array1<F> =
                        dym.axis_iter(Axis(0)).map(|p| p.iter().cloned().sum()).collect();
                    g[*bias] += &db.into_dyn();
                }
                Op::Silu { x } => {
                    let dx = ndarray::Zip::from(&dy)
                        .and(&self.values[*x])
                        .map_collect(|&d, &v| {
                            let s = sigmoid(v);
                            d * s * (F::one() + v * (F::one() - s))
                        });
                    g[*x] += &dx;
                }
                Op::SoftmaxRows { x } => {
                    let y = as2(&self.values[i]);
                    let dym = as2(&dy);
                    let mut dx = Array2::<F>::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: F =
                            y.row(r).iter().zip(dym.row(r).iter()).map(|(&a, &b)| a * b).sum();
                        for cc in 0..y.ncols() {
                            dx[[r, cc]] = y[[r, cc]] * (dym[[r, cc]] - dot);
                        }
                    }
                    g[*x] += &dx.into_dyn();
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                    let dym = as3(&dy);
                    let xh = as3(xhat);
                    let (ch, h, w) = dym.dim();
                    let per = ch / groups;
                    let gv = &self.values[*gamma];
                    let mut dgamma = Array1::<F>::zeros(ch);
                    let mut dbeta = Array1::<F>::zeros(ch);
                    for ci in 0..ch {
                        let mut sg = F::zero();
                        let mut sb = F::zero();
                        for iy in 0..h {
                            for ix in 0..w {
                                sg += dym[[ci, iy, ix]] * xh[[ci, iy, ix]];
                                sb += dym[[ci, iy, ix]];
                            }
                        }
                        dgamma[ci] = sg;
                        dbeta[ci] = sb;
                    }
                    g[*gamma] += &dgamma.into_dyn();
                    g[*beta] += &dbeta.into_dyn();
                    let mut dx = Array3::<F>::zeros((ch, h, w));
                    let m = c::<F>((per * h * w) as f64);
                    for gi in 0..*groups {
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for ci in gi * per..(gi + 1) * per {
                            for iy in 0..h {
                                for ix in 0..w {
                                    let dxh = dym[[ci, iy, ix]] * gv[[ci]];
                                    mean_dxh += dxh;
                                    mean_dxh_xh += dxh * xh[[ci, iy, ix]];
                                }
                            }
                        }
                        mean_dxh /= m;
                        mean_dxh_xh /= m;
                        let is = inv_std[gi];
                        for ci in gi * per..(gi + 1) * per {
                            for iy in 0..h {
                                for ix in 0..w {
                                    let dxh = dym[[ci, iy, ix]] * gv[[ci]];
                                    dx[[ci, iy, ix]] =
                                        is * (dxh - mean_dxh - xh[[ci, iy, ix]] * mean_dxh_xh);
                                }
                            }
                        }
                    }
                    g[*x] += &dx.into_dyn();
                }
                Op::SpaceToDepth { x, f } => {
                    let dym = as3(&dy);
                    let xv = as3(&self.values[*x]);
                    let (ch, h, w) = xv.dim();
                    let mut dx = Array3::<F>::zeros((ch, h, w));
                    for ci in 0..ch {
                        for fy in 0..*f {
                            for fx in 0..*f {
                                let oc = (ci * f + fy) * f + fx;
                                for oy in 0..h / f {
                                    for ox in 0..w / f {
                                        dx[[ci, oy * f + fy, ox * f + fx]] = dym[[oc, oy, ox]];
                                    }
                                }
                            }
                        }
                    }
                    g[*x] += &dx.into_dyn();
                }
                Op::DepthToSpace { x, f } => {
                    let dym = as3(&dy);
                    let xv = as3(&self.values[*x]);
                    let (ch, h, w) = xv.dim();
                    let oc = ch / (f * f);
                    let mut dx = Array3::<F>::zeros((ch, h, w));
                    for co in 0..oc {
                        for fy in 0..*f {
                            for fx in 0..*f {
                                let ci = (co * f + fy) * f + fx;
                                for iy in 0..h {
                                    for ix in 0..w {
                                        dx[[ci, iy, ix]] = dym[[co, iy * f + fy, ix * f + fx]];
                                    }
                                }
                            }
                        }
                    }
                    g[*x] += &dx.into_dyn();
                }
                Op::UpsampleNearest { x, f } => {
                    let dym = as3(&dy);
                    let xv = as3(&self.values[*x]);
                    let (ch, h, w) = xv.dim();
                    let mut dx = Array3::<F>::zeros((ch, h, w));
                    for ci in 0..ch {
                        for iy in 0..h * f {
                            for ix in 0..w * f {
                                dx[[ci, iy / f, ix / f]] += dym[[ci, iy, ix]];
                            }
                        }
                    }
                    g[*x] += &dx.into_dyn();
                }
                Op::Gap { x } => {
                    let xv = as3(&self.values[*x]);
                    let (ch, h, w) = xv.dim();
                    let n = c::<F>((h * w) as f64);
                    let mut dx = Array3::<F>::zeros((ch, h, w));
                    for ci in 0..ch {
                        let v = dy[[ci]] / n;
                        dx.slice_mut(ndarray::s![ci, .., ..]).fill(v);
                    }
                    g[*x] += &dx.into_dyn();
                }
                Op::L2NormRows { x } => {
                    let xv = as2(&self.values[*x]);
                    let yv = as2(&self.values[i]);
                    let dym = as2(&dy);
                    let mut dx = Array2::<F>::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let norm =
                            xv.row(r).iter().map(|&v| v * v).sum::<F>().sqrt().max(c(1e-12));
                        let dot: F =
                            yv.row(r).iter().zip(dym.row(r).iter()).map(|(&a, &b)| a * b).sum();
                        for cc in 0..xv.ncols() {
                            dx[[r, cc]] = (dym[[r, cc]] - yv[[r, cc]] * dot) / norm;
                        }
                    }
                    g[*x] += &dx.into_dyn();
                }
                Op::ClampUnit { x } => {
                    let one = F::one();
                    let dx = ndarray::Zip::from(&dy)
                        .and(&self.values[*x])
                        .map_collect(|&d, &v| if v > -one && v < one { d } else { F::zero() });
                    g[*x] += &dx;
                }
                Op::MseTo { x, target } => {
                    let d = dy[[0]];
                    let n = c::<F>(target.len() as f64);
                    let two = c::<F>(2.0);
                    let dx = ndarray::Zip::from(&self.values[*x])
                        .and(target)
                        .map_collect(|&a, &t| d * two * (a - t) / n);
                    g[*x] += &dx;
                }
                Op::L1To { x, target } => {
                    let d = dy[[0]];
                    let n = c::<F>(target.len() as f64);
                    let dx = ndarray::Zip::from(&self.values[*x]).and(target).map_collect(
                        |&a, &t| {
                            let s = if a > t {
                                F::one()
                            } else if a < t {
                                -F::one()
                            } else {
                                F::zero()
                            };
                            d * s / n
                        },
                    );
                    g[*x] += &dx;
                }
                Op::WeightedSum { parts } => {
                    let d = dy[[0]];
                    for &(p, w) in parts {
                        g[p][[0]] += d * w;
                    }
                }
                Op::SupConFromLogits { logits, labels } => {
                    let lv = as2(&self.values[*logits]);
                    let (_, grad) = supcon_loss_and_grad(&lv, labels).expect("checked at build");
                    g[*logits] += &grad.mapv(|v| v * dy[[0]]).into_dyn();
                }
            }
        }
        Grads(g)
    }
}

/// Supervised contrastive loss over a square logit matrix (similarities
/// already divided by τ); diagonal excluded. Returns loss and d loss / d logits.
fn supcon_loss_and_grad<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
) -> Result<(F, Array2<F>)> {
    let n = labels.len();
    let mut grad = Array2::<F>::zeros((n, n));
    let mut loss = F::zero();
    let mut anchors = 0usize;
    for i in 0..n {
        let pos: Vec<usize> =
            (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let row = logits.row(i);
        let m = (0..n)
            .filter(|&a| a != i)
            .map(|a| row[a])
            .fold(F::neg_infinity(), F::max);
        let denom: F = (0..n).filter(|&a| a != i).map(|a| (row[a] - m).exp()).sum();
        let log_denom = denom.ln() + m;
        let inv_p = F::one() / c::<F>(pos.len() as f64);
        for &p in &pos {
            loss -= (row[p] - log_denom) * inv_p;
        }
        for a in 0..n {
            if a == i {
                continue;
            }
            let soft = (row[a] - m).exp() / denom;
            let target = if labels[a] == labels[i] { inv_p } else { F::zero() };
            grad[[i, a]] = soft - target;
        }
    }
    if anchors == 0 {
        return Err(RevdiffError::InvalidArgument(
            "contrastive batch has no class with two samples".into(),
        ));
    }
    let inv_a = F::one() / c::<F>(anchors as f64);
    loss *= inv_a;
    grad.mapv_inplace(|v| v * inv_a);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal) * 0.5)
    }

    /// Central finite differences on every leaf listed in `inputs`, against
    /// the analytic adjoints of a scalar-valued graph.
    fn fd_check(
        inputs: &[ArrayD<f64>],
        build: impl Fn(&mut Tape<f64>, &[Idx]) -> Idx,
        tol: f64,
    ) {
        let eps = 1e-5;
        let run = |ins: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
            let mut tape = Tape::new();
            let idxs: Vec<Idx> = ins.iter().map(|v| tape.leaf(v.clone())).collect();
            let root = build(&mut tape, &idxs);
            assert_eq!(tape.value(root).len(), 1, "scalar root");
            let loss = tape.scalar(root);
            let grads = tape.backward(root);
            (loss, idxs.iter().map(|&i| grads.get(i).clone()).collect())
        };
        let (_, analytic) = run(inputs);
        for (which, input) in inputs.iter().enumerate() {
            for flat in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[which].as_slice_mut().unwrap()[flat] += eps;
                minus[which].as_slice_mut().unwrap()[flat] -= eps;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
                let an = analytic[which].as_slice().unwrap()[flat];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "input {which} elem {flat}: analytic {an} fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_forward_hand_value() {
        // 1x1 input channel, 2x2 kernel, identity-like check.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf3(ndarray::array![[[1.0, 2.0], [3.0, 4.0]]]);
        let w = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf1(ndarray::array![0.5]);
        let y = tape.conv2d(x, w, b, 1, 0);
        // Single valid position: 1*1 + 4*1 + 0.5.
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert!((tape.value(y)[[0, 0, 0]] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn conv2d_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[2, 5, 5], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        let t = randn(&[3, 3, 3], &mut rng);
        fd_check(&[x, w, b], |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 0);
            tape.mse_to(y, &t)
        }, 1e-5);
    }

    #[test]
    fn conv2d_strided_padded_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[1, 4, 4], &mut rng);
        let w = randn(&[2, 1, 2, 2], &mut rng);
        let b = randn(&[2], &mut rng);
        let t = randn(&[2, 2, 2], &mut rng);
        fd_check(&[x, w, b], |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 0);
            tape.mse_to(y, &t)
        }, 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[1, 3, 3], &mut rng);
        let w = randn(&[1, 1, 3, 3], &mut rng);
        let b = randn(&[1], &mut rng);
        let t = randn(&[1, 3, 3], &mut rng);
        fd_check(&[x, w, b], |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 1);
            tape.mse_to(y, &t)
        }, 1e-5);
    }

    #[test]
    fn linear_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&[3, 4], &mut rng);
        let w = randn(&[2, 4], &mut rng);
        let b = randn(&[2], &mut rng);
        let t = randn(&[3, 2], &mut rng);
        fd_check(&[x, w, b], |tape, ids| {
            let y = tape.linear(ids[0], ids[1], ids[2]);
            tape.mse_to(y, &t)
        }, 1e-5);

        let a = randn(&[3, 4], &mut rng);
        let bm = randn(&[4, 5], &mut rng);
        let t2 = randn(&[2, 3], &mut rng);
        fd_check(&[a, bm], |tape, ids| {
            let y = tape.matmul(ids[0], ids[1]); // [3, 5]
            let cut = tape.slice_cols(y, 1, 3); // [3, 2]
            let flat = tape.reshape(cut, &[6]);
            let two = tape.reshape(flat, &[3, 2]);
            let tr = tape.transpose(two); // [2, 3]
            tape.mse_to(tr, &t2)
        }, 1e-5);
        let parts = randn(&[3, 2], &mut rng);
        let t3 = randn(&[3, 4], &mut rng);
        fd_check(&[parts], |tape, ids| {
            let y = tape.concat_cols(&[ids[0], ids[0]]); // [3, 4]
            tape.mse_to(y, &t3)
        }, 1e-5);
    }

    #[test]
    fn softmax_silu_groupnorm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[3, 5], &mut rng);
        let t = randn(&[3, 5], &mut rng);
        fd_check(&[x], |tape, ids| {
            let y = tape.softmax_rows(ids[0]);
            tape.mse_to(y, &t)
        }, 1e-4);

        let x = randn(&[2, 3, 3], &mut rng);
        let t = randn(&[2, 3, 3], &mut rng);
        fd_check(&[x], |tape, ids| {
            let y = tape.silu(ids[0]);
            tape.mse_to(y, &t)
        }, 1e-5);

        let x = randn(&[4, 3, 3], &mut rng);
        let gamma = randn(&[4], &mut rng);
        let beta = randn(&[4], &mut rng);
        let t = randn(&[4, 3, 3], &mut rng);
        fd_check(&[x, gamma, beta], |tape, ids| {
            let y = tape.group_norm(ids[0], ids[1], ids[2], 2);
            tape.mse_to(y, &t)
        }, 1e-4);
    }

    #[test]
    fn shuffle_concat_upsample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&[2, 4, 4], &mut rng);
        let t = randn(&[8, 2, 2], &mut rng);
        fd_check(&[x], |tape, ids| {
            let y = tape.space_to_depth(ids[0], 2);
            tape.mse_to(y, &t)
        }, 1e-5);
        let x = randn(&[8, 2, 2], &mut rng);
        let t = randn(&[2, 4, 4], &mut rng);
        fd_check(&[x], |tape, ids| {
            let y = tape.depth_to_space(ids[0], 2);
            tape.mse_to(y, &t)
        }, 1e-5);
        let x = randn(&[2, 2, 2], &mut rng);
        let t = randn(&[2, 4, 4], &mut rng);
        fd_check(&[x], |tape, ids| {
            let y = tape.upsample_nearest(ids[0], 2);
            tape.mse_to(y, &t)
        }, 1e-5);
        let a = randn(&[1, 2, 2], &mut rng);
        let b = randn(&[2, 2, 2], &mut rng);
        let t = randn(&[3, 2, 2], &mut rng);
        fd_check(&[a, b], |tape, ids| {
            let y = tape.concat_channels(ids[0], ids[1]);
            tape.mse_to(y, &t)
        }, 1e-5);
    }

    #[test]
    fn space_depth_round_trip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&[3, 8, 8], &mut rng);
        let mut tape = Tape::<f64>::new();
        let i = tape.leaf(x.clone());
        let d = tape.space_to_depth(i, 4);
        let back = tape.depth_to_space(d, 4);
        assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn misc_elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn(&[2, 3], &mut rng);
        let b = randn(&[2, 3], &mut rng);
        let t = randn(&[2, 3], &mut rng);
        fd_check(&[a.clone(), b.clone()], |tape, ids| {
            let y = tape.affine2(ids[0], 0.3, ids[1], -1.7);
            tape.l1_to(y, &t)
        }, 1e-4);
        fd_check(&[a.clone()], |tape, ids| {
            let y = tape.scale_add_const(ids[0], 2.5, &t);
            tape.mse_to(y, &b)
        }, 1e-5);
        let x = randn(&[3, 2, 2], &mut rng);
        let bias = randn(&[3], &mut rng);
        let t3 = randn(&[3, 2, 2], &mut rng);
        fd_check(&[x, bias], |tape, ids| {
            let y = tape.add_channel_bias(ids[0], ids[1]);
            tape.mse_to(y, &t3)
        }, 1e-5);
        let x = randn(&[4, 3, 3], &mut rng);
        let t1 = randn(&[4], &mut rng);
        fd_check(&[x], |tape, ids| {
            let y = tape.gap(ids[0]);
            tape.mse_to(y, &t1)
        }, 1e-5);
        let x = randn(&[3, 6], &mut rng);
        let t = randn(&[3, 6], &mut rng);
        fd_check(&[x], |tape, ids| {
            let y = tape.l2_normalize_rows(ids[0]);
            tape.mse_to(y, &t)
        }, 1e-4);
    }

    #[test]
    fn clamp_gradient_gate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[4]), vec![-2.0, -0.5, 0.5, 2.0]).unwrap());
        let y = tape.clamp_unit(x);
        let t = ArrayD::zeros(IxDyn(&[4]));
        let loss = tape.mse_to(y, &t);
        let grads = tape.backward(loss);
        let gx = grads.get(x);
        assert_eq!(gx[[0]], 0.0);
        assert!(gx[[1]] != 0.0 && gx[[2]] != 0.0);
        assert_eq!(gx[[3]], 0.0);
        assert_eq!(tape.value(y).as_slice().unwrap(), &[-1.0, -0.5, 0.5, 1.0]);
    }

    #[test]
    fn weighted_sum_and_constant_loss() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let t = ArrayD::from_elem(IxDyn(&[2]), 0.0);
        let l1 = tape.mse_to(a, &t);
        let l2 = tape.l1_to(a, &t);
        let total = tape.weighted_sum(&[(l1, 1.0), (l2, 2.0)]);
        assert!((tape.scalar(total) - 3.0).abs() < 1e-12);
        let grads = tape.backward(total);
        assert!((grads.get(a)[[0]] - 2.0).abs() < 1e-12); // 2*1/2*1 + 2*1/2

        // Constant loss: gradient of an unused leaf stays zero.
        let mut tape = Tape::<f64>::new();
        let unused = tape.leaf(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let b = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let grads = tape.backward(b);
        assert!(grads.get(unused).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn supcon_hand_fixtures() {
        // e1=e2=(1,0), e3=e4=(0,1), tau=1: per-anchor loss -log(e/(e+2)).
        let mut tape = Tape::<f64>::new();
        let emb = tape.leaf2(ndarray::array![
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0]
        ]);
        let embt = tape.transpose(emb);
        let sims = tape.matmul(emb, embt);
        let loss = tape.supcon_from_logits(sims, &[0, 0, 1, 1]).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-10, "{}", tape.scalar(loss));
        assert!((expect - 0.55144).abs() < 1e-5);

        // All-identical embeddings: every masked softmax term is 1/3.
        let mut tape = Tape::<f64>::new();
        let emb = tape.leaf2(Array2::from_elem((4, 2), 0.5));
        let embt = tape.transpose(emb);
        let sims = tape.matmul(emb, embt);
        let loss = tape.supcon_from_logits(sims, &[0, 0, 1, 1]).unwrap();
        assert!((tape.scalar(loss) - 3f64.ln()).abs() < 1e-10);

        // Singleton classes only: error.
        let mut tape = Tape::<f64>::new();
        let emb = tape.leaf2(Array2::from_elem((3, 2), 0.5));
        let embt = tape.transpose(emb);
        let sims = tape.matmul(emb, embt);
        assert!(tape.supcon_from_logits(sims, &[0, 1, 2]).is_err());
    }

    #[test]
    fn supcon_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&[5, 3], &mut rng);
        fd_check(&[x], |tape, ids| {
            let n = tape.l2_normalize_rows(ids[0]);
            let nt = tape.transpose(n);
            let sims = tape.matmul(n, nt);
            let logits = tape.scale(sims, 1.0 / 0.3);
            tape.supcon_from_logits(logits, &[0, 1, 0, 1, 0]).unwrap()
        }, 1e-4);
    }

    #[test]
    fn composite_network_grad() {
        // A small end-to-end stack touching most ops at once.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&[2, 4, 4], &mut rng);
        let w1 = randn(&[4, 2, 2, 2], &mut rng);
        let b1 = randn(&[4], &mut rng);
        let gamma = randn(&[4], &mut rng);
        let beta = randn(&[4], &mut rng);
        let bias = randn(&[4], &mut rng);
        let t = randn(&[4, 2, 2], &mut rng);
        fd_check(&[x, w1, b1, gamma, beta, bias], |tape, ids| {
            let h = tape.conv2d(ids[0], ids[1], ids[2], 2, 0);
            let h = tape.group_norm(h, ids[3], ids[4], 2);
            let h = tape.silu(h);
            let h = tape.add_channel_bias(h, ids[5]);
            let skip = tape.scale(h, 0.5);
            let h = tape.add(h, skip);
            tape.l1_to(h, &t)
        }, 1e-4);
    }
}
