//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Tensor`] is an immutable node in a computation graph. Operations build
//! new nodes; calling [`Tensor::backward`] on a scalar result walks the graph
//! in reverse creation order and accumulates gradients into every node that
//! was created with `requires_grad`.
//!
//! The engine is deliberately small: only the operations the toy denoiser,
//! the attention pipeline, and the guidance losses need. All arithmetic is
//! `f64` so gradients can be checked against central finite differences at
//! tight tolerances.
//!
//! Spatial feature maps use the layout `[height * width, channels]` with
//! row-major positions; plain matrices are `[rows, cols]`.

use ndarray::{ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackpropFn = Box<dyn Fn(&ArrayD<f64>)>;

struct Node {
    id: u64,
    data: ArrayD<f64>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backprop: Option<BackpropFn>,
}

/// Handle to a node in the autodiff graph. Cloning is cheap (reference count).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl Tensor {
    fn new(data: ArrayD<f64>, requires_grad: bool, parents: Vec<Tensor>, backprop: Option<BackpropFn>) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                data,
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backprop,
            }),
        }
    }

    /// A node that does not participate in gradient computation.
    pub fn constant(data: ArrayD<f64>) -> Self {
        Tensor::new(data, false, Vec::new(), None)
    }

    /// A gradient-tracked input node (parameter binding or probe input).
    pub fn leaf(data: ArrayD<f64>) -> Self {
        Tensor::new(data, true, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, backprop: BackpropFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::new(data, true, parents, Some(backprop))
        } else {
            Tensor::new(data, false, Vec::new(), None)
        }
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.node.data
    }

    pub fn shape(&self) -> &[usize] {
        self.node.data.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Gradient accumulated by the last `backward` call, if any.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.node.data.len(), 1, "item() requires a single-element tensor");
        *self.node.data.iter().next().unwrap()
    }

    fn accumulate(&self, g: ArrayD<f64>) {
        if !self.node.requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.node.data.shape(), "gradient shape mismatch");
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing += &g,
            None => *slot = Some(g),
        }
    }

    /// Backpropagate from a scalar node, filling `grad` on every reachable
    /// gradient-tracked node. Nodes are processed in reverse creation order,
    /// which is a valid topological order because parents are always created
    /// before children.
    pub fn backward(&self) {
        assert_eq!(self.node.data.len(), 1, "backward() requires a scalar loss");
        self.accumulate(ArrayD::ones(self.node.data.raw_dim()));

        let mut stack = vec![self.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.node.requires_grad || !seen.insert(t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.node.id));
        for n in &nodes {
            if let Some(bp) = &n.node.backprop {
                let g = n.node.grad.borrow().clone();
                if let Some(g) = g {
                    bp(&g);
                }
            }
        }
    }

    fn as2(&self) -> ArrayView2<'_, f64> {
        self.node
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .expect("tensor is not 2-D")
    }

    // ----- elementwise -----

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let out = &self.node.data + &rhs.node.data;
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(out, vec![self.clone(), rhs.clone()], Box::new(move |g| {
            a.accumulate(g.clone());
            b.accumulate(g.clone());
        }))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let out = &self.node.data - &rhs.node.data;
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(out, vec![self.clone(), rhs.clone()], Box::new(move |g| {
            a.accumulate(g.clone());
            b.accumulate(g.mapv(|x| -x));
        }))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let out = &self.node.data * &rhs.node.data;
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(out, vec![self.clone(), rhs.clone()], Box::new(move |g| {
            a.accumulate(g * &b.node.data);
            b.accumulate(g * &a.node.data);
        }))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.node.data.mapv(|x| x * c);
        let a = self.clone();
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| {
            a.accumulate(g.mapv(|x| x * c));
        }))
    }

    pub fn silu(&self) -> Tensor {
        let out = self.node.data.mapv(|x| x * sigmoid(x));
        let a = self.clone();
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| {
            let dv = a.node.data.mapv(|x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            });
            a.accumulate(g * &dv);
        }))
    }

    // ----- linear algebra -----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let av = self.as2();
        let bv = rhs.as2();
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dimension mismatch");
        let out = av.dot(&bv).into_dyn();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(out, vec![self.clone(), rhs.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            if a.requires_grad() {
                a.accumulate(g2.dot(&b.as2().t()).into_dyn());
            }
            if b.requires_grad() {
                b.accumulate(a.as2().t().dot(&g2).into_dyn());
            }
        }))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Tensor {
        let out = self.as2().t().as_standard_layout().to_owned().into_dyn();
        let a = self.clone();
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            a.accumulate(g2.t().as_standard_layout().to_owned().into_dyn());
        }))
    }

    /// `[m, n] + [1, n]`, broadcasting the row vector over all rows.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        let av = self.as2();
        let rv = row.as2();
        assert_eq!(rv.nrows(), 1, "add_row: rhs must be [1, n]");
        assert_eq!(av.ncols(), rv.ncols(), "add_row: width mismatch");
        let out = (&av + &rv).into_dyn();
        let (a, r) = (self.clone(), row.clone());
        Tensor::from_op(out, vec![self.clone(), row.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            a.accumulate(g.clone());
            if r.requires_grad() {
                let summed = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                r.accumulate(summed.into_dyn());
            }
        }))
    }

    // ----- reductions & shape -----

    pub fn sum_all(&self) -> Tensor {
        let out = ArrayD::from_elem(IxDyn(&[1]), self.node.data.sum());
        let a = self.clone();
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| {
            let gv = g[[0]];
            a.accumulate(ArrayD::from_elem(a.node.data.raw_dim(), gv));
        }))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.node.data.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Mean over the first axis of a 2-D tensor: `[m, n] -> [1, n]`.
    pub fn mean_axis0(&self) -> Tensor {
        let av = self.as2();
        let m = av.nrows() as f64;
        let out = av.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)).into_dyn();
        let a = self.clone();
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let rows = a.as2().nrows();
            let mut ga = ndarray::Array2::<f64>::zeros((rows, g2.ncols()));
            for mut row in ga.outer_iter_mut() {
                row.assign(&(&g2.row(0) / m));
            }
            a.accumulate(ga.into_dyn());
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let out = self
            .node
            .data
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let a = self.clone();
        let orig: Vec<usize> = self.shape().to_vec();
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| {
            let back = g.clone().into_shape_with_order(IxDyn(&orig)).unwrap();
            a.accumulate(back);
        }))
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Tensor {
        let av = self.as2();
        assert!(start + width <= av.ncols(), "slice_cols out of range");
        let out = av
            .slice(ndarray::s![.., start..start + width])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let a = self.clone();
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let (rows, cols) = (a.as2().nrows(), a.as2().ncols());
            let mut ga = ndarray::Array2::<f64>::zeros((rows, cols));
            ga.slice_mut(ndarray::s![.., start..start + width]).assign(&g2);
            a.accumulate(ga.into_dyn());
        }))
    }

    /// Concatenate 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let rows = parts[0].as2().nrows();
        let widths: Vec<usize> = parts.iter().map(|p| p.as2().ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = ndarray::Array2::<f64>::zeros((rows, total));
        let mut off = 0;
        for p in parts {
            let pv = p.as2();
            assert_eq!(pv.nrows(), rows, "concat_cols: row count mismatch");
            out.slice_mut(ndarray::s![.., off..off + pv.ncols()]).assign(&pv);
            off += pv.ncols();
        }
        let owned: Vec<Tensor> = parts.to_vec();
        Tensor::from_op(out.into_dyn(), owned.clone(), Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut off = 0;
            for (p, w) in owned.iter().zip(&widths) {
                let slice = g2
                    .slice(ndarray::s![.., off..off + *w])
                    .as_standard_layout()
                    .to_owned();
                p.accumulate(slice.into_dyn());
                off += *w;
            }
        }))
    }

    /// Row lookup: `table[ids[i]]` stacked into `[ids.len(), width]`.
    /// The backward pass scatter-adds into the looked-up rows, so repeated
    /// indices accumulate.
    pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Tensor {
        let tv = table.as2();
        let width = tv.ncols();
        for &i in ids {
            assert!(i < tv.nrows(), "gather_rows: index {i} out of range");
        }
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), width));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(i));
        }
        let t = table.clone();
        let ids_owned: Vec<usize> = ids.to_vec();
        Tensor::from_op(out.into_dyn(), vec![table.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let (rows, cols) = (t.as2().nrows(), t.as2().ncols());
            let mut gt = ndarray::Array2::<f64>::zeros((rows, cols));
            for (r, &i) in ids_owned.iter().enumerate() {
                let mut dst = gt.row_mut(i);
                dst += &g2.row(r);
            }
            t.accumulate(gt.into_dyn());
        }))
    }

    /// Column `j` of a 2-D tensor as a 1-D tensor of length `rows`.
    pub fn index_column(&self, j: usize) -> Tensor {
        let av = self.as2();
        assert!(j < av.ncols(), "index_column out of range");
        let out = av.column(j).to_owned().into_dyn();
        let a = self.clone();
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| {
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            let (rows, cols) = (a.as2().nrows(), a.as2().ncols());
            let mut ga = ndarray::Array2::<f64>::zeros((rows, cols));
            ga.column_mut(j).assign(&g1);
            a.accumulate(ga.into_dyn());
        }))
    }

    // ----- softmax -----

    /// Row-wise softmax of a 2-D tensor (over the last axis).
    pub fn softmax_rows(&self) -> Tensor {
        let av = self.as2();
        let mut out = av.to_owned();
        for mut row in out.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let a = self.clone();
        let saved = out.clone();
        Tensor::from_op(out.into_dyn(), vec![self.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut ga = ndarray::Array2::<f64>::zeros(saved.dim());
            for r in 0..saved.nrows() {
                let s = saved.row(r);
                let gr = g2.row(r);
                let dot: f64 = s.iter().zip(gr.iter()).map(|(si, gi)| si * gi).sum();
                for c in 0..saved.ncols() {
                    ga[[r, c]] = s[c] * (gr[c] - dot);
                }
            }
            a.accumulate(ga.into_dyn());
        }))
    }

    // ----- spatial ops on [h*w, c] feature maps -----

    /// 2x2 average pooling. `h` and `w` must be even.
    pub fn avg_pool2(&self, h: usize, w: usize) -> Tensor {
        let av = self.as2();
        assert_eq!(av.nrows(), h * w, "avg_pool2: position count mismatch");
        assert!(h.is_multiple_of(2) && w.is_multiple_of(2), "avg_pool2: odd spatial size");
        let c = av.ncols();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = ndarray::Array2::<f64>::zeros((oh * ow, c));
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += av[[(2 * oy + dy) * w + 2 * ox + dx, ch]];
                        }
                    }
                    out[[oy * ow + ox, ch]] = acc / 4.0;
                }
            }
        }
        let a = self.clone();
        Tensor::from_op(out.into_dyn(), vec![self.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let c = g2.ncols();
            let mut ga = ndarray::Array2::<f64>::zeros((h * w, c));
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    for ch in 0..c {
                        let gv = g2[[oy * (w / 2) + ox, ch]] / 4.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                ga[[(2 * oy + dy) * w + 2 * ox + dx, ch]] += gv;
                            }
                        }
                    }
                }
            }
            a.accumulate(ga.into_dyn());
        }))
    }

    /// 2x nearest-neighbour upsampling.
    pub fn upsample2(&self, h: usize, w: usize) -> Tensor {
        let av = self.as2();
        assert_eq!(av.nrows(), h * w, "upsample2: position count mismatch");
        let c = av.ncols();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = ndarray::Array2::<f64>::zeros((oh * ow, c));
        for oy in 0..oh {
            for ox in 0..ow {
                let src = (oy / 2) * w + ox / 2;
                for ch in 0..c {
                    out[[oy * ow + ox, ch]] = av[[src, ch]];
                }
            }
        }
        let a = self.clone();
        Tensor::from_op(out.into_dyn(), vec![self.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let c = g2.ncols();
            let mut ga = ndarray::Array2::<f64>::zeros((h * w, c));
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let src = (oy / 2) * w + ox / 2;
                    for ch in 0..c {
                        ga[[src, ch]] += g2[[oy * 2 * w + ox, ch]];
                    }
                }
            }
            a.accumulate(ga.into_dyn());
        }))
    }

    /// 3x3 patch extraction with zero padding: `[h*w, c] -> [h*w, 9c]`.
    /// Column block `k*c..(k+1)*c` holds the neighbour at offset
    /// `(dy, dx) = (k / 3 - 1, k % 3 - 1)`. A 3x3 convolution is
    /// `im2col3(x).matmul(kernel)` with `kernel: [9c, c_out]`.
    pub fn im2col3(&self, h: usize, w: usize) -> Tensor {
        let av = self.as2();
        assert_eq!(av.nrows(), h * w, "im2col3: position count mismatch");
        let c = av.ncols();
        let mut out = ndarray::Array2::<f64>::zeros((h * w, 9 * c));
        for y in 0..h {
            for x in 0..w {
                for k in 0..9 {
                    let (dy, dx) = (k / 3, k % 3);
                    let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = sy as usize * w + sx as usize;
                    for ch in 0..c {
                        out[[y * w + x, k * c + ch]] = av[[src, ch]];
                    }
                }
            }
        }
        let a = self.clone();
        Tensor::from_op(out.into_dyn(), vec![self.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let c = g2.ncols() / 9;
            let mut ga = ndarray::Array2::<f64>::zeros((h * w, c));
            for y in 0..h {
                for x in 0..w {
                    for k in 0..9 {
                        let (dy, dx) = (k / 3, k % 3);
                        let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let src = sy as usize * w + sx as usize;
                        for ch in 0..c {
                            ga[[src, ch]] += g2[[y * w + x, k * c + ch]];
                        }
                    }
                }
            }
            a.accumulate(ga.into_dyn());
        }))
    }

    /// Bilinear resize of a 2-D map `[h, w] -> [oh, ow]`, half-pixel centres
    /// (align-corners disabled) with edge replication. Output values are
    /// convex combinations of input values, so any input bound is preserved.
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Tensor {
        let av = self.as2();
        let (h, w) = (av.nrows(), av.ncols());
        let taps = bilinear_taps(h, w, oh, ow);
        let mut out = ndarray::Array2::<f64>::zeros((oh, ow));
        for (o, tap) in out.iter_mut().zip(taps.iter()) {
            let mut acc = 0.0;
            for &(sy, sx, wgt) in tap {
                acc += wgt * av[[sy, sx]];
            }
            *o = acc;
        }
        let a = self.clone();
        Tensor::from_op(out.into_dyn(), vec![self.clone()], Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut ga = ndarray::Array2::<f64>::zeros((h, w));
            for (gv, tap) in g2.iter().zip(taps.iter()) {
                for &(sy, sx, wgt) in tap {
                    ga[[sy, sx]] += wgt * gv;
                }
            }
            a.accumulate(ga.into_dyn());
        }))
    }
}

/// Element-wise mean of same-shape tensors.
pub fn average(tensors: &[Tensor]) -> Tensor {
    assert!(!tensors.is_empty(), "average: empty input");
    let mut acc = tensors[0].clone();
    for t in &tensors[1..] {
        acc = acc.add(t);
    }
    acc.scale(1.0 / tensors.len() as f64)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Source taps (row, col, weight) for each output pixel of a bilinear resize
/// with half-pixel centres. At most four taps per pixel; weights sum to 1.
fn bilinear_taps(h: usize, w: usize, oh: usize, ow: usize) -> Vec<Vec<(usize, usize, f64)>> {
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0c = (y0.max(0.0) as usize).min(h - 1);
        let y1c = ((y0 + 1.0).max(0.0) as usize).min(h - 1);
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0c = (x0.max(0.0) as usize).min(w - 1);
            let x1c = ((x0 + 1.0).max(0.0) as usize).min(w - 1);
            taps.push(vec![
                (y0c, x0c, (1.0 - fy) * (1.0 - fx)),
                (y0c, x1c, (1.0 - fy) * fx),
                (y1c, x0c, fy * (1.0 - fx)),
                (y1c, x1c, fy * fx),
            ]);
        }
    }
    taps
}

/// Central finite differences of a scalar function at `x`.
/// Test utility, also used by the gradient-verification suites.
pub fn numeric_gradient<F>(f: F, x: &ArrayD<f64>, step: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Relative error between analytic and numeric gradients:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Check d(scalar_fn(x))/dx against finite differences for an op chain.
    fn check_grad<F>(shape: &[usize], seed: u64, f: F)
    where
        F: Fn(&Tensor) -> Tensor,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_array(&mut rng, shape);
        let leaf = Tensor::leaf(x.clone());
        let loss = f(&leaf);
        loss.backward();
        let analytic = leaf.grad().expect("missing gradient");
        let numeric = numeric_gradient(|v| f(&Tensor::leaf(v.clone())).item(), &x, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-6, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn matmul_forward() {
        let a = Tensor::constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Tensor::constant(arr2(&[[5.0], [6.0]]).into_dyn());
        let c = a.matmul(&b);
        assert_eq!(c.data().as_slice().unwrap(), &[17.0, 39.0]);
    }

    #[test]
    fn add_mul_grads() {
        check_grad(&[3, 4], 1, |x| x.mul(x).add(&x.scale(2.0)).mean_all());
    }

    #[test]
    fn matmul_grads_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a0 = random_array(&mut rng, &[3, 4]);
        let b0 = random_array(&mut rng, &[4, 2]);
        let a = Tensor::leaf(a0.clone());
        let b = Tensor::leaf(b0.clone());
        let loss = a.matmul(&b).mul(&a.matmul(&b)).sum_all();
        loss.backward();
        let ga = a.grad().unwrap();
        let gb = b.grad().unwrap();
        let na = numeric_gradient(
            |v| {
                let t = Tensor::leaf(v.clone());
                let bb = Tensor::constant(b0.clone());
                t.matmul(&bb).mul(&t.matmul(&bb)).sum_all().item()
            },
            &a0,
            1e-5,
        );
        let nb = numeric_gradient(
            |v| {
                let aa = Tensor::constant(a0.clone());
                let t = Tensor::leaf(v.clone());
                aa.matmul(&t).mul(&aa.matmul(&t)).sum_all().item()
            },
            &b0,
            1e-5,
        );
        assert!(max_relative_error(&ga, &na, 1e-6) < 1e-6);
        assert!(max_relative_error(&gb, &nb, 1e-6) < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::constant(random_array(&mut rng, &[5, 7]));
        let s = x.softmax_rows();
        let sv = s.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        for row in sv.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_grads() {
        check_grad(&[4, 6], 4, |x| {
            let s = x.softmax_rows();
            s.mul(&s).mean_all()
        });
    }

    #[test]
    fn silu_and_reductions() {
        check_grad(&[2, 5], 5, |x| x.silu().sum_all());
        check_grad(&[3, 3], 6, |x| x.mean_axis0().mul(&x.mean_axis0()).sum_all());
    }

    #[test]
    fn slice_concat_index_grads() {
        check_grad(&[4, 6], 7, |x| {
            let a = x.slice_cols(0, 2);
            let b = x.slice_cols(2, 4);
            let cat = Tensor::concat_cols(&[b, a.clone(), a]);
            cat.index_column(3).reshape(&[2, 2]).mul(&cat.index_column(3).reshape(&[2, 2])).sum_all()
        });
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let table = Tensor::leaf(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn());
        let picked = Tensor::gather_rows(&table, &[1, 1, 0]);
        let loss = picked.sum_all();
        loss.backward();
        let g = table.grad().unwrap();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(g2, arr2(&[[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]));
    }

    #[test]
    fn spatial_ops_grads() {
        check_grad(&[16, 3], 8, |x| {
            let pooled = x.avg_pool2(4, 4);
            let up = pooled.upsample2(2, 2);
            up.mul(&up).mean_all()
        });
        check_grad(&[16, 2], 9, |x| {
            let cols = x.im2col3(4, 4);
            cols.mul(&cols).mean_all()
        });
    }

    #[test]
    fn bilinear_resize_grads_and_bounds() {
        check_grad(&[3, 3], 10, |x| {
            let up = x.bilinear_resize(7, 5);
            up.mul(&up).mean_all()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.random_range(0.0..1.0));
        let up = Tensor::constant(x).bilinear_resize(16, 16);
        for &v in up.data().iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn upsample_is_constant_preserving() {
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[4, 1]), 0.3));
        let up = x.upsample2(2, 2);
        for &v in up.data().iter() {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn add_row_broadcast() {
        let a = Tensor::leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let r = Tensor::leaf(arr2(&[[10.0, 20.0]]).into_dyn());
        let out = a.add_row(&r);
        let loss = out.sum_all();
        loss.backward();
        assert_eq!(out.data().as_slice().unwrap(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(r.grad().unwrap().as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn diamond_graph_accumulates_once_per_path() {
        // y = x*x + x*x: grad must be 4x, not 2x.
        let x = Tensor::leaf(arr1(&[3.0]).into_dyn());
        let sq = x.mul(&x);
        let y = sq.add(&sq).sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap()[[0]], 12.0);
    }
}
