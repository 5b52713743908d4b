use super::conv::{col2im, im2col, max_pool, ConvGeom, PoolGeom};
use super::gemm::{gemm, MatRef};
use super::{conv_output_size, pool_output_size, shape_err, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    MaxPool {
        input: Var,
        arg: Vec<usize>,
    },
    AvgPoolSpatial {
        input: Var,
        plane: usize,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
        outer: usize,
    },
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cout: usize,
        cols: Vec<f64>,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
        cols: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
        cols: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records primitive operations in execution order so gradients can be
/// replayed in reverse.
///
/// Node indices increase monotonically and every op only references earlier
/// nodes, so reverse index order is a valid topological order.
///
/// Running [`Tape::backward`] twice without [`Tape::zero_grad`] in between is
/// an error rather than silent accumulation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| Tensor {
            shape: self.shape(v).to_vec(),
            data: g.to_vec(),
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a rank-2 operand, got {s:?}"))),
        }
    }

    fn rank4(&self, v: Var, op: &'static str) -> Result<[usize; 4], TensorError> {
        match self.shape(v) {
            [a, b, c, d] => Ok([*a, *b, *c, *d]),
            s => Err(shape_err(op, format!("expected a rank-4 operand, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operands differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m,k] x b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rows(self.value(a).data(), k),
            MatRef::rows(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Scalar-tensor product, the only implicit broadcast.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x[.., d] + bias[d]`, broadcasting the bias over all leading rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} does not match last dimension {d}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&b).map(|(x, y)| x + y))
            .collect();
        let v = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        Ok(self.push(v, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, stable_sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = *va.shape().last().unwrap();
        let mut data = Vec::with_capacity(va.numel());
        for row in va.data().chunks(d) {
            softmax_row(row, &mut data);
        }
        let v = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        self.push(v, Op::Softmax(a), &[a])
    }

    // ---- spatial --------------------------------------------------------

    /// 2-D convolution of `input[N,Cin,H,W]` with `kernel[Cout,Cin,kh,kw]`
    /// plus a per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let [n, cin, h, w] = self.rank4(input, "conv2d")?;
        let [cout, kcin, kh, kw] = self.rank4(kernel, "conv2d")?;
        if kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} does not match {cout} output channels", self.shape(bias)),
            ));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (Some(ho), Some(wo)) = (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(w, kw, stride, padding),
        ) else {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        };
        let geom = ConvGeom {
            batch: n,
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let kp = geom.patch_len();
        let width = geom.cols_width();
        let mut tmp = vec![0.0; cout * width];
        gemm(
            cout,
            kp,
            width,
            MatRef::rows(self.value(kernel).data(), kp),
            MatRef::rows(&cols, width),
            0.0,
            &mut tmp,
        );
        let plane = geom.out_plane();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * cout * plane];
        for co in 0..cout {
            let src = &tmp[co * width..(co + 1) * width];
            for s in 0..n {
                let dst = &mut out[(s * cout + co) * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(&src[s * plane..(s + 1) * plane]) {
                    *d = v + b[co];
                }
            }
        }
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cout,
                cols,
            },
            &[input, kernel, bias],
        ))
    }

    /// Max pooling over `input[N,C,H,W]`. With `ceil_mode` a trailing partial
    /// window is pooled over its valid part instead of dropped.
    pub fn max_pool2d(
        &mut self,
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
        ceil_mode: bool,
    ) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.rank4(input, "max_pool2d")?;
        if padding * 2 > kernel {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                detail: format!("padding {padding} exceeds half of kernel {kernel}"),
            });
        }
        let (Some(ho), Some(wo)) = (
            pool_output_size(h, kernel, stride, padding, ceil_mode),
            pool_output_size(w, kernel, stride, padding, ceil_mode),
        ) else {
            return Err(shape_err("max_pool2d", format!("window {kernel} does not fit {h}x{w}")));
        };
        let geom = PoolGeom {
            planes: n * c,
            h,
            w,
            kernel,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let (out, arg) = max_pool(self.value(input).data(), &geom);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { input, arg }, &[input]))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn avg_pool_spatial(&mut self, input: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.rank4(input, "avg_pool_spatial")?;
        let plane = h * w;
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::AvgPoolSpatial { input, plane }, &[input]))
    }

    /// Concatenates along axis 1. All other dimensions must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat_channels",
                detail: "no inputs".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(shape_err("concat_channels", format!("rank of {base:?} is below 2")));
        }
        let outer = base[0];
        let inner: usize = base[2..].iter().product();
        let mut channels = 0;
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(shape_err(
                    "concat_channels",
                    format!("{s:?} incompatible with {base:?}"),
                ));
            }
            channels += s[1];
            widths.push(s[1] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
                outer,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Gathers rows of a rank-2 tensor.
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (r, cols) = self.rank2(input, "select_rows")?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("select_rows", format!("row {bad} out of range {r}")));
        }
        if rows.is_empty() {
            return Err(shape_err("select_rows", "empty selection"));
        }
        let src = self.value(input);
        let data = rows.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
                cols,
            },
            &[input],
        ))
    }

    /// Column range `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, cols) = self.rank2(input, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(shape_err(
                "slice_cols",
                format!("range {start}..{} outside {cols} columns", start + len),
            ));
        }
        let src = self.value(input).data();
        let data = (0..r)
            .flat_map(|i| src[i * cols + start..i * cols + start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(
            value,
            Op::SliceCols {
                input,
                start,
                len,
                cols,
            },
            &[input],
        ))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean softmax cross-entropy of `logits[N,C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (n, c) = self.rank2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("class {bad} out of range {c}")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, &t) in z.chunks(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_row(row, &mut probs);
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared error between `pred` and a target vector of equal size.
    pub fn mse(&mut self, pred: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let p = self.value(pred).data();
        if p.len() != targets.len() {
            return Err(shape_err(
                "mse",
                format!("{} targets for {} predictions", targets.len(), p.len()),
            ));
        }
        let loss = p.iter().zip(targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                targets: targets.to_vec(),
            },
            &[pred],
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that requires
    /// grad and is reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if !self.nodes[i].requires_grad {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each input requiring grad.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::rows(g, n),
                        MatRef::transposed(self.value(b).data(), n),
                        0.0,
                        &mut da,
                    );
                    res.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(self.value(a).data(), k),
                        MatRef::rows(g, n),
                        0.0,
                        &mut db,
                    );
                    res.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        res.push((v, g.to_vec()));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    res.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    res.push((b, g.iter().map(|x| -x).collect()));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let vb = self.value(b).data();
                    res.push((a, g.iter().zip(vb).map(|(x, y)| x * y).collect()));
                }
                if self.needs(b) {
                    let va = self.value(a).data();
                    res.push((b, g.iter().zip(va).map(|(x, y)| x * y).collect()));
                }
            }
            &Op::Scale(a, s) => res.push((a, g.iter().map(|x| x * s).collect())),
            &Op::AddBias { x, bias } => {
                if self.needs(x) {
                    res.push((x, g.to_vec()));
                }
                if self.needs(bias) {
                    let d = self.value(bias).numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    res.push((bias, db));
                }
            }
            &Op::Relu(a) => {
                // relu'(0) is taken as 0.
                let x = self.value(a).data();
                res.push((
                    a,
                    g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                ));
            }
            &Op::Sigmoid(a) => {
                res.push((a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            &Op::Tanh(a) => {
                res.push((a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()));
            }
            &Op::Softmax(a) => {
                let d = *node.value.shape().last().unwrap();
                let mut da = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(out.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    da.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                }
                res.push((a, da));
            }
            Op::MaxPool { input, arg } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (gv, &idx) in g.iter().zip(arg) {
                    dx[idx] += gv;
                }
                res.push((*input, dx));
            }
            &Op::AvgPoolSpatial { input, plane } => {
                let scale = 1.0 / plane as f64;
                let dx = g.iter().flat_map(|v| std::iter::repeat_n(v * scale, plane)).collect();
                res.push((input, dx));
            }
            Op::Concat { inputs, widths, outer } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &wd) in inputs.iter().zip(widths) {
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * wd);
                        for o in 0..*outer {
                            dv.extend_from_slice(&g[o * total + offset..o * total + offset + wd]);
                        }
                        res.push((v, dv));
                    }
                    offset += wd;
                }
            }
            &Op::Reshape(a) => res.push((a, g.to_vec())),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cout,
                cols,
            } => {
                let (cout, plane, n) = (*cout, geom.out_plane(), geom.batch);
                let width = geom.cols_width();
                let kp = geom.patch_len();
                let mut gperm = vec![0.0; cout * width];
                for s in 0..n {
                    for co in 0..cout {
                        gperm[co * width + s * plane..][..plane]
                            .copy_from_slice(&g[(s * cout + co) * plane..][..plane]);
                    }
                }
                if self.needs(*kernel) {
                    let mut dk = vec![0.0; cout * kp];
                    gemm(
                        cout,
                        width,
                        kp,
                        MatRef::rows(&gperm, width),
                        MatRef::transposed(cols, width),
                        0.0,
                        &mut dk,
                    );
                    res.push((*kernel, dk));
                }
                if self.needs(*bias) {
                    let db = gperm.chunks(width).map(|r| r.iter().sum()).collect();
                    res.push((*bias, db));
                }
                if self.needs(*input) {
                    let mut dcols = vec![0.0; kp * width];
                    gemm(
                        kp,
                        cout,
                        width,
                        MatRef::transposed(self.value(*kernel).data(), kp),
                        MatRef::rows(&gperm, width),
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; self.value(*input).numel()];
                    col2im(&dcols, geom, &mut dx);
                    res.push((*input, dx));
                }
            }
            Op::SelectRows { input, rows, cols } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g[k * cols..(k + 1) * cols])
                        .for_each(|(a, b)| *a += b);
                }
                res.push((*input, dx));
            }
            &Op::SliceCols {
                input,
                start,
                len,
                cols,
            } => {
                let mut dx = vec![0.0; self.value(input).numel()];
                for (r, gr) in g.chunks(len).enumerate() {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(gr);
                }
                res.push((input, dx));
            }
            &Op::Sum(a) => res.push((a, vec![g[0]; self.value(a).numel()])),
            &Op::Mean(a) => {
                let n = self.value(a).numel();
                res.push((a, vec![g[0] / n as f64; n]));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dz[r * c + t] -= scale;
                }
                res.push((*logits, dz));
            }
            Op::Mse { pred, targets } => {
                let p = self.value(*pred).data();
                let scale = 2.0 * g[0] / p.len() as f64;
                res.push((*pred, p.iter().zip(targets).map(|(a, b)| (a - b) * scale).collect()));
            }
        }
        res
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= total;
    }
}
