//! Forward builders and the backward dispatch for every tape operation.

use super::conv::{col2im, conv2d_forward, conv_transpose2d_forward, im2col};
use super::{acc, Arr, Op, Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f32::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f32::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                value.shape(),
                shape
            )));
        }
        let data: Vec<f32> = value.iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), data).expect("checked length");
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Concatenates two `(N, A)` and `(N, B)` matrices into `(N, A + B)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape(format!(
                "concat_cols: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<f32>::zeros((n, ca + cb));
        out.slice_mut(ndarray::s![.., ..ca]).assign(&va);
        out.slice_mut(ndarray::s![.., ca..]).assign(&vb);
        Ok(self.push(out.into_dyn(), Op::ConcatCols(a, b)))
    }

    /// `(N, K) x (K, M) -> (N, M)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let out = va.dot(&vb);
        Ok(self.push(out.into_dyn(), Op::MatMul(a, b)))
    }

    /// `(N, F) + (F)` row-broadcast bias.
    pub fn add_bias_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Shape(format!(
                "add_bias_rows: incompatible shapes {sx:?} and {sb:?}"
            )));
        }
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let vb = self.nodes[b.0].value.view();
        let out = &vx + &vb.insert_axis(Axis(0));
        Ok(self.push(out.into_dyn(), Op::AddBiasRows(x, b)))
    }

    /// `(N, C, H, W) + (C)` channel-broadcast bias.
    pub fn add_bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b));
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Shape(format!(
                "add_bias_channels: incompatible shapes {sx:?} and {sb:?}"
            )));
        }
        let mut out = self.nodes[x.0].value.clone();
        {
            let bias = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut v4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for c in 0..sx[1] {
                v4.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bias[c]);
            }
        }
        Ok(self.push(out, Op::AddBiasChannels(x, b)))
    }

    /// 2D convolution: `x (N,Cin,H,W)`, `w (Cout,Cin,kh,kw)`.
    /// `frozen_w` skips the weight gradient (used by the fixed extractor).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, frozen_w: bool) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Shape(format!(
                "conv2d: incompatible shapes x={sx:?} w={sw:?}"
            )));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::Shape(format!(
                "conv2d: kernel {sw:?} larger than padded input {sx:?}"
            )));
        }
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let vw = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let out = conv2d_forward(&vx, &vw, stride, pad);
        Ok(self.push(out.into_dyn(), Op::Conv2d { x, w, stride, pad, frozen_w }))
    }

    /// Transposed 2D convolution: `x (N,Cin,H,W)`, `w (Cin,Cout,kh,kw)`,
    /// output `(N, Cout, (H-1)s - 2p + kh, (W-1)s - 2p + kw)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        frozen_w: bool,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::Shape(format!(
                "conv_transpose2d: incompatible shapes x={sx:?} w={sw:?}"
            )));
        }
        let oh = (sx[2] - 1) * stride + sw[2];
        let ow = (sx[3] - 1) * stride + sw[3];
        if oh < 2 * pad || ow < 2 * pad {
            return Err(Error::Shape("conv_transpose2d: padding exceeds output".into()));
        }
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let vw = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let out = conv_transpose2d_forward(&vx, &vw, stride, pad);
        Ok(self.push(out.into_dyn(), Op::ConvTranspose2d { x, w, stride, pad, frozen_w }))
    }

    /// 2x2 max pooling with stride 2. Requires even spatial dims.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2: need even (H, W), got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let xs = vx.as_slice().unwrap();
        let mut out = Array4::<f32>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let os = out.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let ibase = nc * h * w;
                let obase = nc * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i0 = ibase + (2 * oy) * w + 2 * ox;
                        let cand = [i0, i0 + 1, i0 + w, i0 + w + 1];
                        let mut best = cand[0];
                        for &ci in &cand[1..] {
                            if xs[ci] > xs[best] {
                                best = ci;
                            }
                        }
                        os[obase + oy * ow + ox] = xs[best];
                        argmax[obase + oy * ow + ox] = best as u32;
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::MaxPool2 { x, argmax }))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool: need 4-d, got {sx:?}")));
        }
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = vx.dim();
        let mut out = Array2::<f32>::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                let mut s = 0.0f64;
                for v in vx.index_axis(Axis(0), i).index_axis(Axis(0), j).iter() {
                    s += *v as f64;
                }
                out[[i, j]] = (s / (h * w) as f64) as f32;
            }
        }
        Ok(self.push(out.into_dyn(), Op::GlobalAvgPool(x)))
    }

    /// Bilinear resize (half-pixel centers) to `(oh, ow)`.
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("upsample_bilinear: need 4-d, got {sx:?}")));
        }
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = vx.dim();
        let xs = vx.as_slice().unwrap();
        let mut out = Array4::<f32>::zeros((n, c, oh, ow));
        {
            let os = out.as_slice_mut().unwrap();
            for oy in 0..oh {
                let (y0, y1, wy) = bilinear_axis(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1, wx) = bilinear_axis(ox, ow, w);
                    for nc in 0..n * c {
                        let ib = nc * h * w;
                        let v = (1.0 - wy) * (1.0 - wx) * xs[ib + y0 * w + x0]
                            + (1.0 - wy) * wx * xs[ib + y0 * w + x1]
                            + wy * (1.0 - wx) * xs[ib + y1 * w + x0]
                            + wy * wx * xs[ib + y1 * w + x1];
                        os[nc * oh * ow + oy * ow + ox] = v;
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::UpsampleBilinear(x)))
    }

    /// Batch normalization over `(N, H, W)` per channel, training statistics.
    /// Returns the output and the batch `(mean, var)` per channel so callers
    /// can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("batch_norm: need 4-d, got {sx:?}")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape("batch_norm: gamma/beta must be (C)".into()));
        }
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, _, h, w) = vx.dim();
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        for j in 0..c {
            let mut s = 0.0f64;
            for i in 0..n {
                for v in vx.index_axis(Axis(0), i).index_axis(Axis(0), j).iter() {
                    s += *v as f64;
                }
            }
            let mu = s / m;
            let mut sv = 0.0f64;
            for i in 0..n {
                for v in vx.index_axis(Axis(0), i).index_axis(Axis(0), j).iter() {
                    let d = *v as f64 - mu;
                    sv += d * d;
                }
            }
            mean[j] = mu as f32;
            var[j] = (sv / m) as f32;
            inv_std[j] = 1.0 / (var[j] + eps).sqrt();
        }
        let g = self.nodes[gamma.0].value.clone();
        let b = self.nodes[beta.0].value.clone();
        let mut xhat = vx.to_owned();
        let mut out = Array4::<f32>::zeros(vx.dim());
        for j in 0..c {
            let (mu, is) = (mean[j], inv_std[j]);
            let (gj, bj) = (g[[j]], b[[j]]);
            for i in 0..n {
                let mut xh = xhat.index_axis_mut(Axis(0), i);
                let mut xh = xh.index_axis_mut(Axis(0), j);
                let mut o = out.index_axis_mut(Axis(0), i);
                let mut o = o.index_axis_mut(Axis(0), j);
                ndarray::Zip::from(&mut xh).and(&mut o).for_each(|xv, ov| {
                    *xv = (*xv - mu) * is;
                    *ov = gj * *xv + bj;
                });
            }
        }
        let out = self.push(
            out.into_dyn(),
            Op::BatchNorm { x, gamma, beta, xhat: xhat.into_dyn(), inv_std },
        );
        Ok((out, mean, var))
    }

    /// Per-channel affine `y = x * scale[c] + shift[c]` (inference-mode BN).
    pub fn channel_affine(&mut self, x: Var, scale: Vec<f32>, shift: Vec<f32>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || scale.len() != sx[1] || shift.len() != sx[1] {
            return Err(Error::Shape("channel_affine: shape mismatch".into()));
        }
        let mut out = self.nodes[x.0].value.clone();
        {
            let mut v4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for c in 0..sx[1] {
                let (s, t) = (scale[c], shift[c]);
                v4.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * s + t);
            }
        }
        Ok(self.push(out, Op::ChannelAffine { x, scale }))
    }

    /// Row-wise L2 normalization of `(N, F)`. Rows must have positive norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Shape(format!("normalize_rows: need 2-d, got {sx:?}")));
        }
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut norms = vec![0.0f32; sx[0]];
        let mut out = vx.to_owned();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = (row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()).sqrt();
            if n <= 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "normalize_rows: row {r} has zero norm"
                )));
            }
            norms[r] = n as f32;
            row.mapv_inplace(|v| (v as f64 / n) as f32);
        }
        Ok(self.push(out.into_dyn(), Op::NormalizeRows { x, norms }))
    }

    /// Selects rows of `(R, F)` by index, producing `(N, F)`.
    pub fn rows_by_index(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        if sm.len() != 2 {
            return Err(Error::Shape(format!("rows_by_index: need 2-d, got {sm:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= sm[0]) {
            return Err(Error::InvalidArgument(format!(
                "rows_by_index: index {bad} out of range (rows = {})",
                sm[0]
            )));
        }
        let vm = self.nodes[m.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<f32>::zeros((idx.len(), sm[1]));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&vm.row(i));
        }
        Ok(self.push(out.into_dyn(), Op::RowsByIndex { m, idx: idx.to_vec() }))
    }

    /// Row-wise dot product of two `(N, F)` matrices, producing `(N)`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "row_dot")?;
        if self.shape(a).len() != 2 {
            return Err(Error::Shape("row_dot: need 2-d inputs".into()));
        }
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let n = va.nrows();
        let mut out = Array1::<f32>::zeros(n);
        for r in 0..n {
            let mut s = 0.0f64;
            for (x, y) in va.row(r).iter().zip(vb.row(r).iter()) {
                s += *x as f64 * *y as f64;
            }
            out[r] = s as f32;
        }
        Ok(self.push(out.into_dyn(), Op::RowDot(a, b)))
    }

    /// Mean over all elements, producing a rank-0 scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let mean = (v.iter().map(|a| *a as f64).sum::<f64>() / v.len() as f64) as f32;
        self.push(ArrayD::from_elem(IxDyn(&[]), mean), Op::MeanAll(x))
    }

    /// Mean categorical cross-entropy over a batch of logits `(N, C)` with
    /// internal log-softmax normalization.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {sl:?} vs {} targets",
                targets.len()
            )));
        }
        let classes = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {bad} out of range [0, {classes})"
            )));
        }
        let vl = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut softmax = Array2::<f32>::zeros(vl.dim());
        let mut loss = 0.0f64;
        for (r, row) in vl.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut z = 0.0f64;
            for v in row.iter() {
                z += ((*v as f64) - m).exp();
            }
            let log_z = z.ln();
            for (c, v) in row.iter().enumerate() {
                softmax[[r, c]] = ((((*v as f64) - m) - log_z).exp()) as f32;
            }
            loss += log_z - ((vl[[r, targets[r]]] as f64) - m);
        }
        let mean = (loss / targets.len() as f64) as f32;
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), mean),
            Op::CrossEntropy { logits, targets: targets.to_vec(), softmax: softmax.into_dyn() },
        ))
    }

    pub(crate) fn backprop_node(&self, id: usize, go: &Arr, g: &mut [Option<Arr>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(&mut g[a.0], go.clone());
                acc(&mut g[b.0], go.clone());
            }
            Op::Sub(a, b) => {
                acc(&mut g[a.0], go.clone());
                acc(&mut g[b.0], go.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(&mut g[a.0], go * &self.nodes[b.0].value);
                acc(&mut g[b.0], go * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => acc(&mut g[a.0], go.mapv(|v| v * c)),
            Op::AddConst(a) => acc(&mut g[a.0], go.clone()),
            Op::Abs(a) => {
                let sign = self.nodes[a.0].value.mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(&mut g[a.0], go * &sign);
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                acc(&mut g[a.0], go * &mask);
            }
            Op::LeakyRelu(a, s) => {
                let slope = *s;
                let mask = self.nodes[a.0].value.mapv(|v| if v >= 0.0 { 1.0 } else { slope });
                acc(&mut g[a.0], go * &mask);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let d = y.mapv(|t| 1.0 - t * t);
                acc(&mut g[a.0], go * &d);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let data: Vec<f32> = go.iter().copied().collect();
                acc(&mut g[a.0], ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let go2 = go.view().into_dimensionality::<Ix2>().unwrap();
                acc(&mut g[a.0], go2.slice(ndarray::s![.., ..ca]).to_owned().into_dyn());
                acc(&mut g[b.0], go2.slice(ndarray::s![.., ca..]).to_owned().into_dyn());
            }
            Op::MatMul(a, b) => {
                let go2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                acc(&mut g[a.0], go2.dot(&vb.t()).into_dyn());
                acc(&mut g[b.0], va.t().dot(&go2).into_dyn());
            }
            Op::AddBiasRows(x, b) => {
                acc(&mut g[x.0], go.clone());
                let go2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let mut db = Array1::<f32>::zeros(go2.ncols());
                for col in 0..go2.ncols() {
                    db[col] = go2.column(col).iter().map(|v| *v as f64).sum::<f64>() as f32;
                }
                acc(&mut g[b.0], db.into_dyn());
            }
            Op::AddBiasChannels(x, b) => {
                acc(&mut g[x.0], go.clone());
                let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
                let c = go4.dim().1;
                let mut db = Array1::<f32>::zeros(c);
                for j in 0..c {
                    db[j] = go4
                        .index_axis(Axis(1), j)
                        .iter()
                        .map(|v| *v as f64)
                        .sum::<f64>() as f32;
                }
                acc(&mut g[b.0], db.into_dyn());
            }
            Op::Conv2d { x, w, stride, pad, frozen_w } => {
                let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
                let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let vw = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let (nb, cin, h, wdt) = vx.dim();
                let (cout, _, kh, kw) = vw.dim();
                let (oh, ow) = (go4.dim().2, go4.dim().3);
                let w2 = vw.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
                let mut dx = Array4::<f32>::zeros((nb, cin, h, wdt));
                let mut dw = Array2::<f32>::zeros((cout, cin * kh * kw));
                for i in 0..nb {
                    let go_n = go4
                        .index_axis(Axis(0), i)
                        .to_shape((cout, oh * ow))
                        .unwrap()
                        .to_owned();
                    // dX via col2im of W^T . dY
                    let dcols = w2.t().dot(&go_n);
                    col2im(
                        &dcols.view(),
                        &mut dx.index_axis_mut(Axis(0), i),
                        kh,
                        kw,
                        *stride,
                        *pad,
                        oh,
                        ow,
                    );
                    if !*frozen_w {
                        let cols = im2col(&vx.index_axis(Axis(0), i), kh, kw, *stride, *pad, oh, ow);
                        dw = dw + go_n.dot(&cols.t());
                    }
                }
                acc(&mut g[x.0], dx.into_dyn());
                if !*frozen_w {
                    acc(
                        &mut g[w.0],
                        dw.to_shape((cout, cin, kh, kw)).unwrap().to_owned().into_dyn(),
                    );
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad, frozen_w } => {
                let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
                let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let vw = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let (nb, cin, h, wdt) = vx.dim();
                let (_, cout, kh, kw) = vw.dim();
                let w2 = vw.to_shape((cin, cout * kh * kw)).unwrap().to_owned();
                let mut dx = Array4::<f32>::zeros((nb, cin, h, wdt));
                let mut dw = Array2::<f32>::zeros((cin, cout * kh * kw));
                for i in 0..nb {
                    // Grid positions enumerate the input; the image is the output.
                    let dcols = im2col(&go4.index_axis(Axis(0), i), kh, kw, *stride, *pad, h, wdt);
                    let dx_n = w2.dot(&dcols);
                    dx.index_axis_mut(Axis(0), i)
                        .assign(&dx_n.to_shape((cin, h, wdt)).unwrap());
                    if !*frozen_w {
                        let x_n = vx
                            .index_axis(Axis(0), i)
                            .to_shape((cin, h * wdt))
                            .unwrap()
                            .to_owned();
                        dw = dw + x_n.dot(&dcols.t());
                    }
                }
                acc(&mut g[x.0], dx.into_dyn());
                if !*frozen_w {
                    acc(
                        &mut g[w.0],
                        dw.to_shape((cin, cout, kh, kw)).unwrap().to_owned().into_dyn(),
                    );
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&shape));
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for (o, &src) in argmax.iter().enumerate() {
                        ds[src as usize] += go.as_slice().unwrap()[o];
                    }
                }
                acc(&mut g[x.0], dx);
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let go2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                let inv = 1.0 / (h * w) as f32;
                for i in 0..n {
                    for j in 0..c {
                        let v = go2[[i, j]] * inv;
                        dx.index_axis_mut(Axis(0), i)
                            .index_axis_mut(Axis(0), j)
                            .fill(v);
                    }
                }
                acc(&mut g[x.0], dx.into_dyn());
            }
            Op::UpsampleBilinear(x) => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
                let (oh, ow) = (go4.dim().2, go4.dim().3);
                let gs = go4.as_slice().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for oy in 0..oh {
                        let (y0, y1, wy) = bilinear_axis(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1, wx) = bilinear_axis(ox, ow, w);
                            for nc in 0..n * c {
                                let v = gs[nc * oh * ow + oy * ow + ox];
                                let ib = nc * h * w;
                                ds[ib + y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * v;
                                ds[ib + y0 * w + x1] += (1.0 - wy) * wx * v;
                                ds[ib + y1 * w + x0] += wy * (1.0 - wx) * v;
                                ds[ib + y1 * w + x1] += wy * wx * v;
                            }
                        }
                    }
                }
                acc(&mut g[x.0], dx.into_dyn());
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
                let xh = xhat.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = go4.dim();
                let m = (n * h * w) as f64;
                let gval = &self.nodes[gamma.0].value;
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                for j in 0..c {
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for i in 0..n {
                        let dy = go4.index_axis(Axis(0), i);
                        let dy = dy.index_axis(Axis(0), j);
                        let xhj = xh.index_axis(Axis(0), i);
                        let xhj = xhj.index_axis(Axis(0), j);
                        for (a, b) in dy.iter().zip(xhj.iter()) {
                            sum_dy += *a as f64;
                            sum_dy_xhat += (*a as f64) * (*b as f64);
                        }
                    }
                    dbeta[j] = sum_dy as f32;
                    dgamma[j] = sum_dy_xhat as f32;
                    let gj = gval[[j]] as f64;
                    let isj = inv_std[j] as f64;
                    for i in 0..n {
                        let dy = go4.index_axis(Axis(0), i);
                        let dy = dy.index_axis(Axis(0), j);
                        let xhj = xh.index_axis(Axis(0), i);
                        let xhj = xhj.index_axis(Axis(0), j);
                        let mut dxi = dx.index_axis_mut(Axis(0), i);
                        let mut dxi = dxi.index_axis_mut(Axis(0), j);
                        ndarray::Zip::from(&mut dxi).and(&dy).and(&xhj).for_each(
                            |d, &dyv, &xhv| {
                                let t = m * dyv as f64
                                    - sum_dy
                                    - (xhv as f64) * sum_dy_xhat;
                                *d = (gj * isj / m * t) as f32;
                            },
                        );
                    }
                }
                acc(&mut g[x.0], dx.into_dyn());
                acc(&mut g[gamma.0], dgamma.into_dyn());
                acc(&mut g[beta.0], dbeta.into_dyn());
            }
            Op::ChannelAffine { x, scale } => {
                let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = go4.to_owned();
                for (j, s) in scale.iter().enumerate() {
                    dx.index_axis_mut(Axis(1), j).mapv_inplace(|v| v * s);
                }
                acc(&mut g[x.0], dx.into_dyn());
            }
            Op::NormalizeRows { x, norms } => {
                let go2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let y = self.nodes[id].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f32>::zeros(go2.dim());
                for r in 0..go2.nrows() {
                    let dot: f64 = go2
                        .row(r)
                        .iter()
                        .zip(y.row(r).iter())
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum();
                    let n = norms[r] as f64;
                    for (k, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = (((go2[[r, k]] as f64) - (y[[r, k]] as f64) * dot) / n) as f32;
                    }
                }
                acc(&mut g[x.0], dx.into_dyn());
            }
            Op::RowsByIndex { m, idx } => {
                let sm = self.nodes[m.0].value.shape().to_vec();
                let go2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let mut dm = Array2::<f32>::zeros((sm[0], sm[1]));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = dm.row_mut(i);
                    row += &go2.row(r);
                }
                acc(&mut g[m.0], dm.into_dyn());
            }
            Op::RowDot(a, b) => {
                let go1 = go.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = Array2::<f32>::zeros(va.dim());
                let mut db = Array2::<f32>::zeros(vb.dim());
                for r in 0..va.nrows() {
                    let gr = go1[r];
                    for k in 0..va.ncols() {
                        da[[r, k]] = gr * vb[[r, k]];
                        db[[r, k]] = gr * va[[r, k]];
                    }
                }
                acc(&mut g[a.0], da.into_dyn());
                acc(&mut g[b.0], db.into_dyn());
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len();
                let seed = go.first().copied().unwrap_or(0.0) / n as f32;
                let shape = self.nodes[x.0].value.shape().to_vec();
                acc(&mut g[x.0], ArrayD::from_elem(IxDyn(&shape), seed));
            }
            Op::CrossEntropy { logits, targets, softmax } => {
                let seed = go.first().copied().unwrap_or(0.0);
                let sm = softmax.view().into_dimensionality::<Ix2>().unwrap();
                let n = targets.len();
                let mut dl = sm.to_owned();
                for (r, &t) in targets.iter().enumerate() {
                    dl[[r, t]] -= 1.0;
                }
                dl.mapv_inplace(|v| v * seed / n as f32);
                acc(&mut g[logits.0], dl.into_dyn());
            }
        }
    }
}

/// Half-pixel-center source coordinates for bilinear resize.
fn bilinear_axis(dst: usize, out_len: usize, in_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f32 / out_len as f32;
    let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f32)
}
