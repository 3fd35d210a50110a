//! Dense 5-axis tensors and a reverse-mode tape with the volumetric ops the
//! U-Net needs.

/// Shape `[n, c, nx, ny, nz]`; x varies fastest.
pub type Shape = [usize; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape");
        Self { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn volume(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: Var, w: usize, b: usize },
    Relu(Var),
    Sigmoid(Var),
    MaxPool { x: Var, arg: Vec<u32> },
    Upsample(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    /// `map` has one channel, broadcast over the channels of `feat`.
    MulChannels { map: Var, feat: Var },
    /// Channel mean and channel max, stacked as two channels.
    ChannelStats { x: Var, arg: Vec<u32> },
    GlobalMax { x: Var, arg: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward pass over a fixed parameter list.
pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    pub params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }
}

fn offsets(k: usize) -> impl Iterator<Item = (isize, isize, isize)> {
    let p = (k / 2) as isize;
    (0..k as isize).flat_map(move |dz| (0..k as isize).flat_map(move |dy| (0..k as isize).map(move |dx| (dx - p, dy - p, dz - p))))
}

/// Zero-padded patch matrix: row `ci * k^3 + t`, column = voxel.
fn im2col(x: &[f64], cin: usize, d: [usize; 3], k: usize) -> Vec<f64> {
    let vol = d[0] * d[1] * d[2];
    let kk = k * k * k;
    let mut col = vec![0.0; cin * kk * vol];
    for ci in 0..cin {
        let src = &x[ci * vol..(ci + 1) * vol];
        for (t, (ox, oy, oz)) in offsets(k).enumerate() {
            let row = &mut col[(ci * kk + t) * vol..(ci * kk + t + 1) * vol];
            shift_copy(src, row, d, ox, oy, oz);
        }
    }
    col
}

/// `dst[v] = src[v + offset]` wherever the neighbour is inside the grid.
fn shift_copy(src: &[f64], dst: &mut [f64], d: [usize; 3], ox: isize, oy: isize, oz: isize) {
    let [nx, ny, nz] = d;
    let range = |o: isize, n: usize| ((-o).max(0) as usize, (n as isize - o.max(0)).max(0) as usize);
    let (i0, i1) = range(ox, nx);
    let (j0, j1) = range(oy, ny);
    let (k0, k1) = range(oz, nz);
    if i0 >= i1 {
        return;
    }
    for k in k0..k1 {
        let ks = (k as isize + oz) as usize;
        for j in j0..j1 {
            let js = (j as isize + oy) as usize;
            let base = nx * (j + ny * k);
            let sbase = nx * (js + ny * ks);
            let s0 = (sbase as isize + i0 as isize + ox) as usize;
            dst[base + i0..base + i1].copy_from_slice(&src[s0..s0 + (i1 - i0)]);
        }
    }
}

fn col2im(col: &[f64], cin: usize, d: [usize; 3], k: usize, dx: &mut [f64]) {
    let [nx, ny, nz] = d;
    let vol = nx * ny * nz;
    let kk = k * k * k;
    let range = |o: isize, n: usize| ((-o).max(0) as usize, (n as isize - o.max(0)).max(0) as usize);
    for ci in 0..cin {
        let acc = &mut dx[ci * vol..(ci + 1) * vol];
        for (t, (ox, oy, oz)) in offsets(k).enumerate() {
            let row = &col[(ci * kk + t) * vol..(ci * kk + t + 1) * vol];
            let (i0, i1) = range(ox, nx);
            let (j0, j1) = range(oy, ny);
            let (k0, k1) = range(oz, nz);
            if i0 >= i1 {
                continue;
            }
            for kz in k0..k1 {
                let ks = (kz as isize + oz) as usize;
                for j in j0..j1 {
                    let js = (j as isize + oy) as usize;
                    let base = nx * (j + ny * kz);
                    let s0 = (nx * (js + ny * ks)) as isize + i0 as isize + ox;
                    let s0 = s0 as usize;
                    for (a, b) in acc[s0..s0 + (i1 - i0)].iter_mut().zip(&row[base + i0..base + i1]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// `c = a (m x k) * b (k x n) + beta * c`, all row-major.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized for the given strides and dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.data.iter().all(|v| v.is_finite()), "non-finite activation");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Same-padded convolution with weight `[cout, cin, k, k, k]` and bias
    /// `[1, cout, 1, 1, 1]` taken from the parameter list.
    pub fn conv(&mut self, x: Var, w: usize, b: usize) -> Var {
        let (wt, bt) = (&self.params[w], &self.params[b]);
        let xs = self.value(x).shape;
        let (cout, cin, k) = (wt.shape[0], wt.shape[1], wt.shape[2]);
        assert_eq!(cin, xs[1], "conv input channels");
        assert_eq!(bt.shape[1], cout, "conv bias size");
        let d = [xs[2], xs[3], xs[4]];
        let vol = d[0] * d[1] * d[2];
        let kk = k * k * k;
        let mut out = Tensor::zeros([xs[0], cout, d[0], d[1], d[2]]);
        for s in 0..xs[0] {
            let xin = &self.value(x).data[s * cin * vol..(s + 1) * cin * vol];
            let dst = &mut out.data[s * cout * vol..(s + 1) * cout * vol];
            for (co, row) in dst.chunks_mut(vol).enumerate() {
                row.fill(bt.data[co]);
            }
            if k == 1 {
                gemm(cout, cin, vol, &wt.data, false, xin, false, 1.0, dst);
            } else {
                let col = im2col(xin, cin, d, k);
                gemm(cout, cin * kk, vol, &wt.data, false, &col, false, 1.0, dst);
            }
        }
        self.push(out, Op::Conv { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape, t.data.iter().map(|v| v.max(0.0)).collect());
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape, t.data.iter().map(|v| sigmoid(*v)).collect());
        self.push(out, Op::Sigmoid(x))
    }

    /// 2x2x2 max pooling with stride 2; the first maximum in window order wins.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, nx, ny, nz] = t.shape;
        assert!(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0, "max_pool2 needs even dims");
        let (mx, my, mz) = (nx / 2, ny / 2, nz / 2);
        let mut out = Tensor::zeros([n, c, mx, my, mz]);
        let mut arg = vec![0u32; out.len()];
        let (vol, ovol) = (nx * ny * nz, mx * my * mz);
        for sc in 0..n * c {
            let src = &t.data[sc * vol..(sc + 1) * vol];
            for k in 0..mz {
                for j in 0..my {
                    for i in 0..mx {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = (2 * i + dx) + nx * ((2 * j + dy) + ny * (2 * k + dz));
                                    if src[idx] > best {
                                        best = src[idx];
                                        bi = idx;
                                    }
                                }
                            }
                        }
                        let o = sc * ovol + i + mx * (j + my * k);
                        out.data[o] = best;
                        arg[o] = bi as u32;
                    }
                }
            }
        }
        self.push(out, Op::MaxPool { x, arg })
    }

    /// Nearest-neighbour upsampling by 2 along every axis.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, nx, ny, nz] = t.shape;
        let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
        let mut out = Tensor::zeros([n, c, ux, uy, uz]);
        let (vol, uvol) = (nx * ny * nz, ux * uy * uz);
        for sc in 0..n * c {
            for k in 0..uz {
                for j in 0..uy {
                    for i in 0..ux {
                        out.data[sc * uvol + i + ux * (j + uy * k)] = t.data[sc * vol + i / 2 + nx * (j / 2 + ny * (k / 2))];
                    }
                }
            }
        }
        self.push(out, Op::Upsample(x))
    }

    /// Stacks channels of `a` then `b`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.shape[0], ta.spatial()), (tb.shape[0], tb.spatial()), "concat shapes");
        let n = ta.shape[0];
        let (ca, cb) = (ta.shape[1], tb.shape[1]);
        let vol = ta.volume();
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for s in 0..n {
            data.extend_from_slice(&ta.data[s * ca * vol..(s + 1) * ca * vol]);
            data.extend_from_slice(&tb.data[s * cb * vol..(s + 1) * cb * vol]);
        }
        let mut shape = ta.shape;
        shape[1] = ca + cb;
        self.push(Tensor::from_vec(shape, data), Op::Concat(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shapes");
        let out = Tensor::from_vec(ta.shape, ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect());
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape, t.data.iter().map(|v| c * v).collect());
        self.push(out, Op::Scale(x, c))
    }

    /// `map[n, 0, v] * feat[n, c, v]`.
    pub fn mul_channels(&mut self, map: Var, feat: Var) -> Var {
        let (tm, tf) = (self.value(map), self.value(feat));
        assert_eq!(tm.shape[1], 1, "attention map has one channel");
        assert_eq!((tm.shape[0], tm.spatial()), (tf.shape[0], tf.spatial()), "attention map shape");
        let (n, c, vol) = (tf.shape[0], tf.shape[1], tf.volume());
        let mut out = tf.clone();
        for s in 0..n {
            let m = &tm.data[s * vol..(s + 1) * vol];
            for ch in 0..c {
                let o = &mut out.data[(s * c + ch) * vol..(s * c + ch + 1) * vol];
                o.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
        }
        self.push(out, Op::MulChannels { map, feat })
    }

    /// Two channels: mean and max over the input channels at each voxel.
    pub fn channel_stats(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, nx, ny, nz] = t.shape;
        let vol = t.volume();
        let mut out = Tensor::zeros([n, 2, nx, ny, nz]);
        let mut arg = vec![0u32; n * vol];
        for s in 0..n {
            for v in 0..vol {
                let mut sum = 0.0;
                let mut best = f64::NEG_INFINITY;
                for ch in 0..c {
                    let x = t.data[(s * c + ch) * vol + v];
                    sum += x;
                    if x > best {
                        best = x;
                        arg[s * vol + v] = ch as u32;
                    }
                }
                out.data[2 * s * vol + v] = sum / c as f64;
                out.data[(2 * s + 1) * vol + v] = best;
            }
        }
        self.push(out, Op::ChannelStats { x, arg })
    }

    /// Per-sample maximum of a one-channel volume over the voxels allowed by
    /// `mask`; the lowest index wins ties. Output shape `[n, 1, 1, 1, 1]`.
    pub fn global_max(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape[1], 1, "global max over one channel");
        let vol = t.volume();
        let n = t.shape[0];
        let mut out = Tensor::zeros([n, 1, 1, 1, 1]);
        let mut arg = vec![0usize; n];
        for s in 0..n {
            let vals = &t.data[s * vol..(s + 1) * vol];
            let idx = crate::grid::argmax_masked(vals, mask).unwrap_or(0);
            arg[s] = idx;
            out.data[s] = vals[idx];
        }
        self.push(out, Op::GlobalMax { x, arg })
    }

    /// Reverse pass from `out` seeded with `seed` (same shape as `out`).
    pub fn backward(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape, self.value(out).shape, "seed shape");
        let mut g: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut pg: Vec<Option<Tensor>> = vec![None; self.params.len()];
        g[out.0] = Some(seed);
        let accum = |slot: &mut Option<Tensor>, t: Tensor| match slot {
            Some(acc) => acc.add_assign(&t),
            None => *slot = Some(t),
        };
        for id in (0..=out.0).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    g[id] = Some(dy);
                    continue;
                }
                Op::Conv { x, w, b } => {
                    let (wt, xt) = (&self.params[*w], self.value(*x));
                    let (cout, cin, k) = (wt.shape[0], wt.shape[1], wt.shape[2]);
                    let d = xt.spatial();
                    let vol = xt.volume();
                    let kk = k * k * k;
                    let mut dw = Tensor::zeros(wt.shape);
                    let mut db = Tensor::zeros(self.params[*b].shape);
                    let mut dx = Tensor::zeros(xt.shape);
                    for s in 0..xt.shape[0] {
                        let dys = &dy.data[s * cout * vol..(s + 1) * cout * vol];
                        for (co, row) in dys.chunks(vol).enumerate() {
                            db.data[co] += row.iter().sum::<f64>();
                        }
                        let xin = &xt.data[s * cin * vol..(s + 1) * cin * vol];
                        let dxs = &mut dx.data[s * cin * vol..(s + 1) * cin * vol];
                        if k == 1 {
                            gemm(cout, vol, cin, dys, false, xin, true, 1.0, &mut dw.data);
                            gemm(cin, cout, vol, &wt.data, true, dys, false, 1.0, dxs);
                        } else {
                            let col = im2col(xin, cin, d, k);
                            gemm(cout, vol, cin * kk, dys, false, &col, true, 1.0, &mut dw.data);
                            let mut dcol = vec![0.0; cin * kk * vol];
                            gemm(cin * kk, cout, vol, &wt.data, true, dys, false, 0.0, &mut dcol);
                            col2im(&dcol, cin, d, k, dxs);
                        }
                    }
                    accum(&mut pg[*w], dw);
                    accum(&mut pg[*b], db);
                    accum(&mut g[x.0], dx);
                }
                Op::Relu(x) => {
                    let xt = self.value(*x);
                    let d = dy.data.iter().zip(&xt.data).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    accum(&mut g[x.0], Tensor::from_vec(xt.shape, d));
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let d = dy.data.iter().zip(&y.data).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accum(&mut g[x.0], Tensor::from_vec(y.shape, d));
                }
                Op::MaxPool { x, arg } => {
                    let xt = self.value(*x);
                    let mut dx = Tensor::zeros(xt.shape);
                    let (vol, ovol) = (xt.volume(), node.value.volume());
                    for (o, a) in arg.iter().enumerate() {
                        dx.data[(o / ovol) * vol + *a as usize] += dy.data[o];
                    }
                    accum(&mut g[x.0], dx);
                }
                Op::Upsample(x) => {
                    let xt = self.value(*x);
                    let [n, c, nx, ny, nz] = xt.shape;
                    let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
                    let (vol, uvol) = (nx * ny * nz, ux * uy * uz);
                    let mut dx = Tensor::zeros(xt.shape);
                    for sc in 0..n * c {
                        for k in 0..uz {
                            for j in 0..uy {
                                for i in 0..ux {
                                    dx.data[sc * vol + i / 2 + nx * (j / 2 + ny * (k / 2))] +=
                                        dy.data[sc * uvol + i + ux * (j + uy * k)];
                                }
                            }
                        }
                    }
                    accum(&mut g[x.0], dx);
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (self.value(*a).shape, self.value(*b).shape);
                    let vol = node.value.volume();
                    let (ca, cb) = (sa[1], sb[1]);
                    let mut da = Vec::with_capacity(sa.iter().product());
                    let mut dbv = Vec::with_capacity(sb.iter().product());
                    for s in 0..sa[0] {
                        let base = s * (ca + cb) * vol;
                        da.extend_from_slice(&dy.data[base..base + ca * vol]);
                        dbv.extend_from_slice(&dy.data[base + ca * vol..base + (ca + cb) * vol]);
                    }
                    accum(&mut g[a.0], Tensor::from_vec(sa, da));
                    accum(&mut g[b.0], Tensor::from_vec(sb, dbv));
                }
                Op::Add(a, b) => {
                    accum(&mut g[a.0], dy.clone());
                    accum(&mut g[b.0], dy);
                }
                Op::Scale(x, c) => {
                    let d = dy.data.iter().map(|v| c * v).collect();
                    accum(&mut g[x.0], Tensor::from_vec(dy.shape, d));
                }
                Op::MulChannels { map, feat } => {
                    let (tm, tf) = (self.value(*map), self.value(*feat));
                    let (n, c, vol) = (tf.shape[0], tf.shape[1], tf.volume());
                    let mut dm = Tensor::zeros(tm.shape);
                    let mut df = Tensor::zeros(tf.shape);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * vol;
                            for v in 0..vol {
                                let gy = dy.data[base + v];
                                dm.data[s * vol + v] += gy * tf.data[base + v];
                                df.data[base + v] = gy * tm.data[s * vol + v];
                            }
                        }
                    }
                    accum(&mut g[map.0], dm);
                    accum(&mut g[feat.0], df);
                }
                Op::ChannelStats { x, arg } => {
                    let xt = self.value(*x);
                    let (n, c, vol) = (xt.shape[0], xt.shape[1], xt.volume());
                    let mut dx = Tensor::zeros(xt.shape);
                    for s in 0..n {
                        for v in 0..vol {
                            let gm = dy.data[2 * s * vol + v] / c as f64;
                            for ch in 0..c {
                                dx.data[(s * c + ch) * vol + v] += gm;
                            }
                            dx.data[(s * c + arg[s * vol + v] as usize) * vol + v] += dy.data[(2 * s + 1) * vol + v];
                        }
                    }
                    accum(&mut g[x.0], dx);
                }
                Op::GlobalMax { x, arg } => {
                    let xt = self.value(*x);
                    let vol = xt.volume();
                    let mut dx = Tensor::zeros(xt.shape);
                    for (s, a) in arg.iter().enumerate() {
                        dx.data[s * vol + a] = dy.data[s];
                    }
                    accum(&mut g[x.0], dx);
                }
            }
        }
        Gradients { nodes: g, params: pg }
    }
}
