//! A small resolution-free spectral-convolution network for the control
//! `alpha(t, x; theta)`, with hand-written reverse mode.
//!
//! Activations are stored as `(batch * points) x channels` matrices, rows
//! ordered batch-major. The forward pass is
//!
//! ```text
//! v0 = [x, cos(2 pi B u), sin(2 pi B u)] W_in + b_in          (u = normalized coords)
//! e  = silu(sinusoid(1000 t / T) Wt1 + bt1) Wt2 + bt2         (per-block scale, shift)
//! for each block l:
//!     h  = v + SpecConv_l(v)
//!     h~ = h * (1 + scale_l) + shift_l
//!     v  = h + silu(h~ W1 + b1) W2 + b2
//! out = v W_out + b_out                                        (W_out, b_out start at 0)
//! ```
//!
//! `SpecConv` projects every channel onto the lowest cosine modes of the grid
//! (quadrature-weighted), mixes channels with one real `C x C` matrix per mode
//! and expands back onto the grid.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::GridTransform;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::io::{decode_f64s, encode_f64s};
use crate::rng::{stream, tag};
use crate::sde::{ControlFn, DiffControl};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetArch {
    pub dims: usize,
    pub n_layers: usize,
    pub width: usize,
    /// Hidden width of the pointwise MLP in each block.
    pub mlp_width: usize,
    /// Cosine modes per axis kept by the spectral convolutions.
    pub n_spectral_modes: usize,
    pub fourier_features_m: usize,
    pub fourier_scale: f64,
    pub time_embed_dim: usize,
    pub time_hidden: usize,
    /// Horizon used to rescale time before the sinusoidal embedding.
    pub horizon: f64,
}

impl NetArch {
    pub fn default_1d(horizon: f64) -> Self {
        NetArch {
            dims: 1,
            n_layers: 3,
            width: 32,
            mlp_width: 64,
            n_spectral_modes: 12,
            fourier_features_m: 8,
            fourier_scale: 2.0,
            time_embed_dim: 64,
            time_hidden: 64,
            horizon,
        }
    }

    pub fn default_2d(horizon: f64) -> Self {
        NetArch {
            dims: 2,
            n_layers: 4,
            width: 32,
            mlp_width: 32,
            n_spectral_modes: 8,
            fourier_features_m: 8,
            fourier_scale: 2.0,
            time_embed_dim: 64,
            time_hidden: 64,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.n_layers, self.width, self.mlp_width, self.n_spectral_modes, self.time_hidden];
        if !(1..=2).contains(&self.dims) || positive.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad network architecture {self:?}")));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument("time_embed_dim must be even and positive".into()));
        }
        if !(self.horizon > 0.0 && self.fourier_scale >= 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive and fourier_scale non-negative".into()));
        }
        Ok(())
    }

    fn spectral_modes(&self) -> usize {
        self.n_spectral_modes.pow(self.dims as u32)
    }

    fn in_features(&self) -> usize {
        1 + 2 * self.fourier_features_m
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
struct BlockSlots {
    spec: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Debug, Clone)]
struct Layout {
    w_in: Slot,
    b_in: Slot,
    wt1: Slot,
    bt1: Slot,
    wt2: Slot,
    bt2: Slot,
    blocks: Vec<BlockSlots>,
    w_out: Slot,
    b_out: Slot,
    total: usize,
}

impl Layout {
    fn new(arch: &NetArch) -> Self {
        let mut off = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { off, rows, cols };
            off += rows * cols;
            s
        };
        let (c, h) = (arch.width, arch.mlp_width);
        let w_in = slot(arch.in_features(), c);
        let b_in = slot(1, c);
        let wt1 = slot(arch.time_embed_dim, arch.time_hidden);
        let bt1 = slot(1, arch.time_hidden);
        let wt2 = slot(arch.time_hidden, 2 * arch.n_layers * c);
        let bt2 = slot(1, 2 * arch.n_layers * c);
        let blocks = (0..arch.n_layers)
            .map(|_| BlockSlots {
                spec: slot(arch.spectral_modes() * c, c),
                w1: slot(c, h),
                b1: slot(1, h),
                w2: slot(h, c),
                b2: slot(1, c),
            })
            .collect();
        let w_out = slot(c, 1);
        let b_out = slot(1, 1);
        Layout { w_in, b_in, wt1, bt1, wt2, bt2, blocks, w_out, b_out, total: off }
    }
}

fn mat<'a>(theta: &'a [f64], s: Slot) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &theta[s.off..s.off + s.len()]).unwrap()
}

fn vec1<'a>(theta: &'a [f64], s: Slot) -> ArrayView1<'a, f64> {
    ArrayView1::from(&theta[s.off..s.off + s.len()])
}

fn mat_mut<'a>(g: &'a mut [f64], s: Slot) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut g[s.off..s.off + s.len()]).unwrap()
}

fn add_to(g: &mut [f64], s: Slot, v: ArrayView2<f64>) {
    mat_mut(g, s).zip_mut_with(&v, |a, b| *a += b);
}

fn add_rowsum(g: &mut [f64], s: Slot, v: ArrayView2<f64>) {
    let sum = v.sum_axis(Axis(0));
    for (a, b) in g[s.off..s.off + s.len()].iter_mut().zip(sum.iter()) {
        *a += b;
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

fn affine(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Sinusoidal embedding of `1000 t / horizon`.
fn time_embedding(t: f64, arch: &NetArch) -> Vec<f64> {
    let half = arch.time_embed_dim / 2;
    let tt = 1000.0 * t / arch.horizon;
    let mut e = vec![0.0; arch.time_embed_dim];
    for j in 0..half {
        let f = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        e[j] = (tt * f).sin();
        e[half + j] = (tt * f).cos();
    }
    e
}

/// Per-axis cosine factors of the grid the network is applied to.
struct ChannelTransform {
    f0: Array2<f64>,
    f1: Option<Array2<f64>>,
    weight: f64,
    modes: usize,
    /// Index into the per-mode weight table for each retained mode.
    weight_index: Vec<usize>,
}

impl ChannelTransform {
    fn new(grid: &GridSpec, arch: &NetArch) -> Result<Self> {
        let m = arch.n_spectral_modes;
        let per_axis: Vec<usize> = grid.res.iter().map(|&r| m.min(r)).collect();
        let (f0, f1, weight_index) = if grid.dims() == 1 {
            (GridTransform::cosine(grid, &per_axis)?.basis_matrix(), None, (0..per_axis[0]).collect())
        } else {
            let one0 = GridTransform::cosine(&GridSpec::line(grid.res[0], grid.bounds[0][0], grid.bounds[0][1])?, &[per_axis[0]])?;
            let one1 = GridTransform::cosine(&GridSpec::line(grid.res[1], grid.bounds[1][0], grid.bounds[1][1])?, &[per_axis[1]])?;
            let idx = (0..per_axis[0]).flat_map(|n0| (0..per_axis[1]).map(move |n1| n0 * m + n1)).collect();
            (one0.basis_matrix(), Some(one1.basis_matrix()), idx)
        };
        let modes = per_axis.iter().product();
        Ok(ChannelTransform { f0, f1, weight: grid.weight(), modes, weight_index })
    }

    /// `Phi v_b` for every batch element: (B*N) x C -> (B*K) x C, no weight.
    fn project(&self, v: ArrayView2<f64>, nb: usize) -> Array2<f64> {
        let c = v.ncols();
        let k = self.modes;
        let mut out = Array2::zeros((nb * k, c));
        match &self.f1 {
            None => {
                let n = self.f0.ncols();
                for b in 0..nb {
                    let vb = v.slice(s![b * n..(b + 1) * n, ..]);
                    out.slice_mut(s![b * k..(b + 1) * k, ..]).assign(&self.f0.dot(&vb));
                }
            }
            Some(f1) => {
                let (m0, r0) = self.f0.dim();
                let (m1, r1) = f1.dim();
                let n = r0 * r1;
                let mut tmp = Array2::zeros((r0, m1 * c));
                for b in 0..nb {
                    for i0 in 0..r0 {
                        let rows = v.slice(s![b * n + i0 * r1..b * n + (i0 + 1) * r1, ..]);
                        let t = f1.dot(&rows);
                        tmp.row_mut(i0).assign(&t.into_shape_with_order(m1 * c).unwrap());
                    }
                    let ob = self.f0.dot(&tmp);
                    out.slice_mut(s![b * k..(b + 1) * k, ..])
                        .assign(&ob.into_shape_with_order((m0 * m1, c)).unwrap());
                }
            }
        }
        out
    }

    /// `Phi^T s_b`: (B*K) x C -> (B*N) x C.
    fn expand(&self, sp: ArrayView2<f64>, nb: usize) -> Array2<f64> {
        let c = sp.ncols();
        let k = self.modes;
        match &self.f1 {
            None => {
                let n = self.f0.ncols();
                let mut out = Array2::zeros((nb * n, c));
                for b in 0..nb {
                    let sb = sp.slice(s![b * k..(b + 1) * k, ..]);
                    out.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&self.f0.t().dot(&sb));
                }
                out
            }
            Some(f1) => {
                let (m0, r0) = self.f0.dim();
                let (m1, r1) = f1.dim();
                let n = r0 * r1;
                let mut out = Array2::zeros((nb * n, c));
                for b in 0..nb {
                    let sb = sp.slice(s![b * k..(b + 1) * k, ..]).to_owned();
                    let sb = sb.into_shape_with_order((m0, m1 * c)).unwrap();
                    let t = self.f0.t().dot(&sb);
                    for i0 in 0..r0 {
                        let ti = t.row(i0);
                        let ti = ti.into_shape_with_order((m1, c)).unwrap();
                        out.slice_mut(s![b * n + i0 * r1..b * n + (i0 + 1) * r1, ..]).assign(&f1.t().dot(&ti));
                    }
                }
                out
            }
        }
    }
}

struct BlockCache {
    vhat: Array2<f64>,
    h: Array2<f64>,
    ht: Array2<f64>,
    z: Array2<f64>,
    a: Array2<f64>,
}

struct Cache {
    nb: usize,
    n: usize,
    x: Array2<f64>,
    gamma: Array2<f64>,
    temb: Array2<f64>,
    zt: Array2<f64>,
    ht: Array2<f64>,
    modulation: Array2<f64>,
    blocks: Vec<BlockCache>,
    v_last: Array2<f64>,
    ct: ChannelTransform,
}

/// Parameters and fixed features of the control network.
#[derive(Debug, Clone)]
pub struct ControlNet {
    pub arch: NetArch,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub train_step: u64,
    fourier_b: Array2<f64>,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    arch: NetArch,
    theta: String,
    seed: u64,
    train_step: u64,
}

fn fourier_matrix(arch: &NetArch, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, &[tag::INIT, 1]);
    let normal = Normal::new(0.0, arch.fourier_scale).unwrap();
    Array2::from_shape_fn((arch.fourier_features_m, arch.dims), |_| rng.sample(normal))
}

impl ControlNet {
    /// Deterministic initialization; the output layer starts at zero so the
    /// initial control vanishes identically.
    pub fn init(arch: NetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut theta = vec![0.0; layout.total];
        let mut rng = stream(seed, &[tag::INIT, 0]);
        let mut fill = |theta: &mut Vec<f64>, s: Slot, bound: f64| {
            for v in &mut theta[s.off..s.off + s.len()] {
                *v = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
        };
        let c = arch.width as f64;
        fill(&mut theta, layout.w_in, 1.0 / (arch.in_features() as f64).sqrt());
        fill(&mut theta, layout.wt1, 1.0 / (arch.time_embed_dim as f64).sqrt());
        fill(&mut theta, layout.wt2, 1.0 / (arch.time_hidden as f64).sqrt());
        for b in &layout.blocks {
            fill(&mut theta, b.spec, 1.0 / c);
            fill(&mut theta, b.w1, 1.0 / c.sqrt());
            fill(&mut theta, b.w2, 1.0 / (arch.mlp_width as f64).sqrt());
        }
        let fourier_b = fourier_matrix(&arch, seed);
        Ok(ControlNet { arch, theta, seed, train_step: 0, fourier_b, layout })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Fill every parameter, output layer included, with small random values.
    /// Useful for derivative checks where a zero output layer hides gradients.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = stream(seed, &[tag::INIT, 2]);
        for v in &mut self.theta {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            theta: encode_f64s(&self.theta),
            seed: self.seed,
            train_step: self.train_step,
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version { expected: CHECKPOINT_VERSION, found: ck.version });
        }
        let mut net = ControlNet::init(ck.arch, ck.seed)?;
        let theta = decode_f64s(&ck.theta)?;
        if theta.len() != net.n_params() {
            return Err(Error::Serialization(format!(
                "checkpoint has {} parameters, architecture needs {}",
                theta.len(),
                net.n_params()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Serialization("non-finite parameter in checkpoint".into()));
        }
        net.theta = theta;
        net.train_step = ck.train_step;
        Ok(net)
    }

    /// Fourier features of the normalized grid coordinates, N x 2m.
    fn features(&self, grid: &GridSpec) -> Array2<f64> {
        let m = self.arch.fourier_features_m;
        let pts = grid.points();
        let mut out = Array2::zeros((pts.len(), 2 * m));
        for (i, p) in pts.iter().enumerate() {
            for j in 0..m {
                let mut arg = 0.0;
                for d in 0..grid.dims() {
                    let u = (p[d] - grid.bounds[d][0]) / grid.width(d);
                    arg += self.fourier_b[[j, d]] * u;
                }
                let arg = 2.0 * std::f64::consts::PI * arg;
                out[[i, j]] = arg.cos();
                out[[i, m + j]] = arg.sin();
            }
        }
        out
    }

    fn check_input(&self, t: &[f64], x: ArrayView2<f64>, grid: &GridSpec) -> Result<()> {
        if grid.dims() != self.arch.dims {
            return Err(Error::Unsupported(format!(
                "network built for {}-D inputs, got a {}-D grid",
                self.arch.dims,
                grid.dims()
            )));
        }
        if x.ncols() != grid.len() || t.len() != x.nrows() {
            return Err(Error::Shape(format!(
                "inputs {:?} with {} times on a grid of {} points",
                x.dim(),
                t.len(),
                grid.len()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, t: &[f64], x: ArrayView2<f64>, grid: &GridSpec) -> Result<(Array2<f64>, Cache)> {
        self.check_input(t, x, grid)?;
        let th = &self.theta[..];
        let ly = &self.layout;
        let (nb, n) = x.dim();
        let c = self.arch.width;
        let ct = ChannelTransform::new(grid, &self.arch)?;

        // Time modulation, one row per batch element.
        let mut temb = Array2::zeros((nb, self.arch.time_embed_dim));
        for (b, &tb) in t.iter().enumerate() {
            temb.row_mut(b).assign(&Array1::from(time_embedding(tb, &self.arch)));
        }
        let zt = affine(temb.view(), mat(th, ly.wt1), vec1(th, ly.bt1));
        let ht = zt.mapv(silu);
        let modulation = affine(ht.view(), mat(th, ly.wt2), vec1(th, ly.bt2));

        // Lift.
        let gamma = self.features(grid);
        let w_in = mat(th, ly.w_in);
        let mut shared = gamma.dot(&w_in.slice(s![1.., ..]));
        shared += &vec1(th, ly.b_in);
        let wx = w_in.row(0);
        let mut v = Array2::zeros((nb * n, c));
        for b in 0..nb {
            for p in 0..n {
                let xv = x[[b, p]];
                let mut row = v.row_mut(b * n + p);
                row.assign(&shared.row(p));
                row.scaled_add(xv, &wx);
            }
        }

        let mut blocks = Vec::with_capacity(ly.blocks.len());
        for (l, bs) in ly.blocks.iter().enumerate() {
            let mut vhat = ct.project(v.view(), nb);
            vhat *= ct.weight;
            let mixed = self.mix(&ct, vhat.view(), bs.spec, nb, false);
            let mut h = ct.expand(mixed.view(), nb);
            h += &v;
            let mut htl = h.clone();
            for b in 0..nb {
                let sc = modulation.slice(s![b, 2 * l * c..(2 * l + 1) * c]);
                let sh = modulation.slice(s![b, (2 * l + 1) * c..(2 * l + 2) * c]);
                for mut row in htl.slice_mut(s![b * n..(b + 1) * n, ..]).outer_iter_mut() {
                    for j in 0..c {
                        row[j] = row[j] * (1.0 + sc[j]) + sh[j];
                    }
                }
            }
            let z = affine(htl.view(), mat(th, bs.w1), vec1(th, bs.b1));
            let a = z.mapv(silu);
            let mut vn = affine(a.view(), mat(th, bs.w2), vec1(th, bs.b2));
            vn += &h;
            blocks.push(BlockCache { vhat, h, ht: htl, z, a });
            v = vn;
        }
        let out = affine(v.view(), mat(th, ly.w_out), vec1(th, ly.b_out));
        let out = out.into_shape_with_order((nb, n)).unwrap();
        let cache = Cache { nb, n, x: x.to_owned(), gamma, temb, zt, ht, modulation, blocks, v_last: v, ct };
        Ok((out, cache))
    }

    /// Per-mode channel mixing; `transpose` applies `R_k^T` (used by the backward pass).
    fn mix(&self, ct: &ChannelTransform, vhat: ArrayView2<f64>, spec: Slot, nb: usize, transpose: bool) -> Array2<f64> {
        let c = self.arch.width;
        let k = ct.modes;
        let mut out = Array2::zeros(vhat.raw_dim());
        for (ki, &wi) in ct.weight_index.iter().enumerate() {
            let r = ArrayView2::from_shape((c, c), &self.theta[spec.off + wi * c * c..spec.off + (wi + 1) * c * c]).unwrap();
            for b in 0..nb {
                let row = vhat.row(b * k + ki);
                let res = if transpose { r.dot(&row) } else { row.dot(&r) };
                out.row_mut(b * k + ki).assign(&res);
            }
        }
        out
    }

    fn backward(&self, cache: &Cache, cot: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let th = &self.theta[..];
        let ly = &self.layout;
        let (nb, n) = (cache.nb, cache.n);
        let c = self.arch.width;
        let ct = &cache.ct;
        let mut g = vec![0.0; ly.total];

        let g_out = cot.to_owned().into_shape_with_order((nb * n, 1)).unwrap();
        add_to(&mut g, ly.w_out, cache.v_last.t().dot(&g_out).view());
        add_rowsum(&mut g, ly.b_out, g_out.view());
        let mut gv = g_out.dot(&mat(th, ly.w_out).t());

        let mut g_mod = Array2::<f64>::zeros(cache.modulation.raw_dim());
        for (l, bs) in ly.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[l];
            // v' = h + y
            add_to(&mut g, bs.w2, bc.a.t().dot(&gv).view());
            add_rowsum(&mut g, bs.b2, gv.view());
            let mut gz = gv.dot(&mat(th, bs.w2).t());
            gz.zip_mut_with(&bc.z, |ga, &z| *ga *= silu_grad(z));
            add_to(&mut g, bs.w1, bc.ht.t().dot(&gz).view());
            add_rowsum(&mut g, bs.b1, gz.view());
            let ght = gz.dot(&mat(th, bs.w1).t());
            let mut gh = gv;
            for b in 0..nb {
                let rows = s![b * n..(b + 1) * n, ..];
                let ght_b = ght.slice(rows);
                let h_b = bc.h.slice(rows);
                for j in 0..c {
                    let sc = cache.modulation[[b, 2 * l * c + j]];
                    let mut gsc = 0.0;
                    let mut gsh = 0.0;
                    for p in 0..n {
                        let gt = ght_b[[p, j]];
                        gsc += gt * h_b[[p, j]];
                        gsh += gt;
                        gh[[b * n + p, j]] += gt * (1.0 + sc);
                    }
                    g_mod[[b, 2 * l * c + j]] += gsc;
                    g_mod[[b, (2 * l + 1) * c + j]] += gsh;
                }
            }
            // h = v + Phi^T mix(w Phi v)
            let gs_hat = ct.project(gh.view(), nb);
            let k = ct.modes;
            for (ki, &wi) in ct.weight_index.iter().enumerate() {
                let off = bs.spec.off + wi * c * c;
                let mut gr = ArrayViewMut2::from_shape((c, c), &mut g[off..off + c * c]).unwrap();
                for b in 0..nb {
                    let vrow = bc.vhat.row(b * k + ki);
                    let grow = gs_hat.row(b * k + ki);
                    for i in 0..c {
                        let vi = vrow[i];
                        if vi != 0.0 {
                            gr.row_mut(i).scaled_add(vi, &grow);
                        }
                    }
                }
            }
            let gvhat = self.mix(ct, gs_hat.view(), bs.spec, nb, true);
            let mut back = ct.expand(gvhat.view(), nb);
            back *= ct.weight;
            gh += &back;
            gv = gh;
        }

        // Time MLP.
        add_to(&mut g, ly.wt2, cache.ht.t().dot(&g_mod).view());
        add_rowsum(&mut g, ly.bt2, g_mod.view());
        let mut gzt = g_mod.dot(&mat(th, ly.wt2).t());
        gzt.zip_mut_with(&cache.zt, |ga, &z| *ga *= silu_grad(z));
        add_to(&mut g, ly.wt1, cache.temb.t().dot(&gzt).view());
        add_rowsum(&mut g, ly.bt1, gzt.view());

        // Lift.
        let w_in = mat(th, ly.w_in);
        let wx = w_in.row(0);
        let mut gx = Array2::zeros((nb, n));
        let mut g_shared = Array2::<f64>::zeros((n, c));
        let mut g_wx = Array1::<f64>::zeros(c);
        for b in 0..nb {
            for p in 0..n {
                let row = gv.row(b * n + p);
                gx[[b, p]] = row.dot(&wx);
                g_wx.scaled_add(cache.x[[b, p]], &row);
                let mut gs = g_shared.row_mut(p);
                gs += &row;
            }
        }
        {
            let mut gw = mat_mut(&mut g, ly.w_in);
            let mut r0 = gw.row_mut(0);
            r0 += &g_wx;
            let mut rest = gw.slice_mut(s![1.., ..]);
            rest += &cache.gamma.t().dot(&g_shared);
        }
        add_rowsum(&mut g, ly.b_in, g_shared.view());
        (g, gx)
    }

    pub fn forward(&self, t: &[f64], x: ArrayView2<f64>, grid: &GridSpec) -> Result<Array2<f64>> {
        Ok(self.forward_cached(t, x, grid)?.0)
    }
}

impl ControlFn for ControlNet {
    fn eval(&self, t: &[f64], x: ArrayView2<f64>, grid: &GridSpec) -> Result<Array2<f64>> {
        self.forward(t, x, grid)
    }
}

impl DiffControl for ControlNet {
    fn n_params(&self) -> usize {
        self.layout.total
    }

    fn vjp(&self, t: &[f64], x: ArrayView2<f64>, grid: &GridSpec, cot: ArrayView2<f64>)
        -> Result<(Vec<f64>, Array2<f64>)> {
        if cot.dim() != x.dim() {
            return Err(Error::Shape(format!("cotangent {:?} vs input {:?}", cot.dim(), x.dim())));
        }
        let (_, cache) = self.forward_cached(t, x, grid)?;
        Ok(self.backward(&cache, cot))
    }

    fn eval_vjp(
        &self,
        t: &[f64],
        x: ArrayView2<f64>,
        grid: &GridSpec,
        cot_of: &mut dyn FnMut(&Array2<f64>) -> Array2<f64>,
    ) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)> {
        let (out, cache) = self.forward_cached(t, x, grid)?;
        let cot = cot_of(&out);
        if cot.dim() != out.dim() {
            return Err(Error::Shape(format!("cotangent {:?} vs output {:?}", cot.dim(), out.dim())));
        }
        let (g, gx) = self.backward(&cache, cot.view());
        Ok((out, g, gx))
    }
}

/// `alpha(t, x) = theta_0 * x + theta_1`, pointwise; a minimal differentiable control.
#[derive(Debug, Clone)]
pub struct LinearControl {
    pub theta: [f64; 2],
}

impl ControlFn for LinearControl {
    fn eval(&self, _t: &[f64], x: ArrayView2<f64>, _grid: &GridSpec) -> Result<Array2<f64>> {
        Ok(x.mapv(|v| self.theta[0] * v + self.theta[1]))
    }
}

impl DiffControl for LinearControl {
    fn n_params(&self) -> usize {
        2
    }

    fn vjp(&self, _t: &[f64], x: ArrayView2<f64>, _grid: &GridSpec, cot: ArrayView2<f64>)
        -> Result<(Vec<f64>, Array2<f64>)> {
        let g0 = (&x * &cot).sum();
        let g1 = cot.sum();
        Ok((vec![g0, g1], cot.mapv(|c| c * self.theta[0])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_1d_is_desk_scale() {
        let net = ControlNet::init(NetArch::default_1d(1.0), 0).unwrap();
        assert!(net.n_params() <= 100_000, "{}", net.n_params());
    }

    /// A spectral convolution alone produces output supported on the retained modes.
    #[test]
    fn spectral_convolution_output_stays_in_retained_modes() {
        let grid = GridSpec::line(24, -1.0, 1.0).unwrap();
        let mut arch = NetArch::default_1d(1.0);
        arch.width = 3;
        arch.n_spectral_modes = 1;
        let net = ControlNet::init(arch, 3).unwrap();
        let ct = ChannelTransform::new(&grid, &net.arch).unwrap();
        let v = Array2::from_shape_fn((24, 3), |(i, j)| ((i * 5 + j * 11) % 7) as f64 - 3.0);
        let mut vhat = ct.project(v.view(), 1);
        vhat *= ct.weight;
        let out = ct.expand(net.mix(&ct, vhat.view(), net.layout.blocks[0].spec, 1, false).view(), 1);
        let full = GridTransform::cosine(&grid, &[24]).unwrap();
        for ch in 0..3 {
            let field = out.column(ch).to_owned().insert_axis(Axis(0));
            let c = full.analysis(field.view());
            assert!(c[[0, 0]].abs() > 1e-6);
            assert!(c.iter().skip(1).all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn channel_transform_matches_grid_transform() {
        let grid = GridSpec::new(vec![6, 5], vec![[0.0, 1.0], [0.0, 2.0]]).unwrap();
        let mut arch = NetArch::default_2d(1.0);
        arch.n_spectral_modes = 3;
        let ct = ChannelTransform::new(&grid, &arch).unwrap();
        let gt = GridTransform::cosine(&grid, &[3, 3]).unwrap();
        let v = Array2::from_shape_fn((2 * 30, 4), |(i, j)| ((i * 3 + j * 7) % 13) as f64 - 6.0);
        let pr = ct.project(v.view(), 2);
        for b in 0..2 {
            for ch in 0..4 {
                let field = v.slice(s![b * 30..(b + 1) * 30, ch]).to_owned().insert_axis(Axis(0));
                let want = gt.project(field.view());
                for k in 0..9 {
                    assert!((pr[[b * 9 + k, ch]] - want[[0, k]]).abs() < 1e-12);
                }
            }
        }
        let back = ct.expand(pr.view(), 2);
        let want = gt.expand(pr.slice(s![0..9, 0]).to_owned().insert_axis(Axis(0)).view());
        for p in 0..30 {
            assert!((back[[p, 0]] - want[[0, p]]).abs() < 1e-12);
        }
    }
}
