//! Positional-encoded MLP radiance field with explicit per-layer backward passes.
//!
//! Architecture: `[x, PE(x)]` feeds a trunk of dense layers with squareplus
//! activations. Density is a softplus head on the last trunk activation. The
//! encoded direction `[d, PE(d)]` joins the trunk features before a single
//! squareplus color layer and a sigmoid RGB output.
//!
//! On-disk format (`NRF1`), all little-endian:
//!
//! ```text
//! b"NRF1"
//! u32 n                     number of hidden layer widths that follow
//! u32 widths[n]             trunk widths, then the color hidden width
//! u32 pos_levels, dir_levels
//! f32 params[..]            per layer: weights (out × in, row-major) then biases,
//!                           in the order trunk…, density, color hidden, color out
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{encoding_backward, write_encoding};
use super::{FieldError, FieldGrads, FieldOutput, RadianceField};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"NRF1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub trunk: Vec<usize>,
    pub color_hidden: usize,
    pub pos_levels: usize,
    pub dir_levels: usize,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self { trunk: vec![64; 4], color_hidden: 32, pos_levels: 6, dir_levels: 2 }
    }
}

impl MlpArchitecture {
    pub fn pos_dim(&self) -> usize {
        3 + 6 * self.pos_levels
    }

    pub fn dir_dim(&self) -> usize {
        3 + 6 * self.dir_levels
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.trunk.is_empty() || self.trunk.contains(&0) || self.color_hidden == 0 {
            return Err(FieldError::Format(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn end(&self) -> usize {
        self.b + self.n_out
    }
}

/// Parameter offsets and per-sample activation cache offsets.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    trunk: Vec<Dense>,
    density: Dense,
    color_hidden: Dense,
    color_out: Dense,
    n_params: usize,
    // activation cache, per sample
    enc_x: usize,
    enc_d: usize,
    trunk_z: Vec<usize>,
    trunk_a: Vec<usize>,
    z_density: usize,
    z_color_hidden: usize,
    a_color_hidden: usize,
    z_color_out: usize,
    stride: usize,
    max_width: usize,
}

impl Layout {
    fn new(arch: &MlpArchitecture) -> Self {
        let mut off = 0;
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense { w: off, b: off + n_in * n_out, n_in, n_out };
            off = d.end();
            d
        };
        let mut trunk = Vec::new();
        let mut n_in = arch.pos_dim();
        for &w in &arch.trunk {
            trunk.push(dense(n_in, w));
            n_in = w;
        }
        let last = n_in;
        let density = dense(last, 1);
        let color_hidden = dense(last + arch.dir_dim(), arch.color_hidden);
        let color_out = dense(arch.color_hidden, 3);
        let n_params = off;

        let mut c = 0;
        let mut take = |n: usize| {
            let at = c;
            c += n;
            at
        };
        let enc_x = take(arch.pos_dim());
        let enc_d = take(arch.dir_dim());
        let mut trunk_z = Vec::new();
        let mut trunk_a = Vec::new();
        for &w in &arch.trunk {
            trunk_z.push(take(w));
            trunk_a.push(take(w));
        }
        let z_density = take(1);
        let z_color_hidden = take(arch.color_hidden);
        let a_color_hidden = take(arch.color_hidden);
        let z_color_out = take(3);
        let max_width = arch.trunk.iter().copied().chain([arch.color_hidden, arch.pos_dim(), last + arch.dir_dim()]).max().unwrap_or(0);
        Self {
            trunk,
            density,
            color_hidden,
            color_out,
            n_params,
            enc_x,
            enc_d,
            trunk_z,
            trunk_a,
            z_density,
            z_color_hidden,
            a_color_hidden,
            z_color_out,
            stride: c,
            max_width,
        }
    }
}

/// Reusable buffers for a ray's worth of forward activations and backward temporaries.
#[derive(Clone, Debug, Default)]
pub struct MlpScratch<T> {
    cache: Vec<T>,
    g_a: Vec<T>,
    g_in: Vec<T>,
    g_enc_d: Vec<T>,
    gz: Vec<T>,
    samples: usize,
}

impl<T: Real> MlpScratch<T> {
    pub fn new() -> Self {
        Self { cache: Vec::new(), g_a: Vec::new(), g_in: Vec::new(), g_enc_d: Vec::new(), gz: Vec::new(), samples: 0 }
    }

    fn prepare(&mut self, layout: &Layout, samples: usize) {
        let need = layout.stride * samples;
        if self.cache.len() < need {
            self.cache.resize(need, T::zero());
        }
        for buf in [&mut self.g_a, &mut self.g_in, &mut self.g_enc_d, &mut self.gz] {
            if buf.len() < layout.max_width {
                buf.resize(layout.max_width, T::zero());
            }
        }
        self.samples = samples;
    }
}

/// Trainable MLP radiance field; its parameter vector is the field's `Θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpField<T> {
    arch: MlpArchitecture,
    layout: Layout,
    params: Vec<T>,
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

#[inline]
fn squareplus<T: Real>(z: T) -> T {
    (z + (z * z + T::lit(4.0)).sqrt()) * T::lit(0.5)
}

/// Derivative of squareplus from its pre- and post-activation: `a / (2a − z)`.
#[inline]
fn squareplus_slope<T: Real>(z: T, a: T) -> T {
    a / (a + a - z)
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
fn softplus<T: Real>(z: T) -> T {
    if z > T::lit(20.0) {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// `z += W[:, row0..row0 + input.len()] · input`. Weights are stored
/// input-major: the weight from input `i` to output `j` sits at `w + i·n_out + j`.
#[inline]
fn dense_accumulate<T: Real>(p: &[T], d: &Dense, row0: usize, input: &[T], z: &mut [T]) {
    for (i, &a) in input.iter().enumerate() {
        let r = d.w + (row0 + i) * d.n_out;
        axpy(a, &p[r..r + d.n_out], z);
    }
}

/// Weight gradients `gz ⊗ input` for the given input rows, and optionally the
/// input gradient `Wᵀ gz` for those rows.
#[inline]
fn dense_backward<T: Real>(
    p: &[T],
    d: &Dense,
    row0: usize,
    input: &[T],
    gz: &[T],
    mut param_grad: Option<&mut [T]>,
    mut g_input: Option<&mut [T]>,
) {
    for (i, &a) in input.iter().enumerate() {
        let r = d.w + (row0 + i) * d.n_out;
        if let Some(gi) = g_input.as_deref_mut() {
            gi[i] = dot(&p[r..r + d.n_out], gz);
        }
        if let Some(g) = param_grad.as_deref_mut() {
            axpy(a, gz, &mut g[r..r + d.n_out]);
        }
    }
}

#[inline]
fn activate<T: Real>(z: &[T], a: &mut [T]) {
    for (a, &z) in a.iter_mut().zip(z) {
        *a = squareplus(z);
    }
}

#[inline]
fn activation_backward<T: Real>(g_a: &[T], z: &[T], a: &[T], gz: &mut [T]) {
    for ((g, &ga), (&z, &a)) in gz.iter_mut().zip(g_a).zip(z.iter().zip(a)) {
        *g = ga * squareplus_slope(z, a);
    }
}

impl<T: Real> MlpField<T> {
    /// Random initialization (He-uniform hidden layers, small output layers).
    pub fn new(arch: MlpArchitecture, seed: u64) -> Result<Self, FieldError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![T::zero(); layout.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |d: &Dense, bound: f64, params: &mut [T]| {
            for p in &mut params[d.w..d.b] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
        };
        for d in &layout.trunk {
            fill(d, (6.0 / d.n_in as f64).sqrt(), &mut params);
        }
        fill(&layout.color_hidden, (6.0 / layout.color_hidden.n_in as f64).sqrt(), &mut params);
        fill(&layout.density, (1.0 / layout.density.n_in as f64).sqrt(), &mut params);
        fill(&layout.color_out, (1.0 / layout.color_out.n_in as f64).sqrt(), &mut params);
        // start nearly transparent
        params[layout.density.b] = T::lit(-2.0);
        Ok(Self { arch, layout, params })
    }

    /// Wraps a parameter vector in the internal (input-major) order of [`MlpField::params`].
    pub fn from_params(arch: MlpArchitecture, params: Vec<T>) -> Result<Self, FieldError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.n_params {
            return Err(FieldError::Format(format!("expected {} parameters, got {}", layout.n_params, params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FieldError::Format("non-finite parameter".into()));
        }
        Ok(Self { arch, layout, params })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    /// Flat parameters, layer by layer: weights stored input-major
    /// (`w[i·n_out + j]` connects input `i` to output `j`), then biases.
    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable parameter access for optimizers. Callers must not query the field concurrently.
    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> MlpField<U> {
        MlpField { arch: self.arch.clone(), layout: self.layout.clone(), params: self.params.iter().map(|p| p.cast()).collect() }
    }

    /// Runs the forward pass for every sample of a ray, caching activations in `scratch`.
    pub fn forward_ray(&self, xs: &[Vec3<T>], d: Vec3<T>, scratch: &mut MlpScratch<T>, out: &mut [FieldOutput<T>]) {
        let l = &self.layout;
        scratch.prepare(l, xs.len());
        for (i, (&x, o)) in xs.iter().zip(out.iter_mut()).enumerate() {
            let cache = &mut scratch.cache[i * l.stride..(i + 1) * l.stride];
            *o = self.forward_sample(x, d, cache);
        }
    }

    fn forward_sample(&self, x: Vec3<T>, d: Vec3<T>, c: &mut [T]) -> FieldOutput<T> {
        let l = &self.layout;
        let p = &self.params;
        let px = self.arch.pos_dim();
        let pd = self.arch.dir_dim();
        c[l.enc_x..l.enc_x + 3].copy_from_slice(&x.to_array());
        write_encoding(&x.to_array(), self.arch.pos_levels, &mut c[l.enc_x + 3..l.enc_x + px]);
        c[l.enc_d..l.enc_d + 3].copy_from_slice(&d.to_array());
        write_encoding(&d.to_array(), self.arch.dir_levels, &mut c[l.enc_d + 3..l.enc_d + pd]);

        // z and a of each layer are adjacent in the cache, after everything they read
        let mut input = (l.enc_x, px);
        for (k, dense) in l.trunk.iter().enumerate() {
            let (lo, hi) = c.split_at_mut(l.trunk_z[k]);
            let (z, a) = hi.split_at_mut(dense.n_out);
            z.copy_from_slice(&p[dense.b..dense.b + dense.n_out]);
            dense_accumulate(p, dense, 0, &lo[input.0..input.0 + input.1], z);
            activate(z, &mut a[..dense.n_out]);
            input = (l.trunk_a[k], dense.n_out);
        }
        let (last, h) = input;

        let ds = &l.density;
        let zs = p[ds.b] + dot(&p[ds.w..ds.w + h], &c[last..last + h]);
        c[l.z_density] = zs;

        let ch = &l.color_hidden;
        let (lo, hi) = c.split_at_mut(l.z_color_hidden);
        let (z, a) = hi.split_at_mut(ch.n_out);
        z.copy_from_slice(&p[ch.b..ch.b + ch.n_out]);
        dense_accumulate(p, ch, 0, &lo[last..last + h], z);
        dense_accumulate(p, ch, h, &lo[l.enc_d..l.enc_d + pd], z);
        activate(z, &mut a[..ch.n_out]);

        let co = &l.color_out;
        let mut zc = [p[co.b], p[co.b + 1], p[co.b + 2]];
        dense_accumulate(p, co, 0, &c[l.a_color_hidden..l.a_color_hidden + co.n_in], &mut zc);
        c[l.z_color_out..l.z_color_out + 3].copy_from_slice(&zc);
        FieldOutput { density: softplus(zs), color: Vec3::new(sigmoid(zc[0]), sigmoid(zc[1]), sigmoid(zc[2])) }
    }

    /// Backpropagates `(∂L/∂σ, ∂L/∂c)` for cached sample `i`.
    ///
    /// Parameter gradients are accumulated into `param_grad` when given (same
    /// layout as [`MlpField::params`]). Input gradients `(∂L/∂x, ∂L/∂d)` are
    /// computed only if `want_input`; otherwise zeros are returned.
    pub fn backward_sample(
        &self,
        scratch: &mut MlpScratch<T>,
        i: usize,
        d_density: T,
        d_color: Vec3<T>,
        mut param_grad: Option<&mut [T]>,
        want_input: bool,
    ) -> (Vec3<T>, Vec3<T>) {
        let l = &self.layout;
        let p = &self.params;
        let MlpScratch { cache, g_a, g_in, g_enc_d, gz, .. } = scratch;
        let c = &cache[i * l.stride..(i + 1) * l.stride];
        let h = l.density.n_in;
        let last = *l.trunk_a.last().expect("non-empty trunk");
        let pd = self.arch.dir_dim();

        // color output: sigmoid
        let co = &l.color_out;
        let nch = co.n_in;
        let gz_out = &mut gz[..3];
        for j in 0..3 {
            let s = sigmoid(c[l.z_color_out + j]);
            gz_out[j] = d_color[j] * s * (T::one() - s);
        }
        let g_ach = &mut g_in[..nch];
        dense_backward(p, co, 0, &c[l.a_color_hidden..l.a_color_hidden + nch], gz_out, param_grad.as_deref_mut(), Some(&mut *g_ach));
        if let Some(g) = param_grad.as_deref_mut() {
            axpy(T::one(), gz_out, &mut g[co.b..co.b + 3]);
        }

        // color hidden: squareplus over [trunk features, encoded direction]
        let ch = &l.color_hidden;
        let gz_ch = &mut gz[..ch.n_out];
        activation_backward(
            g_ach,
            &c[l.z_color_hidden..l.z_color_hidden + ch.n_out],
            &c[l.a_color_hidden..l.a_color_hidden + ch.n_out],
            gz_ch,
        );
        let g_last = &mut g_a[..h];
        dense_backward(p, ch, 0, &c[last..last + h], gz_ch, param_grad.as_deref_mut(), Some(&mut *g_last));
        let g_ed = want_input.then(|| &mut g_enc_d[..pd]);
        dense_backward(p, ch, h, &c[l.enc_d..l.enc_d + pd], gz_ch, param_grad.as_deref_mut(), g_ed);
        if let Some(g) = param_grad.as_deref_mut() {
            axpy(T::one(), gz_ch, &mut g[ch.b..ch.b + ch.n_out]);
        }

        // density head: softplus
        let ds = &l.density;
        let gzs = d_density * sigmoid(c[l.z_density]);
        axpy(gzs, &p[ds.w..ds.w + h], g_last);
        if let Some(g) = param_grad.as_deref_mut() {
            axpy(gzs, &c[last..last + h], &mut g[ds.w..ds.w + h]);
            g[ds.b] += gzs;
        }

        // trunk, last layer first; g_a holds ∂L/∂a_k on entry to each iteration
        let mut dx = Vec3::zero();
        for k in (0..l.trunk.len()).rev() {
            let dense = &l.trunk[k];
            let (zo, ao) = (l.trunk_z[k], l.trunk_a[k]);
            let input = if k == 0 { l.enc_x } else { l.trunk_a[k - 1] };
            let need_input_grad = k > 0 || want_input;
            if param_grad.is_none() && !need_input_grad {
                break;
            }
            let gz_k = &mut gz[..dense.n_out];
            activation_backward(&g_a[..dense.n_out], &c[zo..zo + dense.n_out], &c[ao..ao + dense.n_out], gz_k);
            let g_prev = need_input_grad.then(|| &mut g_in[..dense.n_in]);
            dense_backward(p, dense, 0, &c[input..input + dense.n_in], gz_k, param_grad.as_deref_mut(), g_prev);
            if let Some(g) = param_grad.as_deref_mut() {
                axpy(T::one(), gz_k, &mut g[dense.b..dense.b + dense.n_out]);
            }
            if k == 0 {
                if want_input {
                    let mut gx = [g_in[0], g_in[1], g_in[2]];
                    let enc = &c[l.enc_x + 3..l.enc_x + self.arch.pos_dim()];
                    encoding_backward(&c[l.enc_x..l.enc_x + 3], self.arch.pos_levels, enc, &g_in[3..dense.n_in], &mut gx);
                    dx = Vec3::from_array(gx);
                }
            } else {
                g_a[..dense.n_in].copy_from_slice(&g_in[..dense.n_in]);
            }
        }

        let dd = if want_input {
            let mut gd = [g_enc_d[0], g_enc_d[1], g_enc_d[2]];
            let enc = &c[l.enc_d + 3..l.enc_d + pd];
            encoding_backward(&c[l.enc_d..l.enc_d + 3], self.arch.dir_levels, enc, &g_enc_d[3..pd], &mut gd);
            Vec3::from_array(gd)
        } else {
            Vec3::zero()
        };
        (dx, dd)
    }

    fn denses(&self) -> impl Iterator<Item = &Dense> {
        let l = &self.layout;
        l.trunk.iter().chain([&l.density, &l.color_hidden, &l.color_out])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * (4 + self.arch.trunk.len() + self.params.len()));
        out.extend_from_slice(MAGIC);
        let widths: Vec<usize> = self.arch.trunk.iter().copied().chain([self.arch.color_hidden]).collect();
        let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put(widths.len());
        widths.iter().for_each(|&w| put(w));
        put(self.arch.pos_levels);
        put(self.arch.dir_levels);
        let mut put_f = |v: T| out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        for d in self.denses() {
            for j in 0..d.n_out {
                for i in 0..d.n_in {
                    put_f(self.params[d.w + i * d.n_out + j]);
                }
            }
            self.params[d.b..d.end()].iter().for_each(|&b| put_f(b));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FieldError> {
        let bad = |msg: &str| FieldError::Format(msg.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing NRF1 magic"));
        }
        let mut pos = 4;
        let mut word = || -> Result<u32, FieldError> {
            let chunk = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated header"))?;
            pos += 4;
            Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
        };
        let n = word()? as usize;
        if !(2..=64).contains(&n) {
            return Err(bad("implausible layer count"));
        }
        let widths = (0..n).map(|_| word().map(|w| w as usize)).collect::<Result<Vec<_>, _>>()?;
        let pos_levels = word()? as usize;
        let dir_levels = word()? as usize;
        let arch = MlpArchitecture { trunk: widths[..n - 1].to_vec(), color_hidden: widths[n - 1], pos_levels, dir_levels };
        arch.validate()?;
        let layout = Layout::new(&arch);
        let body = &bytes[pos..];
        if body.len() != layout.n_params * 4 {
            return Err(FieldError::Format(format!("expected {} weight bytes, found {}", layout.n_params * 4, body.len())));
        }
        let mut values = body.chunks_exact(4).map(|ch| T::lit(f32::from_le_bytes(ch.try_into().expect("4 bytes")) as f64));
        let mut params = vec![T::zero(); layout.n_params];
        let mut field = Self { arch, layout, params: Vec::new() };
        for d in field.denses() {
            for j in 0..d.n_out {
                for i in 0..d.n_in {
                    params[d.w + i * d.n_out + j] = values.next().expect("length checked");
                }
            }
            params[d.b..d.end()].iter_mut().for_each(|b| *b = values.next().expect("length checked"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        field.params = params;
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| FieldError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let bytes = std::fs::read(path).map_err(|source| FieldError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Real> RadianceField<T> for MlpField<T> {
    fn eval(&self, x: Vec3<T>, d: Vec3<T>) -> FieldOutput<T> {
        let mut cache = vec![T::zero(); self.layout.stride];
        self.forward_sample(x, d, &mut cache)
    }

    fn eval_with_grads(&self, x: Vec3<T>, d: Vec3<T>) -> FieldGrads<T> {
        let mut scratch = MlpScratch::new();
        let mut out = [FieldOutput::default()];
        self.forward_ray(&[x], d, &mut scratch, &mut out);
        let (d_density_dx, _) = self.backward_sample(&mut scratch, 0, T::one(), Vec3::zero(), None, true);
        let mut d_color_dx = Mat3::zero();
        let mut d_color_dd = Mat3::zero();
        for ch in 0..3 {
            let mut e = [T::zero(); 3];
            e[ch] = T::one();
            let (gx, gd) = self.backward_sample(&mut scratch, 0, T::zero(), Vec3::from_array(e), None, true);
            d_color_dx.m[ch] = gx.to_array();
            d_color_dd.m[ch] = gd.to_array();
        }
        FieldGrads { output: out[0], d_density_dx, d_color_dx, d_color_dd }
    }

    fn eval_samples(&self, xs: &[Vec3<T>], d: Vec3<T>, out: &mut [FieldOutput<T>]) {
        let mut scratch = MlpScratch::new();
        self.forward_ray(xs, d, &mut scratch, out);
    }

    fn backprop_samples(&self, xs: &[Vec3<T>], d: Vec3<T>, upstream: &[(T, Vec3<T>)], dx: &mut [Vec3<T>]) -> Vec3<T> {
        let mut scratch = MlpScratch::new();
        let mut out = vec![FieldOutput::default(); xs.len()];
        self.forward_ray(xs, d, &mut scratch, &mut out);
        let mut dd = Vec3::zero();
        for (i, (&(gs, gc), gx)) in upstream.iter().zip(dx.iter_mut()).enumerate() {
            if gs == T::zero() && gc == Vec3::zero() {
                *gx = Vec3::zero();
                continue;
            }
            let (a, b) = self.backward_sample(&mut scratch, i, gs, gc, None, true);
            *gx = a;
            dd += b;
        }
        dd
    }
}
