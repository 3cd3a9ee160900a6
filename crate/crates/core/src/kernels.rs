//! Kernel matrices: exact recursions by bivariate quadrature and wide-network Monte Carlo.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::error::{DeqError, Result};
use crate::gauss_quad::{self, DEFAULT_NODES_2D};
use crate::par;
use crate::rng::{self, Domain};
use crate::scalar_system::{self, DeqConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    ImplicitCk,
    ImplicitNtk,
    ExplicitCk,
    ExplicitNtk,
    ApproxCk,
    ApproxNtk,
}

impl KernelKind {
    pub fn code(self) -> u32 {
        self as u32
    }
    pub fn from_code(c: u32) -> Option<Self> {
        use KernelKind::*;
        [ImplicitCk, ImplicitNtk, ExplicitCk, ExplicitNtk, ApproxCk, ApproxNtk].get(c as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Quadrature,
    MonteCarlo,
    RmtFormula,
}

impl Method {
    pub fn code(self) -> u32 {
        self as u32
    }
    pub fn from_code(c: u32) -> Option<Self> {
        [Method::Quadrature, Method::MonteCarlo, Method::RmtFormula].get(c as usize).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub n: usize,
    pub seed: Option<u64>,
    pub width: Option<usize>,
    pub iterations: Option<usize>,
    pub delta: Option<f64>,
}

/// Dense symmetric kernel matrix with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub data: Array2<f64>,
    pub kind: KernelKind,
    pub method: Method,
    pub meta: KernelMeta,
}

const MAGIC: &[u8; 4] = b"DKLK";

impl KernelMatrix {
    pub fn new(data: Array2<f64>, kind: KernelKind, method: Method) -> Self {
        let n = data.nrows();
        KernelMatrix { data, kind, method, meta: KernelMeta { n, ..Default::default() } }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..i).all(|j| self.data[[i, j]].to_bits() == self.data[[j, i]].to_bits()))
    }

    /// Little-endian: "DKLK", u32 n, u32 kind, u32 method, then n² f64 row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n();
        let mut out = Vec::with_capacity(16 + 8 * n * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&self.kind.code().to_le_bytes());
        out.extend_from_slice(&self.method.code().to_le_bytes());
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| DeqError::Parse { row: 0, col: 0, msg: msg.into() };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing DKLK header"));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let n = word(4) as usize;
        let kind = KernelKind::from_code(word(8)).ok_or_else(|| bad("unknown kernel kind"))?;
        let method = Method::from_code(word(12)).ok_or_else(|| bad("unknown method"))?;
        if bytes.len() != 16 + 8 * n * n {
            return Err(bad("payload length does not match n"));
        }
        let vals = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let data = Array2::from_shape_vec((n, n), vals).expect("n×n");
        Ok(KernelMatrix::new(data, kind, method))
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// One row per line, comma separated, shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.data.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Xᵀ X for a p×n data matrix.
pub fn gram(x: &Array2<f64>) -> Array2<f64> {
    let g = x.t().dot(x);
    symmetrize_upper(g)
}

/// Mirrors the upper triangle so the matrix is bitwise symmetric.
fn symmetrize_upper(mut g: Array2<f64>) -> Array2<f64> {
    let n = g.nrows();
    for i in 0..n {
        for j in 0..i {
            g[[i, j]] = g[[j, i]];
        }
    }
    g
}

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

/// Fills the upper triangle with `f(i, j)` in parallel and mirrors it.
fn fill_symmetric<T, F>(n: usize, f: F) -> Result<Vec<Array2<f64>>>
where
    T: Send,
    F: Fn(usize, usize) -> Result<T> + Sync + Send,
    T: AsRef<[f64]>,
{
    let pairs = upper_pairs(n);
    let vals: Vec<Result<T>> = par::map_indexed(pairs.len(), |k| f(pairs[k].0, pairs[k].1));
    let mut outs: Vec<Array2<f64>> = Vec::new();
    for (k, v) in vals.into_iter().enumerate() {
        let v = v?;
        let v = v.as_ref();
        if outs.is_empty() {
            outs = (0..v.len()).map(|_| Array2::zeros((n, n))).collect();
        }
        let (i, j) = pairs[k];
        for (o, x) in outs.iter_mut().zip(v) {
            o[[i, j]] = *x;
            o[[j, i]] = *x;
        }
    }
    if outs.is_empty() {
        outs.push(Array2::zeros((n, n)));
    }
    Ok(outs)
}

#[inline]
fn clip_offdiag(lii: f64, ljj: f64, lij: f64) -> f64 {
    let b = (lii * ljj).sqrt();
    lij.clamp(-b, b)
}

/// Current state of the exact implicit recursion.
#[derive(Clone, Debug)]
pub struct RecursionState {
    pub lambda: Array2<f64>,
    pub g: Array2<f64>,
    pub gdot: Array2<f64>,
    /// Running NTK K⁽ˡ⁾ = G⁽ˡ⁾ + K⁽ˡ⁻¹⁾ ⊙ Ġ⁽ˡ⁾.
    pub k: Array2<f64>,
    pub layer: usize,
    pub max_delta: f64,
    pub deltas: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct RecursionOptions {
    pub tol: f64,
    pub max_layers: usize,
    /// Run exactly this many layers instead of stopping at `tol`.
    pub fixed_layers: Option<usize>,
    pub nodes: usize,
}

impl Default for RecursionOptions {
    fn default() -> Self {
        RecursionOptions { tol: 1e-12, max_layers: 500, fixed_layers: None, nodes: DEFAULT_NODES_2D }
    }
}

/// Runs Λ⁽ˡ⁾ = σ_a²G⁽ˡ⁻¹⁾ + σ_b²XᵀX, G⁽ˡ⁾ = E[φφ], Ġ⁽ˡ⁾ = σ_a²E[φ′φ′] from G⁽⁰⁾ = E[φ²(τ*ξ)]·I.
pub fn implicit_recursion(cfg: &DeqConfig, x: &Array2<f64>, opts: RecursionOptions) -> Result<RecursionState> {
    let n = x.ncols();
    if n > 256 {
        log::warn!("exact implicit recursion on n = {n} > 256 is expensive; prefer the Monte-Carlo path");
    }
    let ck = scalar_system::ck_coefficients(cfg)?;
    let act = ck.activation;
    let sa2 = cfg.sigma_a2();
    let sb2 = cfg.sigma_b * cfg.sigma_b;
    let xtx = gram(x);
    let g0 = Array2::eye(n) * ck.moments.s2;
    let mut st = RecursionState {
        lambda: Array2::zeros((n, n)),
        k: g0.clone(),
        g: g0,
        gdot: Array2::zeros((n, n)),
        layer: 0,
        max_delta: f64::INFINITY,
        deltas: vec![],
    };
    let limit = opts.fixed_layers.unwrap_or(opts.max_layers);
    while st.layer < limit {
        let lambda = symmetrize_upper(&st.g * sa2 + &xtx * sb2);
        let nodes = opts.nodes;
        let lam = &lambda;
        let mats = fill_symmetric(n, |i, j| {
            let (lii, ljj) = (lam[[i, i]], lam[[j, j]]);
            let lij = if i == j { lii } else { clip_offdiag(lii, ljj, lam[[i, j]]) };
            let (g, gd) = gauss_quad::pair_moments(&act, lii, ljj, lij, nodes)?;
            Ok([g, sa2 * gd])
        })?;
        let (g, gdot) = (mats[0].clone(), mats[1].clone());
        let delta = Zip::from(&g).and(&st.g).fold(0.0f64, |m, a, b| m.max((a - b).abs()));
        st.k = &g + &(&st.k * &gdot);
        st.g = g;
        st.gdot = gdot;
        st.lambda = lambda;
        st.layer += 1;
        st.max_delta = delta;
        st.deltas.push(delta);
        if opts.fixed_layers.is_none() && delta < opts.tol {
            return Ok(st);
        }
    }
    if opts.fixed_layers.is_some() {
        return Ok(st);
    }
    Err(DeqError::NoConvergence { what: "implicit CK recursion", iterations: limit, delta: st.max_delta })
}

fn meta_quadrature(n: usize, layers: usize, delta: f64) -> KernelMeta {
    KernelMeta { n, seed: None, width: None, iterations: Some(layers), delta: Some(delta) }
}

/// Exact (G*, Ġ*) of the DEQ by iterating the recursion until max |ΔG| < tol.
pub fn implicit_ck_exact(cfg: &DeqConfig, x: &Array2<f64>, tol: f64) -> Result<(KernelMatrix, KernelMatrix)> {
    implicit_ck_exact_with(cfg, x, RecursionOptions { tol, ..Default::default() })
}

/// As [`implicit_ck_exact`] with full control over the recursion.
pub fn implicit_ck_exact_with(cfg: &DeqConfig, x: &Array2<f64>, opts: RecursionOptions) -> Result<(KernelMatrix, KernelMatrix)> {
    let st = implicit_recursion(cfg, x, opts)?;
    let meta = meta_quadrature(x.ncols(), st.layer, st.max_delta);
    let mut g = KernelMatrix::new(st.g, KernelKind::ImplicitCk, Method::Quadrature);
    g.meta = meta.clone();
    let mut gd = KernelMatrix::new(st.gdot, KernelKind::ImplicitCk, Method::Quadrature);
    gd.meta = meta;
    Ok((g, gd))
}

/// K = G ⊘ (1 − Ġ).
pub fn implicit_ntk_from_ck(g: &KernelMatrix, gdot: &KernelMatrix) -> Result<KernelMatrix> {
    if g.data.dim() != gdot.data.dim() {
        return Err(DeqError::DimensionMismatch("G and Gdot differ in size".into()));
    }
    let n = g.n();
    for i in 0..n {
        for j in 0..n {
            let v = gdot.data[[i, j]];
            if v >= 1.0 - 1e-9 || !v.is_finite() {
                return Err(DeqError::DivergentNtk { i, j, value: v });
            }
        }
    }
    let data = Zip::from(&g.data).and(&gdot.data).map_collect(|a, b| a / (1.0 - b));
    let mut k = KernelMatrix::new(symmetrize_upper(data), KernelKind::ImplicitNtk, g.method);
    k.meta = g.meta.clone();
    Ok(k)
}

/// The truncated finite-depth NTK K⁽ˡ⁾ = Σ_{h=0..l} G⁽ʰ⁾ Π_{h'=h+1..l} Ġ⁽ʰ'⁾ (run as the
/// equivalent recursion K⁽ˡ⁾ = G⁽ˡ⁾ + K⁽ˡ⁻¹⁾ ⊙ Ġ⁽ˡ⁾).
pub fn implicit_ntk_finite_depth(cfg: &DeqConfig, x: &Array2<f64>, depth: usize) -> Result<KernelMatrix> {
    let st = implicit_recursion(cfg, x, RecursionOptions { fixed_layers: Some(depth), ..Default::default() })?;
    let mut k = KernelMatrix::new(st.k, KernelKind::ImplicitNtk, Method::Quadrature);
    k.meta = meta_quadrature(x.ncols(), depth, st.max_delta);
    Ok(k)
}

/// How the Monte-Carlo estimator applies the m×m Gaussian matrix A.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McBackend {
    /// Dense below the memory budget, lazy above.
    Auto,
    Dense,
    /// A is never stored: see [`LazyGaussian`].
    Lazy,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct McOptions {
    pub width: usize,
    pub iters: usize,
    pub reps: usize,
    pub seed: u64,
    pub tol: f64,
    pub memory_budget: usize,
    pub backend: McBackend,
}

impl McOptions {
    pub fn new(width: usize, seed: u64) -> Self {
        McOptions { width, iters: 100, reps: 1, seed, tol: 1e-10, memory_budget: 1 << 30, backend: McBackend::Auto }
    }
}

#[derive(Clone, Debug)]
pub struct McResult {
    pub g: KernelMatrix,
    pub gdot: KernelMatrix,
    pub iterations: Vec<usize>,
    pub deltas: Vec<f64>,
}

impl McResult {
    pub fn ntk(&self) -> Result<KernelMatrix> {
        implicit_ntk_from_ck(&self.g, &self.gdot)
    }
}

/// Ĝ = ZᵀZ at the fixed point z = φ(σ_a A z + σ_b B x)/√m, averaged over weight draws.
pub fn implicit_ck_montecarlo(cfg: &DeqConfig, x: &Array2<f64>, m: usize, iters: usize, reps: usize, seed: u64) -> Result<KernelMatrix> {
    let opts = McOptions { iters, reps, ..McOptions::new(m, seed) };
    Ok(implicit_montecarlo(cfg, x, &opts)?.g)
}

/// Monte-Carlo CK together with Ġ = σ_a² φ′(H)ᵀφ′(H)/m at the fixed point.
pub fn implicit_montecarlo(cfg: &DeqConfig, x: &Array2<f64>, opts: &McOptions) -> Result<McResult> {
    let m = opts.width;
    if m < 64 {
        return Err(DeqError::Config(format!("Monte-Carlo width must be at least 64, got {m}")));
    }
    if opts.reps == 0 {
        return Err(DeqError::Config("reps must be positive".into()));
    }
    let (p, n) = x.dim();
    let (act, _) = cfg.centered()?;
    scalar_system::check_assumptions(cfg).into_result()?;
    let dense_bytes = m.saturating_mul(m).saturating_mul(8);
    let backend = match opts.backend {
        McBackend::Auto if dense_bytes <= opts.memory_budget => McBackend::Dense,
        McBackend::Auto => McBackend::Lazy,
        McBackend::Dense if dense_bytes > opts.memory_budget => {
            return Err(DeqError::OutOfMemory(format!(
                "dense {m}x{m} weights need {} MiB over the {} MiB budget; use the lazy backend",
                dense_bytes >> 20,
                opts.memory_budget >> 20
            )))
        }
        b => b,
    };
    let lazy_bytes = m.saturating_mul(n).saturating_mul(opts.iters + 1).saturating_mul(16);
    if backend == McBackend::Lazy && lazy_bytes > opts.memory_budget.saturating_mul(4) {
        return Err(DeqError::OutOfMemory(format!("lazy backend would keep up to {} MiB of basis vectors", lazy_bytes >> 20)));
    }
    let mut g_sum = Array2::<f64>::zeros((n, n));
    let mut gd_sum = Array2::<f64>::zeros((n, n));
    let mut iterations = Vec::new();
    let mut deltas = Vec::new();
    for rep in 0..opts.reps as u64 {
        let b = gaussian_rows(m, p, opts.seed, Domain::WeightB, rep);
        let u = b.dot(x) * cfg.sigma_b;
        let mut op: Box<dyn MatVec> = match backend {
            McBackend::Lazy => Box::new(LazyGaussian::new(m, opts.seed, rep)),
            _ => Box::new(gaussian_rows(m, m, opts.seed, Domain::WeightA, rep)),
        };
        let (z, h, it, delta) = fixed_point(op.as_mut(), &act, cfg.sigma_a, &u, opts.iters, opts.tol)?;
        iterations.push(it);
        deltas.push(delta);
        g_sum += &z.t().dot(&z);
        let d = h.mapv(|v| act.deriv(v));
        gd_sum += &(d.t().dot(&d) * (cfg.sigma_a2() / m as f64));
    }
    let r = opts.reps as f64;
    let sym = |a: Array2<f64>| {
        let s = (&a + &a.t()) * (0.5 / r);
        symmetrize_upper(s)
    };
    let meta = KernelMeta {
        n,
        seed: Some(opts.seed),
        width: Some(m),
        iterations: iterations.iter().max().copied(),
        delta: deltas.iter().cloned().fold(None, |a: Option<f64>, d| Some(a.map_or(d, |a| a.max(d)))),
    };
    let mut g = KernelMatrix::new(sym(g_sum), KernelKind::ImplicitCk, Method::MonteCarlo);
    g.meta = meta.clone();
    let mut gdot = KernelMatrix::new(sym(gd_sum), KernelKind::ImplicitCk, Method::MonteCarlo);
    gdot.meta = meta;
    Ok(McResult { g, gdot, iterations, deltas })
}

/// rows×cols standard-normal matrix; row r comes from substream r.
pub fn gaussian_rows(rows: usize, cols: usize, seed: u64, domain: Domain, rep: u64) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((rows, cols));
    let slice = a.as_slice_mut().expect("standard layout");
    par::for_each_chunk_mut(slice, cols.max(1), |r, row| {
        let mut g = rng::substream(seed, domain, rep, r as u64);
        rng::fill_normal(&mut g, row);
    });
    a
}

/// Something that multiplies m×n blocks by the m×m Gaussian matrix A.
pub trait MatVec {
    fn apply(&mut self, z: ArrayView2<f64>) -> Array2<f64>;
}

const COLUMN_BLOCK: usize = 64;

impl MatVec for Array2<f64> {
    fn apply(&mut self, z: ArrayView2<f64>) -> Array2<f64> {
        let (m, n) = z.dim();
        let a = &*self;
        let blocks: Vec<Array2<f64>> = par::map_indexed(n.div_ceil(COLUMN_BLOCK), |b| {
            let lo = b * COLUMN_BLOCK;
            let hi = (lo + COLUMN_BLOCK).min(n);
            a.dot(&z.slice(s![.., lo..hi]))
        });
        let mut out = Array2::zeros((m, n));
        for (b, blk) in blocks.into_iter().enumerate() {
            let lo = b * COLUMN_BLOCK;
            out.slice_mut(s![.., lo..lo + blk.ncols()]).assign(&blk);
        }
        out
    }
}

/// An m×m standard Gaussian matrix that is only ever applied to vectors.
///
/// The images of an orthonormal basis of every vector seen so far are stored; a vector
/// with a component outside that span extends the basis, and the new basis direction is
/// mapped to a fresh N(0, I_m) draw. Conditionally on what has been observed this is
/// exactly the law of A, without storing m² entries.
pub struct LazyGaussian {
    m: usize,
    seed: u64,
    rep: u64,
    q: Vec<Vec<f64>>,
    aq: Vec<Vec<f64>>,
}

impl LazyGaussian {
    pub fn new(m: usize, seed: u64, rep: u64) -> Self {
        LazyGaussian { m, seed, rep, q: vec![], aq: vec![] }
    }

    pub fn rank(&self) -> usize {
        self.q.len()
    }

    fn project(&self, w: &mut [f64]) -> Vec<f64> {
        let q = &self.q;
        let mut coef = vec![0.0; q.len()];
        for _ in 0..2 {
            let c: Vec<f64> = par::map_indexed(q.len(), |j| dot(&q[j], w));
            par::for_each_chunk_mut(w, 4096, |ci, chunk| {
                let lo = ci * 4096;
                for (j, cj) in c.iter().enumerate() {
                    let qj = &q[j][lo..lo + chunk.len()];
                    for (v, qv) in chunk.iter_mut().zip(qj) {
                        *v -= cj * qv;
                    }
                }
            });
            for (a, b) in coef.iter_mut().zip(&c) {
                *a += b;
            }
        }
        coef
    }

    fn apply_vec(&mut self, w: &[f64]) -> Vec<f64> {
        let norm = dot(w, w).sqrt();
        if norm == 0.0 {
            return vec![0.0; self.m];
        }
        let mut resid = w.to_vec();
        let mut coef = self.project(&mut resid);
        let rn = dot(&resid, &resid).sqrt();
        if rn > 1e-13 * norm && self.q.len() < self.m {
            let q: Vec<f64> = resid.iter().map(|v| v / rn).collect();
            let mut g = rng::substream(self.seed, Domain::LazyBasis, self.rep, self.q.len() as u64);
            let mut aq = vec![0.0; self.m];
            rng::fill_normal(&mut g, &mut aq);
            self.q.push(q);
            self.aq.push(aq);
            coef.push(rn);
        }
        let aq = &self.aq;
        let mut out = vec![0.0; self.m];
        par::for_each_chunk_mut(&mut out, 4096, |ci, chunk| {
            let lo = ci * 4096;
            for (j, cj) in coef.iter().enumerate() {
                let a = &aq[j][lo..lo + chunk.len()];
                for (o, av) in chunk.iter_mut().zip(a) {
                    *o += cj * av;
                }
            }
        });
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            s[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut t = (s[0] + s[1]) + (s[2] + s[3]);
    for i in 4 * chunks..a.len() {
        t += a[i] * b[i];
    }
    t
}

impl MatVec for LazyGaussian {
    fn apply(&mut self, z: ArrayView2<f64>) -> Array2<f64> {
        let (m, n) = z.dim();
        let mut out = Array2::zeros((m, n));
        for j in 0..n {
            let col: Vec<f64> = z.column(j).to_vec();
            let v = self.apply_vec(&col);
            out.column_mut(j).assign(&ndarray::ArrayView1::from(&v));
        }
        out
    }
}

#[allow(clippy::type_complexity)]
fn fixed_point(
    a: &mut dyn MatVec,
    act: &Activation,
    sigma_a: f64,
    u: &Array2<f64>,
    iters: usize,
    tol: f64,
) -> Result<(Array2<f64>, Array2<f64>, usize, f64)> {
    let (m, n) = u.dim();
    let inv = 1.0 / (m as f64).sqrt();
    let mut z = Array2::<f64>::zeros((m, n));
    let mut h = u.clone();
    let mut delta = f64::INFINITY;
    let mut it = 0;
    while it < iters.max(1) {
        if it > 0 {
            h = a.apply(z.view()) * sigma_a + u;
        }
        let znew = h.mapv(|v| act.eval(v) * inv);
        let diff = Zip::from(&znew).and(&z).fold(0.0f64, |s, a, b| s + (a - b) * (a - b));
        let nrm = znew.iter().map(|v| v * v).sum::<f64>();
        delta = if nrm > 0.0 { (diff / nrm).sqrt() } else { diff.sqrt() };
        if !delta.is_finite() || nrm > 1e12 * (n as f64) {
            return Err(DeqError::NoConvergence { what: "Monte-Carlo fixed point (iterates diverge)", iterations: it + 1, delta });
        }
        z = znew;
        it += 1;
        if delta < tol || sigma_a == 0.0 {
            break;
        }
    }
    Ok((z, h, it, delta))
}

/// Σ⁽¹⁾..Σ⁽ᴸ⁾ with Σ⁽⁰⁾ = XᵀX, each layer centered at τ̃_{l−1} (τ̃_0 = `tau0`).
pub fn explicit_ck_exact(layers: &[Activation], x: &Array2<f64>, tau0: f64) -> Result<Vec<KernelMatrix>> {
    Ok(explicit_recursion(layers, x, tau0, false, DEFAULT_NODES_2D)?.0)
}

/// As [`explicit_ck_exact`] with an explicit per-dimension quadrature size.
pub fn explicit_ck_exact_with(layers: &[Activation], x: &Array2<f64>, tau0: f64, nodes: usize) -> Result<Vec<KernelMatrix>> {
    Ok(explicit_recursion(layers, x, tau0, false, nodes)?.0)
}

/// Θ⁽ᴸ⁾ from Θ⁽ˡ⁾ = Σ⁽ˡ⁾ + Θ⁽ˡ⁻¹⁾ ⊙ Σ̇⁽ˡ⁾, Θ⁽⁰⁾ = XᵀX.
pub fn explicit_ntk_exact(layers: &[Activation], x: &Array2<f64>, tau0: f64) -> Result<KernelMatrix> {
    let (_, theta) = explicit_recursion(layers, x, tau0, true, DEFAULT_NODES_2D)?;
    Ok(theta.expect("requested"))
}

fn explicit_recursion(
    layers: &[Activation],
    x: &Array2<f64>,
    tau0: f64,
    with_ntk: bool,
    nodes: usize,
) -> Result<(Vec<KernelMatrix>, Option<KernelMatrix>)> {
    let coeffs = scalar_system::explicit_coefficients(layers, tau0)?;
    let n = x.ncols();
    let mut sigma = gram(x);
    let mut theta = sigma.clone();
    let mut out = Vec::with_capacity(layers.len());
    for act in &coeffs.layers {
        let prev = &sigma;
        let mats = fill_symmetric(n, |i, j| {
            let (lii, ljj) = (prev[[i, i]], prev[[j, j]]);
            let lij = if i == j { lii } else { clip_offdiag(lii, ljj, prev[[i, j]]) };
            if with_ntk {
                let (g, gd) = gauss_quad::pair_moments(act, lii, ljj, lij, nodes)?;
                Ok(vec![g, gd])
            } else {
                Ok(vec![gauss_quad::pair_ck(act, lii, ljj, lij, nodes)?])
            }
        })?;
        let next = mats[0].clone();
        if with_ntk {
            theta = &next + &(&theta * &mats[1]);
        }
        sigma = next;
        let mut k = KernelMatrix::new(sigma.clone(), KernelKind::ExplicitCk, Method::Quadrature);
        k.meta.iterations = Some(out.len() + 1);
        out.push(k);
    }
    let theta = with_ntk.then(|| {
        let mut k = KernelMatrix::new(symmetrize_upper(theta), KernelKind::ExplicitNtk, Method::Quadrature);
        k.meta.iterations = Some(layers.len());
        k
    });
    Ok((out, theta))
}
