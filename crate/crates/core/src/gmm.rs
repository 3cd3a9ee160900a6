//! Gaussian mixture data: model, seeded sampler, second-order statistics, CSV ingestion.
//!
//! Samples follow `√p·x_i ~ N(μ_a, C_a)`, i.e. `x_i = (μ_a + ε_i)/√p`.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{DeqError, Result};
use crate::par;
use crate::rng::{self, Domain};

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    ScaledIdentity(f64),
    Dense(Array2<f64>),
}

impl Covariance {
    /// tr(C)/p.
    pub fn normalized_trace(&self, p: usize) -> f64 {
        match self {
            Covariance::ScaledIdentity(s) => *s,
            Covariance::Dense(m) => m.diag().sum() / p as f64,
        }
    }

    fn dense(&self, p: usize) -> Array2<f64> {
        match self {
            Covariance::ScaledIdentity(s) => Array2::eye(p) * *s,
            Covariance::Dense(m) => m.clone(),
        }
    }
}

/// tr(A B)/p for symmetric A, B.
fn normalized_trace_product(a: &Covariance, b: &Covariance, p: usize) -> f64 {
    match (a, b) {
        (Covariance::ScaledIdentity(s), Covariance::ScaledIdentity(t)) => s * t,
        (Covariance::ScaledIdentity(s), other) | (other, Covariance::ScaledIdentity(s)) => s * other.normalized_trace(p),
        (Covariance::Dense(x), Covariance::Dense(y)) => (x * y).sum() / p as f64,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub p: usize,
    pub means: Vec<Array1<f64>>,
    pub covs: Vec<Covariance>,
    pub class_sizes: Vec<usize>,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn n(&self) -> usize {
        self.class_sizes.iter().sum()
    }

    /// Splits `n` samples as evenly as possible over the classes (earlier classes first).
    pub fn with_equal_sizes(mut self, n: usize) -> Self {
        let k = self.k();
        self.class_sizes = (0..k).map(|a| n / k + usize::from(a < n % k)).collect();
        self
    }

    pub fn with_sizes(mut self, sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() != self.k() {
            return Err(DeqError::DimensionMismatch(format!("{} class sizes for {} classes", sizes.len(), self.k())));
        }
        self.class_sizes = sizes;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.covs.len() != k || self.class_sizes.len() != k {
            return Err(DeqError::DimensionMismatch("means, covariances and class sizes must have one entry per class".into()));
        }
        for (a, m) in self.means.iter().enumerate() {
            if m.len() != self.p || m.iter().any(|v| !v.is_finite()) {
                return Err(DeqError::DimensionMismatch(format!("mean {a} must be a finite vector of length {}", self.p)));
            }
        }
        for (a, c) in self.covs.iter().enumerate() {
            match c {
                Covariance::ScaledIdentity(s) if *s < 0.0 || !s.is_finite() => return Err(DeqError::CholeskyFailure(a)),
                Covariance::Dense(m) if m.dim() != (self.p, self.p) => {
                    return Err(DeqError::DimensionMismatch(format!("covariance {a} must be {0}x{0}", self.p)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Class label of every sample, grouped by class in label order.
    pub fn labels(&self) -> Vec<usize> {
        self.class_sizes.iter().enumerate().flat_map(|(a, &na)| std::iter::repeat_n(a, na)).collect()
    }
}

/// μ_a = 8·e_{8(a−1)+1}, C_a = (1 + 8(a−1)/√p)·I_p (class index a from 1).
pub fn paper_default_model(p: usize, k: usize) -> Result<GmmModel> {
    if k == 0 || p < 8 * k {
        return Err(DeqError::DimensionTooSmall { p, k });
    }
    let sp = (p as f64).sqrt();
    let means = (0..k)
        .map(|a| {
            let mut m = Array1::zeros(p);
            m[8 * a] = 8.0;
            m
        })
        .collect();
    let covs = (0..k).map(|a| Covariance::ScaledIdentity(1.0 + 8.0 * a as f64 / sp)).collect();
    Ok(GmmModel { p, means, covs, class_sizes: vec![0; k] })
}

/// A draw from a mixture: data, labels and the noise that generated it.
#[derive(Clone, Debug)]
pub struct Sample {
    /// p×n data matrix, one sample per column.
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    /// p×n noise ε (unnormalised, so x = (μ + ε)/√p).
    pub residuals: Option<Array2<f64>>,
}

impl Sample {
    pub fn n(&self) -> usize {
        self.x.ncols()
    }
    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    /// The first `n` columns.
    pub fn truncate(&self, n: usize) -> Sample {
        Sample {
            x: self.x.slice(ndarray::s![.., ..n]).to_owned(),
            labels: self.labels[..n].to_vec(),
            residuals: self.residuals.as_ref().map(|r| r.slice(ndarray::s![.., ..n]).to_owned()),
        }
    }

    /// Reorders columns: column `k` of the result is column `perm[k]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Sample {
        Sample {
            x: self.x.select(Axis(1), perm),
            labels: perm.iter().map(|&i| self.labels[i]).collect(),
            residuals: self.residuals.as_ref().map(|r| r.select(Axis(1), perm)),
        }
    }
}

enum Factor {
    Scaled(f64),
    Lower(Array2<f64>),
}

/// Cholesky factor of a PSD matrix; zero pivots (exactly singular directions) are allowed.
fn cholesky_psd(c: &Array2<f64>) -> Option<Array2<f64>> {
    let p = c.nrows();
    let scale = c.diag().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut l = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        let mut d = c[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d < -1e-12 * scale {
            return None;
        }
        if d <= 1e-14 * scale {
            for i in j + 1..p {
                let mut s = c[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                if s.abs() > 1e-8 * scale {
                    return None;
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in j + 1..p {
            let mut s = c[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

fn factor(cov: &Covariance, p: usize, class: usize) -> Result<Factor> {
    match cov {
        Covariance::ScaledIdentity(s) => Ok(Factor::Scaled(s.sqrt())),
        Covariance::Dense(m) => {
            if let Some(l) = cholesky_psd(m) {
                return Ok(Factor::Lower(l));
            }
            let jitter = 1e-12 * m.diag().sum() / p as f64;
            let mut mj = m.clone();
            mj.diag_mut().mapv_inplace(|v| v + jitter);
            cholesky_psd(&mj).map(Factor::Lower).ok_or(DeqError::CholeskyFailure(class))
        }
    }
}

/// Draws `model.n()` samples; column `i` uses random substream `i` of `seed`.
pub fn sample_gmm(model: &GmmModel, seed: u64) -> Result<Sample> {
    model.validate()?;
    let p = model.p;
    let factors = model.covs.iter().enumerate().map(|(a, c)| factor(c, p, a)).collect::<Result<Vec<_>>>()?;
    let labels = model.labels();
    let n = labels.len();
    let sp = (p as f64).sqrt();
    let cols: Vec<Vec<f64>> = par::map_indexed(n, |i| {
        let mut rng = rng::substream(seed, Domain::Data, 0, i as u64);
        let mut g = vec![0.0; p];
        rng::fill_normal(&mut rng, &mut g);
        match &factors[labels[i]] {
            Factor::Scaled(s) => g.iter().map(|v| s * v).collect(),
            Factor::Lower(l) => (0..p).map(|r| (0..=r).map(|k| l[[r, k]] * g[k]).sum()).collect(),
        }
    });
    let mut x = Array2::zeros((p, n));
    let mut eps = Array2::zeros((p, n));
    for (i, e) in cols.iter().enumerate() {
        let mu = &model.means[labels[i]];
        for r in 0..p {
            eps[[r, i]] = e[r];
            x[[r, i]] = (mu[r] + e[r]) / sp;
        }
    }
    Ok(Sample { x, labels, residuals: Some(eps) })
}

/// Second-order statistics of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmStats {
    pub tau0: f64,
    pub labels: Vec<usize>,
    pub k: usize,
    pub p: usize,
    pub psi: Vec<f64>,
    /// tr(C_a°)/√p per class.
    pub t: Vec<f64>,
    /// tr(C_a C_b)/p, row-major K×K.
    pub tmat: Vec<f64>,
    pub chi: Vec<f64>,
}

impl GmmStats {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// n×K one-hot membership matrix.
    pub fn j(&self) -> Array2<f64> {
        let mut j = Array2::zeros((self.n(), self.k));
        for (i, &a) in self.labels.iter().enumerate() {
            j[[i, a]] = 1.0;
        }
        j
    }

    pub fn t_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.k, self.k), self.tmat.clone()).expect("K×K")
    }

    /// Plug-in statistics for data without a generating model.
    ///
    /// τ0² is the grand mean of ‖x_i‖², ψ_i = ‖x_i‖² − mean over the class of ‖x‖², t from
    /// class means of ‖x‖², and T from unbiased pairwise estimates over class-centered samples.
    pub fn from_data(x: &Array2<f64>, labels: &[usize]) -> Result<GmmStats> {
        let (p, n) = x.dim();
        if labels.len() != n || n == 0 {
            return Err(DeqError::DimensionMismatch(format!("{} labels for {n} samples", labels.len())));
        }
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let norms: Vec<f64> = x.columns().into_iter().map(|c| c.dot(&c)).collect();
        let mut sizes = vec![0usize; k];
        let mut class_norm = vec![0.0; k];
        let mut class_mean = Array2::<f64>::zeros((p, k));
        for (i, &a) in labels.iter().enumerate() {
            sizes[a] += 1;
            class_norm[a] += norms[i];
            let mut col = class_mean.column_mut(a);
            col += &x.column(i);
        }
        for a in 0..k {
            if sizes[a] == 0 {
                return Err(DeqError::DimensionMismatch(format!("class {a} has no samples")));
            }
            class_norm[a] /= sizes[a] as f64;
            class_mean.column_mut(a).mapv_inplace(|v| v / sizes[a] as f64);
        }
        let tau0_sq = norms.iter().sum::<f64>() / n as f64;
        let sp = (p as f64).sqrt();
        let psi: Vec<f64> = labels.iter().enumerate().map(|(i, &a)| norms[i] - class_norm[a]).collect();
        let t: Vec<f64> = class_norm.iter().map(|m| sp * (m - tau0_sq)).collect();
        let mut centered = x.clone();
        for (i, &a) in labels.iter().enumerate() {
            let mut col = centered.column_mut(i);
            col -= &class_mean.column(a);
        }
        let gram = centered.t().dot(&centered);
        let mut sums = vec![0.0; k * k];
        let mut counts = vec![0usize; k * k];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let idx = labels[i] * k + labels[j];
                    sums[idx] += gram[[i, j]] * gram[[i, j]];
                    counts[idx] += 1;
                }
            }
        }
        let pf = p as f64;
        let tmat = sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { pf * s / c as f64 } else { 0.0 }).collect();
        let chi = norms.iter().map(|v| v - tau0_sq).collect();
        Ok(GmmStats { tau0: tau0_sq.max(0.0).sqrt(), labels: labels.to_vec(), k, p, psi, t, tmat, chi })
    }
}

/// Population statistics of `model` with sample-level ψ and χ.
pub fn compute_stats(model: &GmmModel, sample: &Sample) -> Result<GmmStats> {
    let p = model.p;
    let n = sample.n();
    if sample.p() != p || sample.labels.len() != n {
        return Err(DeqError::DimensionMismatch("sample does not match the model".into()));
    }
    let k = model.k();
    let mut sizes = vec![0usize; k];
    for &a in &sample.labels {
        sizes[a] += 1;
    }
    let traces: Vec<f64> = model.covs.iter().map(|c| c.normalized_trace(p)).collect();
    let tr0: f64 = traces.iter().zip(&sizes).map(|(t, &na)| t * na as f64).sum::<f64>() / n as f64;
    let sp = (p as f64).sqrt();
    let t: Vec<f64> = traces.iter().map(|tr| sp * (tr - tr0)).collect();
    let mut tmat = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            tmat[a * k + b] = normalized_trace_product(&model.covs[a], &model.covs[b], p);
        }
    }
    let psi = match &sample.residuals {
        Some(eps) => eps
            .columns()
            .into_iter()
            .zip(&sample.labels)
            .map(|(e, &a)| e.dot(&e) / p as f64 - traces[a])
            .collect(),
        None => return GmmStats::from_data(&sample.x, &sample.labels),
    };
    let chi = sample.x.columns().into_iter().map(|c| c.dot(&c) - tr0).collect();
    Ok(GmmStats { tau0: tr0.sqrt(), labels: sample.labels.clone(), k, p, psi, t, tmat, chi })
}

/// Dense copy of C_a (for tests and external consumers).
pub fn covariance_matrix(model: &GmmModel, a: usize) -> Array2<f64> {
    model.covs[a].dense(model.p)
}

/// Reads a numeric CSV. Rows are features and columns samples; with `labels` the last row
/// holds integer class labels.
pub fn load_matrix_csv(path: impl AsRef<Path>, header: bool, labels: bool) -> Result<(Array2<f64>, Option<Vec<usize>>)> {
    let text = std::fs::read_to_string(path)?;
    parse_matrix_csv(&text, header, labels)
}

pub fn parse_matrix_csv(text: &str, header: bool, labels: bool) -> Result<(Array2<f64>, Option<Vec<usize>>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut first_row = 0;
    for (ln, line) in text.lines().enumerate() {
        let row = ln + 1;
        if header && ln == 0 {
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .enumerate()
            .map(|(c, f)| {
                f.trim().parse::<f64>().map_err(|e| DeqError::Parse { row, col: c + 1, msg: format!("{:?}: {e}", f.trim()) })
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => {
                width = Some(vals.len());
                first_row = row;
            }
            Some(w) if w != vals.len() => return Err(DeqError::RaggedRows { row, expected: w, found: vals.len() }),
            _ => {}
        }
        rows.push(vals);
    }
    let Some(w) = width else {
        return Err(DeqError::Parse { row: 0, col: 0, msg: "no data rows".into() });
    };
    let label_row = if labels {
        let last = rows.pop().expect("nonempty");
        let row = first_row + rows.len();
        let mut out = Vec::with_capacity(w);
        for (c, v) in last.iter().enumerate() {
            if v.fract() != 0.0 || *v < 0.0 {
                return Err(DeqError::Parse { row, col: c + 1, msg: format!("label {v} is not a nonnegative integer") });
            }
            out.push(*v as usize);
        }
        if rows.is_empty() {
            return Err(DeqError::Parse { row, col: 0, msg: "no feature rows before the label row".into() });
        }
        Some(out)
    } else {
        None
    };
    let p = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let x = Array2::from_shape_vec((p, w), flat).expect("rectangular");
    Ok((x, label_row))
}

/// JSON description of a mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GmmSpec {
    PaperDefault {
        #[serde(default = "two")]
        classes: usize,
    },
    Custom {
        means: Vec<MeanSpec>,
        covariances: Vec<CovSpec>,
    },
    Csv {
        path: String,
        #[serde(default)]
        header: bool,
        #[serde(default)]
        labels: bool,
    },
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanSpec {
    Spike { index: usize, value: f64 },
    Dense(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovSpec {
    ScaledIdentity { scale: f64 },
    Dense { matrix: Vec<Vec<f64>> },
}

impl GmmSpec {
    /// Builds the model at dimension `p` with `n` samples split equally over classes.
    pub fn build(&self, p: usize, n: usize) -> Result<GmmModel> {
        match self {
            GmmSpec::PaperDefault { classes } => Ok(paper_default_model(p, *classes)?.with_equal_sizes(n)),
            GmmSpec::Custom { means, covariances } => {
                if means.len() != covariances.len() || means.is_empty() {
                    return Err(DeqError::Config("custom mixture needs one covariance per mean".into()));
                }
                let means = means
                    .iter()
                    .map(|m| match m {
                        MeanSpec::Spike { index, value } if *index < p => {
                            let mut v = Array1::zeros(p);
                            v[*index] = *value;
                            Ok(v)
                        }
                        MeanSpec::Dense(v) if v.len() == p => Ok(Array1::from(v.clone())),
                        _ => Err(DeqError::DimensionMismatch(format!("mean does not fit dimension p={p}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let covs = covariances
                    .iter()
                    .map(|c| match c {
                        CovSpec::ScaledIdentity { scale } => Ok(Covariance::ScaledIdentity(*scale)),
                        CovSpec::Dense { matrix } => {
                            if matrix.len() != p || matrix.iter().any(|r| r.len() != p) {
                                return Err(DeqError::DimensionMismatch(format!("covariance must be {p}x{p}")));
                            }
                            Ok(Covariance::Dense(Array2::from_shape_fn((p, p), |(i, j)| matrix[i][j])))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let model = GmmModel { p, means, covs, class_sizes: vec![] }.with_equal_sizes(n);
                model.validate()?;
                Ok(model)
            }
            GmmSpec::Csv { .. } => Err(DeqError::Config("CSV data has no generating model".into())),
        }
    }
}
