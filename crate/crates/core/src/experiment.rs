//! Configuration-driven experiments: relative kernel errors over a grid of sample sizes,
//! eigenvalue histograms, coefficient dumps and activation matching.
//!
//! Every point (n, seed) draws its own mixture sample and weights from counter-based
//! streams, so outputs do not depend on the number of worker threads.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activations::{Activation, ActivationSpec, Family};
use crate::error::{DeqError, Result};
use crate::gmm::{self, GmmSpec, GmmStats, Sample};
use crate::kernels::{self, McOptions, McResult};
use crate::matching::{self, MatchOptions, MatchResult, MatchTarget};
use crate::par;
use crate::rmt_equiv;
use crate::scalar_system::{self, AssumptionReport, CkCoefficients, DeqConfig, NtkCoefficients};
use crate::spectra::{self, Histogram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Fig1CkError,
    Fig1NtkError,
    Fig2Matching,
    Spectra,
    Coeffs,
    MatchOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McSettings {
    pub m: usize,
    pub iters: usize,
    pub reps: usize,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings { m: 1 << 12, iters: 100, reps: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub activation: ActivationSpec,
    #[serde(default = "default_sigma_a2")]
    pub sigma_a2: f64,
    #[serde(default = "one")]
    pub sigma_b: f64,
    /// Overrides the τ0 of the mixture (coefficient and matching runs).
    #[serde(default)]
    pub tau0: Option<f64>,
    #[serde(default = "default_gmm")]
    pub gmm: GmmSpec,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    /// p = round(p_over_n · n).
    #[serde(default = "default_ratio")]
    pub p_over_n: f64,
    #[serde(default)]
    pub mc: McSettings,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default)]
    pub drop_below: Option<f64>,
    /// Forces the matched depth instead of the depth rule.
    #[serde(default)]
    pub match_depth: Option<usize>,
    #[serde(default)]
    pub match_restarts: Option<usize>,
    /// Gauss–Legendre nodes of the exact kernels in matching runs.
    #[serde(default = "default_quad_nodes")]
    pub quad_nodes: usize,
}

fn default_sigma_a2() -> f64 {
    0.2
}
fn one() -> f64 {
    1.0
}
fn default_gmm() -> GmmSpec {
    GmmSpec::PaperDefault { classes: 2 }
}
fn default_n_grid() -> Vec<usize> {
    vec![40, 80, 160, 320]
}
fn default_ratio() -> f64 {
    0.8
}
fn default_quad_nodes() -> usize {
    24
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, activation: Activation) -> Self {
        ExperimentConfig {
            experiment,
            activation: activation.spec(),
            sigma_a2: default_sigma_a2(),
            sigma_b: 1.0,
            tau0: None,
            gmm: default_gmm(),
            n_grid: default_n_grid(),
            p_over_n: default_ratio(),
            mc: McSettings::default(),
            seeds: default_seeds(),
            output_dir: None,
            bins: None,
            drop_below: None,
            match_depth: None,
            match_restarts: None,
            quad_nodes: default_quad_nodes(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DeqError::Config(m));
        Activation::from_spec(&self.activation)?;
        if self.n_grid.is_empty() {
            return err("n_grid must not be empty".into());
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("n_grid must be strictly ascending, got {:?}", self.n_grid));
        }
        if self.seeds.is_empty() {
            return err("seeds must not be empty".into());
        }
        if !(self.sigma_a2 >= 0.0 && self.sigma_a2.is_finite()) || !(self.sigma_b > 0.0 && self.sigma_b.is_finite()) {
            return err(format!("need sigma_a2 >= 0 and sigma_b > 0, got {} and {}", self.sigma_a2, self.sigma_b));
        }
        if !(self.p_over_n > 0.0) {
            return err(format!("p_over_n must be positive, got {}", self.p_over_n));
        }
        if self.tau0.is_some_and(|t| !(t > 0.0)) {
            return err("tau0 must be positive".into());
        }
        if self.mc.m < 64 || self.mc.iters == 0 || self.mc.reps == 0 {
            return err(format!("invalid Monte-Carlo settings {:?}", self.mc));
        }
        if let Some(d) = self.match_depth {
            if d != 1 && d != 2 {
                return err(format!("match_depth must be 1 or 2, got {d}"));
            }
        }
        if self.quad_nodes < 8 {
            return err(format!("quad_nodes must be at least 8, got {}", self.quad_nodes));
        }
        if matches!(self.gmm, GmmSpec::Csv { .. }) && self.n_grid.len() != 1 {
            return err("CSV data has a fixed n; use a single-entry n_grid".into());
        }
        Ok(())
    }

    pub fn with_seed_offset(mut self, k: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(k);
        }
        self
    }

    pub fn deq(&self, tau0: f64) -> Result<DeqConfig> {
        Ok(DeqConfig::new(Activation::from_spec(&self.activation)?, self.sigma_a2, self.sigma_b, tau0))
    }

    pub fn dimension(&self, n: usize) -> usize {
        ((self.p_over_n * n as f64).round() as usize).max(1)
    }
}

/// Data and statistics of one grid point.
pub struct PointData {
    pub sample: Sample,
    pub stats: GmmStats,
}

/// Draws the sample for (n, seed): from the mixture model, or the CSV file truncated to n.
pub fn point_data(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<PointData> {
    match &cfg.gmm {
        GmmSpec::Csv { path, header, labels } => {
            let (x, l) = gmm::load_matrix_csv(path, *header, *labels)?;
            let labels = l.unwrap_or_else(|| vec![0; x.ncols()]);
            if x.ncols() < n {
                return Err(DeqError::DimensionMismatch(format!("CSV has {} samples, n = {n} requested", x.ncols())));
            }
            let sample = Sample { x, labels, residuals: None }.truncate(n);
            let stats = GmmStats::from_data(&sample.x, &sample.labels)?;
            Ok(PointData { sample, stats })
        }
        spec => {
            let model = spec.build(cfg.dimension(n), n)?;
            let sample = gmm::sample_gmm(&model, seed)?;
            let stats = gmm::compute_stats(&model, &sample)?;
            Ok(PointData { sample, stats })
        }
    }
}

/// Monte-Carlo DEQ kernels at (n, seed); the weights use the same seed as the data.
pub fn monte_carlo(cfg: &ExperimentConfig, data: &PointData, seed: u64) -> Result<McResult> {
    let deq = cfg.deq(data.stats.tau0)?;
    let opts = McOptions { iters: cfg.mc.iters, reps: cfg.mc.reps, ..McOptions::new(cfg.mc.m, seed) };
    kernels::implicit_montecarlo(&deq, &data.sample.x, &opts)
}

/// ‖G*_MC − Ḡ‖/‖G*_MC‖.
pub fn ck_error(cfg: &ExperimentConfig, data: &PointData, mc: &McResult) -> Result<f64> {
    let ck = scalar_system::ck_coefficients(&cfg.deq(data.stats.tau0)?)?;
    let g = rmt_equiv::approx_implicit_ck(&ck, &data.stats, &data.sample.x)?;
    spectra::relative_spectral_error(&mc.g, &g)
}

/// ‖K*_MC − K̄‖/‖K*_MC‖ with K*_MC = Ĝ/(1 − Ġ̂).
pub fn ntk_error(cfg: &ExperimentConfig, data: &PointData, mc: &McResult) -> Result<f64> {
    let deq = cfg.deq(data.stats.tau0)?;
    let ck = scalar_system::ck_coefficients(&deq)?;
    let ntk = scalar_system::ntk_coefficients(&deq, &ck)?;
    let k = rmt_equiv::approx_implicit_ntk(&ntk, &data.stats, &data.sample.x)?;
    spectra::relative_spectral_error(&mc.ntk()?, &k)
}

/// ‖G* − Σ⁽ᴸ⁾‖/‖G*‖ between the exact CKs of the DEQ and of its matched explicit network.
pub fn matching_error(cfg: &ExperimentConfig, data: &PointData) -> Result<(f64, MatchResult)> {
    let tau0 = data.stats.tau0;
    let r = match_for(cfg, tau0)?;
    let opts = kernels::RecursionOptions { tol: 1e-10, nodes: cfg.quad_nodes, ..Default::default() };
    let (g, _) = kernels::implicit_ck_exact_with(&cfg.deq(tau0)?, &data.sample.x, opts)?;
    let layers = kernels::explicit_ck_exact_with(&r.layers, &data.sample.x, tau0, cfg.quad_nodes)?;
    let sigma = layers.last().ok_or_else(|| DeqError::Config("matched network has no layers".into()))?;
    Ok((spectra::relative_spectral_error(&g, sigma)?, r))
}

fn match_for(cfg: &ExperimentConfig, tau0: f64) -> Result<MatchResult> {
    let ck = scalar_system::ck_coefficients(&cfg.deq(tau0)?)?;
    let target = MatchTarget::from_ck(&ck, tau0);
    let opts = MatchOptions { restarts: cfg.match_restarts.unwrap_or(MatchOptions::default().restarts), ..MatchOptions::default() };
    let depth = cfg.match_depth.unwrap_or_else(|| matching::decide_depth(&target, opts.depth_tol));
    matching::match_activation_with(&target, depth, &opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub n: usize,
    pub seed: u64,
    pub relative_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub points: Vec<PointRow>,
    pub aggregate: Vec<AggregateRow>,
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoeffsReport {
    pub activation: ActivationSpec,
    pub sigma_a2: f64,
    pub sigma_b: f64,
    pub tau0: f64,
    pub ck: CkCoefficients,
    pub ntk: NtkCoefficients,
    pub depth: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchReport {
    pub activation: ActivationSpec,
    pub tau0: f64,
    pub target: MatchTarget,
    pub depth: usize,
    pub result: MatchResult,
}

/// τ0 of the configuration: the override, or the mixture's at the largest grid size.
pub fn config_tau0(cfg: &ExperimentConfig) -> Result<f64> {
    if let Some(t) = cfg.tau0 {
        return Ok(t);
    }
    let n = *cfg.n_grid.last().expect("validated");
    Ok(point_data(cfg, n, cfg.seeds[0])?.stats.tau0)
}

pub fn coefficients(cfg: &ExperimentConfig) -> Result<CoeffsReport> {
    let tau0 = config_tau0(cfg)?;
    let deq = cfg.deq(tau0)?;
    let ck = scalar_system::ck_coefficients(&deq)?;
    let ntk = scalar_system::ntk_coefficients(&deq, &ck)?;
    let depth = matching::decide_depth(&MatchTarget::from_ck(&ck, tau0), MatchOptions::default().depth_tol);
    Ok(CoeffsReport { activation: cfg.activation.clone(), sigma_a2: cfg.sigma_a2, sigma_b: cfg.sigma_b, tau0, ck, ntk, depth })
}

pub fn match_report(cfg: &ExperimentConfig) -> Result<MatchReport> {
    let tau0 = config_tau0(cfg)?;
    let ck = scalar_system::ck_coefficients(&cfg.deq(tau0)?)?;
    let target = MatchTarget::from_ck(&ck, tau0);
    let result = match_for(cfg, tau0)?;
    Ok(MatchReport { activation: cfg.activation.clone(), tau0, target, depth: result.depth, result })
}

/// Assumption report at the configuration's τ0.
pub fn check(cfg: &ExperimentConfig) -> Result<AssumptionReport> {
    cfg.validate()?;
    let tau0 = config_tau0(cfg)?;
    Ok(scalar_system::check_assumptions(&cfg.deq(tau0)?))
}

/// Runs the experiment and writes its artifacts into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut summary = RunSummary::default();
    match cfg.experiment {
        ExperimentKind::Coeffs => {
            let path = out.join("coeffs.json");
            fs::write(&path, serde_json::to_string_pretty(&coefficients(cfg)?)? + "\n")?;
            summary.files.push(path);
        }
        ExperimentKind::MatchOnly => {
            let path = out.join("match.json");
            fs::write(&path, serde_json::to_string_pretty(&match_report(cfg)?)? + "\n")?;
            summary.files.push(path);
        }
        ExperimentKind::Fig1CkError | ExperimentKind::Fig1NtkError | ExperimentKind::Fig2Matching | ExperimentKind::Spectra => {
            scalar_system::check_assumptions(&cfg.deq(config_tau0(cfg)?)?).into_result()?;
            let grid: Vec<(usize, u64)> = cfg.n_grid.iter().flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s))).collect();
            let results = par::map_indexed(grid.len(), |i| {
                let (n, seed) = grid[i];
                log::info!("{:?}: n = {n}, seed = {seed}", cfg.experiment);
                run_point(cfg, n, seed, out)
            });
            let mut first_err = None;
            for (&(n, seed), r) in grid.iter().zip(results) {
                match r {
                    Ok((e, files)) => {
                        summary.points.push(PointRow { n, seed, relative_error: e });
                        summary.files.extend(files);
                    }
                    Err(e) => {
                        log::error!("n = {n}, seed = {seed}: {e}");
                        first_err.get_or_insert(e);
                    }
                }
            }
            summary.aggregate = aggregate(&summary.points);
            let points = out.join("points.csv");
            fs::write(&points, points_csv(&summary.points))?;
            let agg = out.join("aggregate.csv");
            fs::write(&agg, aggregate_csv(&summary.aggregate))?;
            summary.files.push(points);
            summary.files.push(agg);
            if let Some(e) = first_err {
                return Err(e);
            }
        }
    }
    Ok(summary)
}

fn run_point(cfg: &ExperimentConfig, n: usize, seed: u64, out: &Path) -> Result<(f64, Vec<PathBuf>)> {
    let data = point_data(cfg, n, seed)?;
    if cfg.experiment == ExperimentKind::Fig2Matching {
        return Ok((matching_error(cfg, &data)?.0, Vec::new()));
    }
    let mc = monte_carlo(cfg, &data, seed)?;
    let mut files = Vec::new();
    let err = match cfg.experiment {
        ExperimentKind::Fig1NtkError => ntk_error(cfg, &data, &mc)?,
        ExperimentKind::Spectra => {
            let ck = scalar_system::ck_coefficients(&cfg.deq(data.stats.tau0)?)?;
            let g = rmt_equiv::approx_implicit_ck(&ck, &data.stats, &data.sample.x)?;
            let bins = cfg.bins.unwrap_or(spectra::DEFAULT_BINS);
            for (tag, m) in [("mc", &mc.g.data), ("rmt", &g.data)] {
                let h = Histogram::new(&spectra::eigenvalues_dense(m)?, bins, cfg.drop_below);
                let path = out.join(format!("spectrum_{tag}_n{n}_seed{seed}.csv"));
                fs::write(&path, h.to_csv())?;
                files.push(path);
            }
            spectra::relative_spectral_error(&mc.g, &g)?
        }
        _ => ck_error(cfg, &data, &mc)?,
    };
    Ok((err, files))
}

/// Per-n mean, median, min and max over seeds, in grid order.
pub fn aggregate(points: &[PointRow]) -> Vec<AggregateRow> {
    let mut ns: Vec<usize> = points.iter().map(|p| p.n).collect();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let mut v: Vec<f64> = points.iter().filter(|p| p.n == n).map(|p| p.relative_error).collect();
            v.sort_by(f64::total_cmp);
            let k = v.len();
            let median = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
            AggregateRow { n, mean: v.iter().sum::<f64>() / k as f64, median, min: v[0], max: v[k - 1] }
        })
        .collect()
}

pub fn points_csv(points: &[PointRow]) -> String {
    let mut s = String::from("n,seed,relative_error\n");
    for p in points {
        s.push_str(&format!("{},{},{:?}\n", p.n, p.seed, p.relative_error));
    }
    s
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("n,mean,median,min,max\n");
    for r in rows {
        s.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", r.n, r.mean, r.median, r.min, r.max));
    }
    s
}

/// The DEQ activations of the error-curve experiments.
pub fn paper_activations() -> Vec<Activation> {
    vec![Activation::relu(), Activation::tanh(), Activation::swish(), Activation::new(Family::LeakyRelu, &[1.0, 0.01]).expect("valid")]
}
