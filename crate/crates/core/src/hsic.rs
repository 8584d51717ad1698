//! Kernel (HSIC) estimates of the dependence between step representations
//! and the gold-answer representation.
//!
//! The estimator is the biased empirical HSIC with Gaussian kernels,
//!
//! ```text
//! HSIC(X, Y) = tr(K_X H K_Y H) / (n - 1)^2,   H = I - (1/n) 1 1^T
//! ```
//!
//! evaluated as the Frobenius inner product of the two doubly-centered Gram
//! matrices. Centering both sides makes the estimate exactly symmetric in its
//! arguments and nonnegative up to round-off.
//!
//! [`mi_trajectory`] turns a collection of [`RepresentationTrace`]s into a
//! per-step sequence `m_1 .. m_T`, either across a batch of traces
//! (one sample per trace at every step) or within a single trace (a sliding
//! window of steps paired with the resampled gold-answer rows).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_io::RepresentationTrace;

/// Default bandwidth grid: 50, 100, ..., 400.
pub fn default_grid() -> Vec<f64> {
    (1..=8).map(|i| 50.0 * i as f64).collect()
}

/// Rows of a pooled sample are subsampled to at most this many for the
/// median heuristic (pairwise distances grow quadratically).
const MEDIAN_POOL_CAP: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    Explicit,
    MedianHeuristic,
    GridSearch,
}

/// Gaussian kernel configuration shared by both sides of the estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: f64,
    pub mode: BandwidthMode,
    pub grid: Vec<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: 100.0,
            mode: BandwidthMode::GridSearch,
            grid: default_grid(),
        }
    }
}

impl KernelConfig {
    pub fn explicit(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            mode: BandwidthMode::Explicit,
            grid: default_grid(),
        }
    }

    pub fn median_heuristic() -> Self {
        Self {
            mode: BandwidthMode::MedianHeuristic,
            ..Self::default()
        }
    }

    pub fn grid_search(grid: Vec<f64>) -> Self {
        Self {
            mode: BandwidthMode::GridSearch,
            grid,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            BandwidthMode::Explicit => {
                if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
                    return Err(Error::Domain(format!(
                        "explicit bandwidth must be positive, got {}",
                        self.bandwidth
                    )));
                }
            }
            BandwidthMode::GridSearch => {
                if self.grid.is_empty() {
                    return Err(Error::Config("bandwidth grid is empty".into()));
                }
                if self.grid.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::Config("bandwidth grid must be positive".into()));
                }
                if self.grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("bandwidth grid must be strictly increasing".into()));
                }
            }
            BandwidthMode::MedianHeuristic => {}
        }
        Ok(())
    }
}

/// `n` paired observations of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl SampleSet {
    pub fn new(data: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "a sample set needs at least 2 rows, got {n}"
            )));
        }
        if d == 0 {
            return Err(Error::InvalidInput("sample dimension must be at least 1".into()));
        }
        if data.len() != n * d {
            return Err(Error::Shape(format!(
                "expected {n}x{d} = {} values, got {}",
                n * d,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { data, n, d })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Shape(format!(
                    "row {i} has length {} but row 0 has length {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(data, rows.len(), d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    /// Adds `offset` to every row.
    pub fn translated(&self, offset: &[f64]) -> Result<Self> {
        if offset.len() != self.d {
            return Err(Error::Shape(format!(
                "offset has length {} but samples have dimension {}",
                offset.len(),
                self.d
            )));
        }
        let data = self
            .rows()
            .flat_map(|r| r.iter().zip(offset).map(|(a, b)| a + b))
            .collect();
        Self::new(data, self.n, self.d)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("bandwidth must be positive, got {sigma}")))
    }
}

/// Gram matrix `K[i][j] = exp(-|x_i - x_j|^2 / (2 sigma^2))`, row-major `n x n`.
pub fn gaussian_kernel_matrix(samples: &SampleSet, sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let n = samples.n();
    let scale = 1.0 / (2.0 * sigma * sigma);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let v = (-squared_distance(samples.row(i), samples.row(j)) * scale).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Ok(k)
}

/// In-place double centering: `K <- H K H`.
fn double_center(k: &mut [f64], n: usize) {
    let inv = 1.0 / n as f64;
    let row_means: Vec<f64> = k.chunks_exact(n).map(|r| r.iter().sum::<f64>() * inv).collect();
    let grand = row_means.iter().sum::<f64>() * inv;
    // K is symmetric, so column means equal row means.
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += grand - row_means[i] - row_means[j];
        }
    }
}

fn hsic_from_grams(mut kx: Vec<f64>, mut ky: Vec<f64>, n: usize) -> f64 {
    double_center(&mut kx, n);
    double_center(&mut ky, n);
    let inner: f64 = kx.iter().zip(&ky).map(|(a, b)| a * b).sum();
    let denom = (n - 1) as f64;
    inner / (denom * denom)
}

/// Biased empirical HSIC, `tr(K_X H K_Y H) / (n-1)^2`.
pub fn hsic_biased(x: &SampleSet, y: &SampleSet, sigma_x: f64, sigma_y: f64) -> Result<f64> {
    if x.n() != y.n() {
        return Err(Error::Shape(format!(
            "paired sample sets differ in size: {} vs {}",
            x.n(),
            y.n()
        )));
    }
    let kx = gaussian_kernel_matrix(x, sigma_x)?;
    let ky = gaussian_kernel_matrix(y, sigma_y)?;
    Ok(hsic_from_grams(kx, ky, x.n()))
}

/// Paired samples for one step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSamples {
    pub x: SampleSet,
    pub y: SampleSet,
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median pairwise Euclidean distance between the given rows.
pub fn median_pairwise_distance<'a, I>(rows: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut pool: Vec<&[f64]> = rows.into_iter().collect();
    if pool.len() < 2 {
        return Err(Error::InsufficientData(
            "median heuristic needs at least two rows".into(),
        ));
    }
    if pool.len() > MEDIAN_POOL_CAP {
        let stride = pool.len() as f64 / MEDIAN_POOL_CAP as f64;
        pool = (0..MEDIAN_POOL_CAP)
            .map(|i| pool[(i as f64 * stride) as usize])
            .collect();
    }
    let mut dists = Vec::with_capacity(pool.len() * (pool.len() - 1) / 2);
    for i in 0..pool.len() {
        for j in (i + 1)..pool.len() {
            dists.push(squared_distance(pool[i], pool[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let med = median_of_sorted(&dists);
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::DegenerateInput(
            "median pairwise distance is zero (rows are mostly identical)".into(),
        ))
    }
}

fn sequence_with_sigma(steps: &[StepSamples], sigma: f64) -> Result<Vec<f64>> {
    steps.iter().map(|s| hsic_biased(&s.x, &s.y, sigma, sigma)).collect()
}

fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Picks the kernel bandwidth for a trajectory.
///
/// Grid search keeps the bandwidth whose MI sequence has the largest
/// coefficient of variation (`std / mean`); ties go to the smaller bandwidth.
pub fn select_bandwidth(steps: &[StepSamples], config: &KernelConfig) -> Result<f64> {
    config.validate()?;
    if steps.is_empty() {
        return Err(Error::EmptyInput);
    }
    match config.mode {
        BandwidthMode::Explicit => Ok(config.bandwidth),
        BandwidthMode::MedianHeuristic => {
            median_pairwise_distance(steps.iter().flat_map(|s| s.x.rows().chain(s.y.rows())))
        }
        BandwidthMode::GridSearch => {
            let mut best = (f64::NEG_INFINITY, config.grid[0]);
            for &sigma in &config.grid {
                let cv = coefficient_of_variation(&sequence_with_sigma(steps, sigma)?);
                if cv > best.0 {
                    best = (cv, sigma);
                }
            }
            Ok(best.1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiMode {
    /// One sample per trace at every step, paired with that trace's pooled gold vector.
    BatchAnchored,
    /// Sliding window of steps within one trace, paired with resampled gold rows.
    SingleTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    /// Minimum contributing traces per step in batch mode.
    pub n_min: usize,
    /// Window length in single-trace mode.
    pub window: usize,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self { n_min: 8, window: 16 }
    }
}

/// The sequence `m_1 .. m_T` together with the kernel that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSequence {
    pub values: Vec<f64>,
    pub mode: MiMode,
    pub kernel: KernelConfig,
    /// Bandwidth actually used for every step.
    pub sigma: f64,
    /// Contributing samples per step.
    pub coverage: Vec<usize>,
}

impl MiSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn widen(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

/// Builds the paired sample sets for every step, plus per-step coverage.
pub fn trajectory_samples(
    traces: &[RepresentationTrace],
    mode: MiMode,
    params: &TrajectoryParams,
) -> Result<(Vec<StepSamples>, Vec<usize>)> {
    match mode {
        MiMode::BatchAnchored => batch_samples(traces, params),
        MiMode::SingleTrace => single_samples(traces, params),
    }
}

fn batch_samples(traces: &[RepresentationTrace], params: &TrajectoryParams) -> Result<(Vec<StepSamples>, Vec<usize>)> {
    let n_min = params.n_min.max(2);
    if traces.len() < n_min {
        return Err(Error::InsufficientData(format!(
            "batch mode needs at least {n_min} traces, got {}",
            traces.len()
        )));
    }
    let d = traces[0].dim();
    if let Some(bad) = traces.iter().position(|t| t.dim() != d) {
        return Err(Error::Shape(format!(
            "trace {bad} has dimension {} but trace 0 has dimension {d}",
            traces[bad].dim()
        )));
    }
    let gold: Vec<Vec<f64>> = traces.iter().map(|t| t.pooled_gold()).collect();
    let mut steps = Vec::new();
    let mut coverage = Vec::new();
    for t in 0.. {
        let contributors: Vec<usize> = (0..traces.len()).filter(|&i| traces[i].steps() > t).collect();
        if contributors.len() < n_min {
            break;
        }
        let mut xs = Vec::with_capacity(contributors.len() * d);
        let mut ys = Vec::with_capacity(contributors.len() * d);
        for &i in &contributors {
            xs.extend(widen(traces[i].step_row(t)));
            ys.extend_from_slice(&gold[i]);
        }
        let n = contributors.len();
        steps.push(StepSamples {
            x: SampleSet::new(xs, n, d)?,
            y: SampleSet::new(ys, n, d)?,
        });
        coverage.push(n);
    }
    Ok((steps, coverage))
}

/// Index map `j -> round(j (m-1) / (w-1))` used to stretch `m` gold rows over a window of `w`.
pub fn resample_indices(m: usize, w: usize) -> Vec<usize> {
    if w == 1 {
        return vec![0];
    }
    (0..w)
        .map(|j| ((j * (m - 1)) as f64 / (w - 1) as f64).round() as usize)
        .collect()
}

fn single_samples(traces: &[RepresentationTrace], params: &TrajectoryParams) -> Result<(Vec<StepSamples>, Vec<usize>)> {
    let [trace] = traces else {
        return Err(Error::InvalidInput(format!(
            "single-trace mode takes exactly one trace, got {}",
            traces.len()
        )));
    };
    let w = params.window;
    if w < 2 {
        return Err(Error::Config(format!("window must be at least 2, got {w}")));
    }
    let t_len = trace.steps();
    if t_len < w {
        return Err(Error::InsufficientData(format!(
            "trace has {t_len} steps but the window is {w}"
        )));
    }
    let d = trace.dim();
    let mut ys = Vec::with_capacity(w * d);
    for g in resample_indices(trace.gold_rows(), w) {
        ys.extend(widen(trace.gold_row(g)));
    }
    let y = SampleSet::new(ys, w, d)?;
    let mut steps = Vec::with_capacity(t_len - w + 1);
    for end in (w - 1)..t_len {
        let start = end + 1 - w;
        let xs: Vec<f64> = (start..=end).flat_map(|s| widen(trace.step_row(s))).collect();
        steps.push(StepSamples {
            x: SampleSet::new(xs, w, d)?,
            y: y.clone(),
        });
    }
    Ok((steps, vec![w; t_len]))
}

/// Per-step MI estimates `I[h_t; h_y]` for `t = 1 .. T`.
pub fn mi_trajectory(
    traces: &[RepresentationTrace],
    config: &KernelConfig,
    mode: MiMode,
    params: &TrajectoryParams,
) -> Result<MiSequence> {
    config.validate()?;
    let (steps, coverage) = trajectory_samples(traces, mode, params)?;
    if steps.is_empty() {
        return Err(Error::InsufficientData("no step has enough contributors".into()));
    }
    let sigma = select_bandwidth(&steps, config)?;
    let per_step = sequence_with_sigma(&steps, sigma)?;
    let values = match mode {
        MiMode::BatchAnchored => per_step,
        MiMode::SingleTrace => {
            // Steps before the first full window reuse its value.
            let lead = coverage.len() - per_step.len();
            std::iter::repeat_n(per_step[0], lead).chain(per_step).collect()
        }
    };
    Ok(MiSequence {
        values,
        mode,
        kernel: config.clone(),
        sigma,
        coverage,
    })
}
