//! Exact t-SNE and scatter-plot export.
//!
//! Conditional affinities use a Gaussian kernel whose per-point bandwidth is
//! found by bisection on log-precision; the joint matrix is the symmetrized,
//! normalized average. The low-dimensional map uses the Student-t kernel and
//! is fitted by gradient descent on KL(P||Q) with momentum, per-coordinate
//! gains and early exaggeration. Everything is O(n^2) and single-threaded so
//! results are bit-reproducible for a fixed seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::embedding::Vector;

/// Numerical floor on joint affinities and on squared distances of duplicates.
pub const AFFINITY_FLOOR: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;

/// Ten-color categorical palette used by the SVG export.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("t-SNE needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid t-SNE config: {0}")]
    Config(String),
    #[error("non-finite values at iteration {iteration} (max |gradient| {max_gradient})")]
    NonFinite { iteration: usize, max_gradient: f64 },
    #[error("{coords} coordinates but {labels} labels")]
    LengthMismatch { coords: usize, labels: usize },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub out_dims: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration_factor: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch_iteration: usize,
    pub seed: u64,
    pub perplexity_tol: f64,
    pub perplexity_max_bisections: usize,
    pub init_std: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            out_dims: 2,
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration_factor: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iteration: 250,
            seed: 0,
            perplexity_tol: 1e-5,
            perplexity_max_bisections: 50,
            init_std: 1e-4,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<(), ProjectionError> {
        let bad = |m: &str| Err(ProjectionError::Config(m.to_string()));
        if self.out_dims == 0 {
            return bad("out_dims must be positive");
        }
        if !(self.perplexity > 0.0) {
            return bad("perplexity must be positive");
        }
        if self.iterations < 250 {
            return bad("iterations must be at least 250");
        }
        if !(self.learning_rate > 0.0 && self.early_exaggeration_factor > 0.0 && self.init_std > 0.0) {
            return bad("learning_rate, early_exaggeration_factor and init_std must be positive");
        }
        if !(self.perplexity_tol > 0.0) || self.perplexity_max_bisections == 0 {
            return bad("perplexity_tol and perplexity_max_bisections must be positive");
        }
        Ok(())
    }

    /// Perplexity actually used for `n` points: at most (n - 1) / 3, at least 2.
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        self.perplexity.min((n as f64 - 1.0) / 3.0).max(2.0)
    }
}

/// Row-stochastic P(j|i) with the bandwidth search results per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalAffinities {
    pub n: usize,
    /// Row-major n x n.
    pub p: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// 2^H of each row at the chosen bandwidth.
    pub perplexities: Vec<f64>,
}

/// Symmetric joint affinities summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub n: usize,
    /// Row-major n x n, zero diagonal.
    pub p: Vec<f64>,
}

impl AffinityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }
}

fn check_vectors(vectors: &[Vector]) -> Result<usize, ProjectionError> {
    if vectors.len() < 4 {
        return Err(ProjectionError::TooFewPoints(vectors.len()));
    }
    let dim = vectors[0].dim;
    for v in vectors {
        if v.values.len() != dim {
            return Err(ProjectionError::DimensionMismatch { expected: dim, got: v.values.len() });
        }
    }
    Ok(dim)
}

fn squared_distances(vectors: &[Vector]) -> Vec<f64> {
    let n = vectors.len();
    let mut d = vec![0.0; n * n];
    let mut duplicates = false;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s: f64 = vectors[i]
                .values
                .iter()
                .zip(&vectors[j].values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if s < AFFINITY_FLOOR {
                s = AFFINITY_FLOOR;
                duplicates = true;
            }
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    if duplicates {
        warn!("duplicate points found; squared distances floored at {AFFINITY_FLOOR}");
    }
    d
}

/// Fill `row` with exp(-beta * (d - d_min)) normalized, return perplexity.
fn row_at(dist: &[f64], i: usize, d_min: f64, beta: f64, row: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for (j, (&d, r)) in dist.iter().zip(row.iter_mut()).enumerate() {
        *r = if j == i { 0.0 } else { (-beta * (d - d_min)).exp() };
        sum += *r;
    }
    let mut entropy = 0.0;
    for r in row.iter_mut() {
        *r /= sum;
        if *r > 0.0 {
            entropy -= *r * r.ln();
        }
    }
    entropy.exp()
}

/// Per-row Gaussian affinities calibrated to `perplexity`.
pub fn conditional_affinities(
    vectors: &[Vector],
    perplexity: f64,
    tol: f64,
    max_bisections: usize,
) -> Result<ConditionalAffinities, ProjectionError> {
    check_vectors(vectors)?;
    let n = vectors.len();
    if !(perplexity >= 1.0 && perplexity <= (n - 1) as f64) {
        return Err(ProjectionError::Config(format!(
            "perplexity {perplexity} outside [1, {}]",
            n - 1
        )));
    }
    let dist = squared_distances(vectors);
    let mut p = vec![0.0; n * n];
    let mut sigmas = vec![0.0; n];
    let mut perplexities = vec![0.0; n];
    let mut row = vec![0.0; n];

    for i in 0..n {
        let drow = &dist[i * n..(i + 1) * n];
        let others = || drow.iter().enumerate().filter(move |&(j, _)| j != i).map(|(_, &d)| d);
        let d_min = others().fold(f64::INFINITY, f64::min);
        let d_max = others().fold(0.0, f64::max);
        // Gaps below this are rounding noise, not structure.
        let tie = 1e-10 * d_max;
        let min_gap = others().map(|d| d - d_min).filter(|&g| g > tie).fold(f64::INFINITY, f64::min);

        // Bracket on ln(beta): uniform at the low end, all mass on the
        // nearest neighbor(s) at the high end.
        let (mut lo, mut hi) = if d_max - d_min > tie {
            ((1e-10 / (d_max - d_min)).ln(), (800.0 / min_gap).ln())
        } else {
            let uniform = (1.0 / d_max).ln();
            (uniform, uniform)
        };
        let mut best: Option<(f64, f64, f64)> = None; // (|error|, beta, perplexity)
        for _ in 0..max_bisections.max(1) {
            let log_beta = 0.5 * (lo + hi);
            let beta = log_beta.exp();
            let perp = row_at(drow, i, d_min, beta, &mut row);
            let err = (perp - perplexity).abs();
            if best.is_none_or(|(e, _, _)| err < e) {
                best = Some((err, beta, perp));
            }
            if err <= tol || lo == hi {
                break;
            }
            if perp > perplexity {
                lo = log_beta;
            } else {
                hi = log_beta;
            }
        }
        let (_, beta, perp) = best.expect("at least one bisection step");
        row_at(drow, i, d_min, beta, &mut row);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
        sigmas[i] = (1.0 / (2.0 * beta)).sqrt();
        perplexities[i] = perp;
    }
    Ok(ConditionalAffinities { n, p, sigmas, perplexities })
}

/// p_ij = (P(j|i) + P(i|j)) / 2n, with off-diagonal entries floored at
/// [`AFFINITY_FLOOR`] and the remaining mass rescaled so the total stays one.
pub fn symmetrize(conditional: &[f64], n: usize) -> AffinityMatrix {
    assert_eq!(conditional.len(), n * n, "matrix must be n x n");
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64);
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    let below = p
        .iter()
        .enumerate()
        .filter(|&(idx, &v)| idx / n != idx % n && v < AFFINITY_FLOOR)
        .count();
    if below > 0 {
        let off_diag = n * (n - 1);
        let above_excess: f64 = p
            .iter()
            .enumerate()
            .filter(|&(idx, &v)| idx / n != idx % n && v >= AFFINITY_FLOOR)
            .map(|(_, &v)| v - AFFINITY_FLOOR)
            .sum();
        let scale = (1.0 - off_diag as f64 * AFFINITY_FLOOR) / above_excess;
        for (idx, v) in p.iter_mut().enumerate() {
            if idx / n == idx % n {
                continue;
            }
            *v = if *v < AFFINITY_FLOOR {
                AFFINITY_FLOOR
            } else {
                AFFINITY_FLOOR + (*v - AFFINITY_FLOOR) * scale
            };
        }
    }
    AffinityMatrix { n, p }
}

/// Joint affinities for `vectors` at the given perplexity.
pub fn joint_affinities(
    vectors: &[Vector],
    perplexity: f64,
    tol: f64,
    max_bisections: usize,
) -> Result<AffinityMatrix, ProjectionError> {
    let cond = conditional_affinities(vectors, perplexity, tol, max_bisections)?;
    Ok(symmetrize(&cond.p, cond.n))
}

/// Student-t numerators (1 + |y_i - y_j|^2)^-1 and their off-diagonal sum.
fn student_t(y: &[f64], n: usize, dims: usize) -> (Vec<f64>, f64) {
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d = 0.0;
            for k in 0..dims {
                let diff = y[i * dims + k] - y[j * dims + k];
                d += diff * diff;
            }
            let v = 1.0 / (1.0 + d);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (num, z)
}

/// KL(P || Q) in nats for a flat row-major embedding `y` of `dims` columns.
pub fn kl_divergence(p: &AffinityMatrix, y: &[f64], dims: usize) -> f64 {
    let n = p.n;
    let (num, z) = student_t(y, n, dims);
    kl_from(p, &num, z)
}

fn kl_from(p: &AffinityMatrix, num: &[f64], z: f64) -> f64 {
    let mut kl = 0.0;
    for (idx, (&pij, &nij)) in p.p.iter().zip(num).enumerate() {
        if idx / p.n == idx % p.n || pij <= 0.0 {
            continue;
        }
        kl += pij * (pij / (nij / z)).ln();
    }
    kl
}

fn gradient_from(p: &AffinityMatrix, exaggeration: f64, num: &[f64], z: f64, y: &[f64], dims: usize) -> Vec<f64> {
    let n = p.n;
    let mut grad = vec![0.0; n * dims];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let nij = num[i * n + j];
            let mult = 4.0 * (exaggeration * p.p[i * n + j] - nij / z) * nij;
            for k in 0..dims {
                grad[i * dims + k] += mult * (y[i * dims + k] - y[j * dims + k]);
            }
        }
    }
    grad
}

/// Analytic gradient of [`kl_divergence`] with respect to `y`.
pub fn kl_gradient(p: &AffinityMatrix, y: &[f64], dims: usize) -> Vec<f64> {
    let (num, z) = student_t(y, p.n, dims);
    gradient_from(p, 1.0, &num, z, y, dims)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneOutput {
    /// One `out_dims`-long row per input vector.
    pub coords: Vec<Vec<f64>>,
    /// KL(P||Q) before each update and after the last; `kl_trace[t]` is the
    /// objective after `t` updates.
    pub kl_trace: Vec<f64>,
    pub perplexity_used: f64,
}

impl TsneOutput {
    pub fn final_kl(&self) -> f64 {
        *self.kl_trace.last().expect("trace is never empty")
    }
}

/// Fit a t-SNE map of `vectors`.
pub fn tsne(vectors: &[Vector], cfg: &TsneConfig) -> Result<TsneOutput, ProjectionError> {
    cfg.validate()?;
    check_vectors(vectors)?;
    let n = vectors.len();
    let dims = cfg.out_dims;
    let perplexity = cfg.effective_perplexity(n);
    let p = joint_affinities(vectors, perplexity, cfg.perplexity_tol, cfg.perplexity_max_bisections)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| ProjectionError::Config(e.to_string()))?;
    let mut y: Vec<f64> = (0..n * dims).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; n * dims];
    let mut gains = vec![1.0f64; n * dims];
    let mut kl_trace = Vec::with_capacity(cfg.iterations + 1);

    for iter in 0..cfg.iterations {
        let (num, z) = student_t(&y, n, dims);
        kl_trace.push(kl_from(&p, &num, z));
        let exaggeration =
            if iter < cfg.exaggeration_iterations { cfg.early_exaggeration_factor } else { 1.0 };
        let momentum =
            if iter < cfg.momentum_switch_iteration { cfg.initial_momentum } else { cfg.final_momentum };
        let grad = gradient_from(&p, exaggeration, &num, z, &y, dims);

        let max_gradient = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !max_gradient.is_finite() || !kl_trace[iter].is_finite() {
            return Err(ProjectionError::NonFinite { iteration: iter, max_gradient });
        }
        for idx in 0..n * dims {
            gains[idx] = if (grad[idx] > 0.0) != (update[idx] > 0.0) {
                gains[idx] + 0.2
            } else {
                (gains[idx] * 0.8).max(MIN_GAIN)
            };
            update[idx] = momentum * update[idx] - cfg.learning_rate * gains[idx] * grad[idx];
            y[idx] += update[idx];
        }
        recenter(&mut y, n, dims);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ProjectionError::NonFinite { iteration: iter, max_gradient });
        }
    }
    kl_trace.push(kl_divergence(&p, &y, dims));

    let coords = y.chunks(dims).map(<[f64]>::to_vec).collect();
    Ok(TsneOutput { coords, kl_trace, perplexity_used: perplexity })
}

fn recenter(y: &mut [f64], n: usize, dims: usize) {
    for k in 0..dims {
        let mean = (0..n).map(|i| y[i * dims + k]).sum::<f64>() / n as f64;
        for i in 0..n {
            y[i * dims + k] -= mean;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterFormat {
    Csv,
    Svg,
}

/// Write a labeled scatter plot. Output bytes depend only on the inputs.
pub fn scatter_export(
    coords: &[Vec<f64>],
    labels: &[String],
    path: &Path,
    format: ScatterFormat,
) -> Result<(), ProjectionError> {
    if coords.len() != labels.len() {
        return Err(ProjectionError::LengthMismatch { coords: coords.len(), labels: labels.len() });
    }
    let body = match format {
        ScatterFormat::Csv => scatter_csv(coords, labels),
        ScatterFormat::Svg => scatter_svg(coords, labels),
    };
    fs::write(path, body)
        .map_err(|source| ProjectionError::Io { path: path.display().to_string(), source })
}

fn xy(c: &[f64]) -> (f64, f64) {
    (c.first().copied().unwrap_or(0.0), c.get(1).copied().unwrap_or(0.0))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn scatter_csv(coords: &[Vec<f64>], labels: &[String]) -> String {
    let mut out = String::from("x,y,label\n");
    for (c, label) in coords.iter().zip(labels) {
        let (x, y) = xy(c);
        writeln!(out, "{x},{y},{}", csv_field(label)).expect("writing to String");
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Label order is first appearance; colors cycle through [`PALETTE`].
pub fn scatter_svg(coords: &[Vec<f64>], labels: &[String]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 600.0;
    const PLOT_W: f64 = 600.0;
    const MARGIN: f64 = 30.0;

    let mut legend: Vec<&str> = Vec::new();
    for l in labels {
        if !legend.contains(&l.as_str()) {
            legend.push(l);
        }
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        let (x, y) = xy(c);
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (xs, ys) = (span(xmin, xmax), span(ymin, ymax));

    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    )
    .unwrap();
    writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"#ffffff\"/>").unwrap();
    for (c, label) in coords.iter().zip(labels) {
        let (x, y) = xy(c);
        let px = MARGIN + (x - xmin) / xs * (PLOT_W - 2.0 * MARGIN);
        let py = H - MARGIN - (y - ymin) / ys * (H - 2.0 * MARGIN);
        let color = PALETTE[legend.iter().position(|l| l == label).unwrap_or(0) % PALETTE.len()];
        writeln!(
            out,
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.8\"><title>{}</title></circle>",
            xml_escape(label)
        )
        .unwrap();
    }
    writeln!(out, "<g font-family=\"sans-serif\" font-size=\"12\">").unwrap();
    for (i, label) in legend.iter().enumerate() {
        let y = MARGIN + 20.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"{color}\"/><text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            PLOT_W + 20.0,
            PLOT_W + 32.0,
            y + 4.0,
            xml_escape(label)
        )
        .unwrap();
    }
    out.push_str("</g>\n</svg>\n");
    out
}

/// Optional sidecar recording how a projection was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSidecar {
    pub config: TsneConfig,
    pub seed: u64,
    pub perplexity_used: f64,
    pub final_kl: f64,
    pub points: usize,
}
