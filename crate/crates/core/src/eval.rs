//! Downstream evaluation and numerical checks of the contrastive bounds.
//!
//! Covers the mean-classifier cross entropy, the linear probe, the
//! conditional feature variance, the alignment error, Monte-Carlo InfoNCE and
//! log-sum-exp estimates, and the combined [`BoundsReport`].

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{infonce_term, log_sum_exp, Encoder, PairMode};
use crate::error::{invalid, Error, Result};
use crate::graph::{AugmentationGraph, Diameter};
use crate::sphere::{augment, dot, norm, LabeledSphereDataset};

/// Rows further than this from unit norm are re-normalized on import.
pub const FEATURE_NORM_TOL: f64 = 1e-6;
const ROUNDING_TOL: f64 = 1e-12;

/// Labeled representations `z = f(x)`, one unit-norm row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    num_classes: usize,
    /// Set when at least one row had to be re-normalized.
    pub renormalized: bool,
}

impl FeatureTable {
    pub fn new(ids: Vec<usize>, labels: Vec<usize>, mut features: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != labels.len() || labels.len() != features.len() {
            return Err(invalid("ids, labels and features must have equal length"));
        }
        let dim = features.first().map_or(0, Vec::len);
        if let Some(row) = features.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        let mut renormalized = false;
        for row in features.iter_mut() {
            let n = norm(row);
            if !n.is_finite() || n == 0.0 {
                return Err(invalid("feature rows must be finite and non-zero"));
            }
            if (n - 1.0).abs() > FEATURE_NORM_TOL {
                row.iter_mut().for_each(|v| *v /= n);
                renormalized = true;
            }
        }
        if renormalized {
            log::warn!("feature rows were not unit-norm and have been re-normalized");
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            ids,
            labels,
            features,
            num_classes,
            renormalized,
        })
    }

    /// Features of the natural samples of `dataset`.
    pub fn from_encoder<E: Encoder + ?Sized>(enc: &E, dataset: &LabeledSphereDataset) -> Result<Self> {
        let features: Vec<Vec<f64>> = dataset.points.par_iter().map(|p| enc.embed(p)).collect();
        let mut t = Self::new((0..dataset.len()).collect(), dataset.labels.clone(), features)?;
        t.num_classes = t.num_classes.max(dataset.num_classes());
        Ok(t)
    }

    /// Features of one fresh augmented view per sample, labeled by its source.
    pub fn from_views<E: Encoder + ?Sized, R: Rng + ?Sized>(
        enc: &E,
        dataset: &LabeledSphereDataset,
        r: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let views = dataset
            .points
            .iter()
            .map(|p| augment(p, r, rng))
            .collect::<Result<Vec<_>>>()?;
        let features: Vec<Vec<f64>> = views.par_iter().map(|v| enc.embed(v)).collect();
        let mut t = Self::new((0..dataset.len()).collect(), dataset.labels.clone(), features)?;
        t.num_classes = t.num_classes.max(dataset.num_classes());
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn with_num_classes(mut self, k: usize) -> Self {
        self.num_classes = self.num_classes.max(k);
        self
    }

    /// Writes `id,label,z0,...,z{m-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim()).map(|i| format!("z{i}")));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.ids[i].to_string(), self.labels[i].to_string()];
            row.extend(self.features[i].iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the `id,label,z0,...` format, from this crate or any external model.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
            return Err(Error::Parse(
                "feature table header must be id,label,z0,...".into(),
            ));
        }
        let (mut ids, mut labels, mut features) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            ids.push(parse_field::<usize>(&rec[0], "id")?);
            labels.push(parse_field::<usize>(&rec[1], "label")?);
            features.push(
                rec.iter()
                    .skip(2)
                    .map(|s| parse_field::<f64>(s, "feature"))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::new(ids, labels, features)
    }
}

pub(crate) fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim()
        .parse()
        .map_err(|e| Error::Parse(format!("{what} {s:?}: {e}")))
}

fn class_sizes(t: &FeatureTable) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; t.num_classes()];
    for &l in &t.labels {
        counts[l] += 1;
    }
    match counts.iter().position(|&c| c == 0) {
        Some(k) => Err(Error::EmptyClass(k)),
        None => Ok(counts),
    }
}

/// Per-class mean representation `μ_k` (not re-normalized).
pub fn class_means(t: &FeatureTable) -> Result<Vec<Vec<f64>>> {
    let counts = class_sizes(t)?;
    let mut means = vec![vec![0.0; t.dim()]; t.num_classes()];
    for (row, &l) in t.features.iter().zip(&t.labels) {
        for (m, v) in means[l].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(means)
}

/// Cross entropy of the classifier whose weights are the class means.
pub fn mean_ce_loss(t: &FeatureTable) -> Result<f64> {
    let means = class_means(t)?;
    if t.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = t
        .features
        .iter()
        .zip(&t.labels)
        .map(|(z, &y)| {
            let logits: Vec<f64> = means.iter().map(|mu| dot(z, mu)).collect();
            log_sum_exp(&logits) - logits[y]
        })
        .sum();
    Ok(total / t.len() as f64)
}

/// `E_y E_{x|y} ‖f(x) − μ_y‖²` with empirical class weights.
pub fn conditional_variance(t: &FeatureTable) -> Result<f64> {
    let means = class_means(t)?;
    if t.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = t
        .features
        .iter()
        .zip(&t.labels)
        .map(|(z, &y)| z.iter().zip(&means[y]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok(total / t.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub max_iter: usize,
    /// Stop once the Frobenius norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Fixed step; defaults to `1/L` with `L` the smoothness constant of the loss.
    pub learning_rate: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            grad_tol: 1e-5,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `K × m` weights of `g(z) = W z`.
    pub weights: Vec<Vec<f64>>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

const PROBE_CHUNK: usize = 2048;

/// Loss and gradient of the multinomial logistic loss, reduced over fixed
/// row chunks in order so results do not depend on thread count.
fn probe_loss_grad(w: &[Vec<f64>], t: &FeatureTable) -> (f64, Vec<Vec<f64>>) {
    let k = w.len();
    let m = t.dim();
    let partials: Vec<(f64, Vec<Vec<f64>>)> = t
        .features
        .par_chunks(PROBE_CHUNK)
        .zip(t.labels.par_chunks(PROBE_CHUNK))
        .map(|(rows, labels)| {
            let mut loss = 0.0;
            let mut g = vec![vec![0.0; m]; k];
            let mut logits = vec![0.0; k];
            for (z, &y) in rows.iter().zip(labels) {
                for (c, wc) in w.iter().enumerate() {
                    logits[c] = dot(wc, z);
                }
                let lse = log_sum_exp(&logits);
                loss += lse - logits[y];
                for c in 0..k {
                    let coef = (logits[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
                    for (gv, zv) in g[c].iter_mut().zip(z) {
                        *gv += coef * zv;
                    }
                }
            }
            (loss, g)
        })
        .collect();
    let n = t.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; m]; k];
    for (l, g) in partials {
        loss += l;
        for (acc, part) in grad.iter_mut().zip(&g) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    grad.iter_mut().flatten().for_each(|v| *v /= n);
    (loss / n, grad)
}

/// Largest eigenvalue of `ZᵀZ / n` by power iteration.
fn second_moment_top_eigenvalue(t: &FeatureTable) -> f64 {
    let m = t.dim();
    let n = t.len() as f64;
    let mut cov = vec![vec![0.0; m]; m];
    for z in &t.features {
        for a in 0..m {
            for b in 0..m {
                cov[a][b] += z[a] * z[b] / n;
            }
        }
    }
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = cov.iter().map(|row| dot(row, &v)).collect();
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        lambda = nw / norm(&v);
        v = w.into_iter().map(|x| x / nw).collect();
    }
    lambda
}

/// Index of the largest score; ties go to the smallest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn predict(weights: &[Vec<f64>], z: &[f64]) -> usize {
    let logits: Vec<f64> = weights.iter().map(|w| dot(w, z)).collect();
    argmax(&logits)
}

pub fn accuracy(weights: &[Vec<f64>], t: &FeatureTable) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    let hits = t
        .features
        .iter()
        .zip(&t.labels)
        .filter(|(z, &y)| predict(weights, z) == y)
        .count();
    hits as f64 / t.len() as f64
}

/// Multinomial logistic regression `g(z) = W z` on frozen features, fit by
/// deterministic full-batch gradient descent from `W = 0`.
pub fn linear_probe(train: &FeatureTable, test: &FeatureTable, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.dim() != test.dim() && !test.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            got: test.dim(),
        });
    }
    let mut present: Vec<usize> = train.labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(invalid("linear probe needs at least two classes in the training set"));
    }
    let k = train.num_classes().max(test.num_classes());
    let m = train.dim();
    let lr = match cfg.learning_rate {
        Some(lr) => lr,
        None => {
            // Softmax cross entropy has Hessian ≼ ½ · (ZᵀZ/n) ⊗ I.
            let smooth = 0.5 * second_moment_top_eigenvalue(train);
            if smooth > 0.0 {
                1.0 / smooth
            } else {
                1.0
            }
        }
    };
    let mut w = vec![vec![0.0; m]; k];
    let mut iterations = 0;
    let mut converged = false;
    let (mut loss, mut grad) = probe_loss_grad(&w, train);
    while iterations < cfg.max_iter {
        let gnorm = grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < cfg.grad_tol {
            converged = true;
            break;
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, b) in wc.iter_mut().zip(gc) {
                *a -= lr * b;
            }
        }
        (loss, grad) = probe_loss_grad(&w, train);
        iterations += 1;
    }
    if !converged {
        let gnorm = grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        converged = gnorm < cfg.grad_tol;
    }
    Ok(ProbeResult {
        train_acc: accuracy(&w, train),
        test_acc: accuracy(&w, test),
        weights: w,
        train_loss: loss,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEstimate {
    pub max_eps: f64,
    pub mean_eps: f64,
    pub n_pairs: usize,
}

/// Empirical `‖f(x) − f(x⁺)‖` over sampled positive pairs. The maximum is an
/// estimate of the supremum over the pair distribution.
pub fn alignment_error<E: Encoder + ?Sized, R: Rng + ?Sized>(
    enc: &E,
    dataset: &LabeledSphereDataset,
    r: f64,
    n_pairs: usize,
    mode: PairMode,
    rng: &mut R,
) -> Result<AlignmentEstimate> {
    if n_pairs < 1 {
        return Err(invalid("n_pairs must be >= 1"));
    }
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let x = &dataset.points[rng.random_range(0..dataset.len())];
        let a = match mode {
            PairMode::NaturalAnchor => x.clone(),
            PairMode::TwoViews => augment(x, r, rng)?,
        };
        pairs.push((a, augment(x, r, rng)?));
    }
    let eps: Vec<f64> = pairs
        .par_iter()
        .map(|(a, b)| {
            let (fa, fb) = (enc.embed(a), enc.embed(b));
            fa.iter().zip(&fb).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    Ok(AlignmentEstimate {
        max_eps: eps.iter().copied().fold(0.0, f64::max),
        mean_eps: eps.iter().sum::<f64>() / n_pairs as f64,
        n_pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoNceEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_anchors: usize,
    #[serde(rename = "M")]
    pub negatives: usize,
}

const ANCHOR_CHUNK: usize = 64;

/// Monte-Carlo InfoNCE with a fresh positive and `M` fresh negatives per anchor.
///
/// Anchors are split into fixed chunks, each with its own generator seeded
/// from `rng`, so the estimate is deterministic under parallel evaluation.
pub fn empirical_infonce<E: Encoder + ?Sized, R: Rng + ?Sized>(
    enc: &E,
    dataset: &LabeledSphereDataset,
    r: f64,
    negatives: usize,
    n_anchors: usize,
    mode: PairMode,
    rng: &mut R,
) -> Result<InfoNceEstimate> {
    if negatives < 1 {
        return Err(invalid("M must be >= 1"));
    }
    if n_anchors < 2 {
        return Err(invalid("need at least two anchors for a standard error"));
    }
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let chunks = n_anchors.div_ceil(ANCHOR_CHUNK);
    let seeds: Vec<u64> = (0..chunks).map(|_| rng.random()).collect();
    let n = dataset.len();
    let per_chunk: Vec<Vec<f64>> = seeds
        .par_iter()
        .enumerate()
        .map(|(c, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = ANCHOR_CHUNK.min(n_anchors - c * ANCHOR_CHUNK);
            (0..count)
                .map(|_| {
                    let x = &dataset.points[rng.random_range(0..n)];
                    let a = match mode {
                        PairMode::NaturalAnchor => x.clone(),
                        PairMode::TwoViews => augment(x, r, &mut rng)?,
                    };
                    let p = augment(x, r, &mut rng)?;
                    let negs = (0..negatives)
                        .map(|_| {
                            let j = rng.random_range(0..n);
                            augment(&dataset.points[j], r, &mut rng).map(|v| enc.embed(&v))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(infonce_term(&enc.embed(&a), &enc.embed(&p), &negs))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_chunk.into_iter().flatten().collect();
    let (mean, se) = mean_and_se(&values);
    Ok(InfoNceEstimate {
        mean,
        std_error: se,
        n_anchors,
        negatives,
    })
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LseErrorPoint {
    #[serde(rename = "M")]
    pub m: usize,
    pub mean_abs_error: f64,
    pub std_error: f64,
}

/// Mean `|LSE_M − LSE|` where `LSE = log mean_j exp(aᵀz_j)` over the whole
/// pool and `LSE_M` uses `M` rows drawn with replacement. Each trial draws one
/// anchor shared by every `M`.
pub fn lse_error_between<R: Rng + ?Sized>(
    anchors: &[Vec<f64>],
    pool: &[Vec<f64>],
    m_list: &[usize],
    trials: usize,
    rng: &mut R,
) -> Result<Vec<LseErrorPoint>> {
    if anchors.is_empty() || pool.is_empty() {
        return Err(invalid("empty feature set"));
    }
    if trials < 1 {
        return Err(invalid("trials must be >= 1"));
    }
    if let Some(&m) = m_list.iter().find(|&&m| m < 1 || m > pool.len()) {
        return Err(invalid(format!("M = {m} must lie in [1, {}]", pool.len())));
    }
    let n = pool.len();
    let mut errors = vec![Vec::with_capacity(trials); m_list.len()];
    for _ in 0..trials {
        let a = &anchors[rng.random_range(0..anchors.len())];
        let all: Vec<f64> = pool.par_iter().map(|z| dot(a, z)).collect();
        let exact = log_sum_exp(&all) - (n as f64).ln();
        for (slot, &m) in m_list.iter().enumerate() {
            let sample: Vec<f64> = (0..m).map(|_| all[rng.random_range(0..n)]).collect();
            let est = log_sum_exp(&sample) - (m as f64).ln();
            errors[slot].push((est - exact).abs());
        }
    }
    Ok(m_list
        .iter()
        .zip(errors)
        .map(|(&m, e)| {
            let (mean, se) = mean_and_se(&e);
            LseErrorPoint {
                m,
                mean_abs_error: mean,
                std_error: se,
            }
        })
        .collect())
}

/// Monte-Carlo log-sum-exp error within a single feature table.
pub fn lse_approximation_error<R: Rng + ?Sized>(
    t: &FeatureTable,
    m_list: &[usize],
    trials: usize,
    rng: &mut R,
) -> Result<Vec<LseErrorPoint>> {
    lse_error_between(&t.features, &t.features, m_list, trials, rng)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    pub n_anchors: usize,
    pub eps_pairs: usize,
    pub lse_trials: usize,
    pub pair_mode: PairMode,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            n_anchors: 4000,
            eps_pairs: 10_000,
            lse_trials: 500,
            pair_mode: PairMode::TwoViews,
        }
    }
}

/// Every quantity entering the two-sided bounds, and whether they hold.
///
/// `lhs = L_ce_mu + log(M/K)`. The upper line is `L_nce + sqrt(Var)` and the
/// lower line `L_nce − sqrt(Var) − Var/2`; each check allows `slack =
/// 3·se(L_nce) + A(M)` plus a relative rounding allowance. The weak-alignment line replaces `sqrt(Var)` with
/// `D·ε` and is only evaluated for a finite diameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    #[serde(rename = "L_nce")]
    pub l_nce: f64,
    #[serde(rename = "L_nce_std_error")]
    pub l_nce_std_error: f64,
    #[serde(rename = "L_ce_mu")]
    pub l_ce_mu: f64,
    pub var_cond: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "log_M_over_K")]
    pub log_m_over_k: f64,
    pub epsilon: f64,
    pub epsilon_mean: f64,
    #[serde(rename = "diameter_D")]
    pub diameter_d: Option<Diameter>,
    pub lse_error_estimate: f64,
    pub upper_line: f64,
    pub lower_line: f64,
    pub upper_slack: f64,
    pub lower_slack: f64,
    pub upper_holds: bool,
    pub lower_holds: bool,
    pub weak_upper_line: Option<f64>,
    pub weak_lower_line: Option<f64>,
    pub weak_upper_holds: Option<bool>,
    pub weak_lower_holds: Option<bool>,
}

impl BoundsReport {
    /// `L_ce_mu + log(M/K)`.
    pub fn lhs(&self) -> f64 {
        self.l_ce_mu + self.log_m_over_k
    }

    /// `|L_ce_mu + log(M/K) − L_nce|`.
    pub fn gap(&self) -> f64 {
        (self.lhs() - self.l_nce).abs()
    }
}

/// Evaluates all bound quantities for `enc` on `dataset` at strength `r`.
///
/// With [`PairMode::TwoViews`] the downstream table, the positives and the
/// negatives all follow the view distribution, so the pair distribution is
/// symmetric with matching marginals.
pub fn bounds_report<E: Encoder + ?Sized>(
    enc: &E,
    dataset: &LabeledSphereDataset,
    r: f64,
    negatives: usize,
    graph: Option<&AugmentationGraph>,
    cfg: &BoundsConfig,
    seed: u64,
) -> Result<BoundsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = dataset.num_classes();
    let table = match cfg.pair_mode {
        PairMode::NaturalAnchor => FeatureTable::from_encoder(enc, dataset)?,
        PairMode::TwoViews => FeatureTable::from_views(enc, dataset, r, &mut rng)?,
    }
    .with_num_classes(k);
    let l_ce_mu = mean_ce_loss(&table)?;
    let var_cond = conditional_variance(&table)?;
    let nce = empirical_infonce(enc, dataset, r, negatives, cfg.n_anchors, cfg.pair_mode, &mut rng)?;
    let align = alignment_error(enc, dataset, r, cfg.eps_pairs, cfg.pair_mode, &mut rng)?;

    let pool = FeatureTable::from_views(enc, dataset, r, &mut rng)?;
    let m_eff = negatives.min(pool.len());
    let lse = lse_error_between(&table.features, &pool.features, &[m_eff], cfg.lse_trials, &mut rng)?;
    let lse_error_estimate = lse[0].mean_abs_error;

    let diameter_d = graph.map(|g| g.intra_class_diameter()).transpose()?.map(|d| d.max);

    let log_m_over_k = (negatives as f64 / k as f64).ln();
    let lhs = l_ce_mu + log_m_over_k;
    // Rounding allowance so an exactly tight bound (constant encoder) still holds.
    let slack = 3.0 * nce.std_error + lse_error_estimate + ROUNDING_TOL * lhs.abs().max(1.0);
    let sd = var_cond.sqrt();
    let upper_line = nce.mean + sd;
    let lower_line = nce.mean - sd - 0.5 * var_cond;
    let eps = align.max_eps;
    let (weak_upper_line, weak_lower_line) = match diameter_d.and_then(Diameter::finite) {
        Some(d) => {
            let de = d as f64 * eps;
            (Some(nce.mean + de), Some(nce.mean - de - 0.5 * de * de))
        }
        None => (None, None),
    };
    Ok(BoundsReport {
        l_nce: nce.mean,
        l_nce_std_error: nce.std_error,
        l_ce_mu,
        var_cond,
        m: negatives,
        k,
        log_m_over_k,
        epsilon: eps,
        epsilon_mean: align.mean_eps,
        diameter_d,
        lse_error_estimate,
        upper_line,
        lower_line,
        upper_slack: slack,
        lower_slack: slack,
        upper_holds: lhs <= upper_line + slack,
        lower_holds: lhs >= lower_line - slack,
        weak_upper_line,
        weak_lower_line,
        weak_upper_holds: weak_upper_line.map(|u| lhs <= u + slack),
        weak_lower_holds: weak_lower_line.map(|l| lhs >= l - slack),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleResult {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: usize,
    pub probe_acc: f64,
    pub train_acc: f64,
    pub chance: f64,
    pub var_cond: f64,
    pub max_class_mean_norm: f64,
    #[serde(skip)]
    pub table: Option<FeatureTable>,
}

/// Features uniform on `S^{m−1}` with labels drawn independently of them.
///
/// Positive pairs share a row, so alignment is perfect by construction. The
/// probe is fit on the first 80% of rows and scored on the rest.
pub fn uniform_counterexample(n: usize, k: usize, m: usize, seed: u64) -> Result<CounterexampleResult> {
    if k < 2 {
        return Err(invalid("need at least two classes"));
    }
    if n < 100 * k {
        return Err(invalid(format!("N = {n} must be at least 100·K = {}", 100 * k)));
    }
    if m < 2 {
        return Err(invalid("feature dimension must be >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let g: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let nrm = norm(&g);
        features.push(g.into_iter().map(|v| v / nrm).collect::<Vec<f64>>());
        labels.push(rng.random_range(0..k));
    }
    let table = FeatureTable::new((0..n).collect(), labels, features)?.with_num_classes(k);
    let cut = n * 4 / 5;
    let split = |range: std::ops::Range<usize>| {
        FeatureTable::new(
            table.ids[range.clone()].to_vec(),
            table.labels[range.clone()].to_vec(),
            table.features[range].to_vec(),
        )
        .map(|t| t.with_num_classes(k))
    };
    let train = split(0..cut)?;
    let test = split(cut..n)?;
    let probe = linear_probe(&train, &test, &ProbeConfig::default())?;
    let var_cond = conditional_variance(&table)?;
    let max_class_mean_norm = class_means(&table)?
        .iter()
        .map(|mu| norm(mu))
        .fold(0.0, f64::max);
    Ok(CounterexampleResult {
        n,
        k,
        m,
        probe_acc: probe.test_acc,
        train_acc: probe.train_acc,
        chance: 1.0 / k as f64,
        var_cond,
        max_class_mean_norm,
        table: Some(table),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ConstantEncoder;
    use crate::sphere::{pole_centers, make_dataset, CapSize, UnitVector};

    fn table(labels: &[usize], rows: &[&[f64]]) -> FeatureTable {
        FeatureTable::new(
            (0..labels.len()).collect(),
            labels.to_vec(),
            rows.iter().map(|r| r.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn class_means_cases() {
        let t = table(&[0, 1], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(class_means(&t).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let t = table(&[0, 0], &[&[0.6, 0.8], &[-0.6, -0.8]]);
        let mu = &class_means(&t).unwrap()[0];
        assert!(norm(mu) < 1e-15);
        let t = table(&[0, 0, 0], &[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        assert!((norm(&class_means(&t).unwrap()[0]) - 1.0).abs() < 1e-15);
        let t = table(&[0, 2], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(class_means(&t), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn mean_ce_cases() {
        let t = table(&[0, 0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(mean_ce_loss(&t).unwrap().abs() < 1e-15);
        // identical class means give equal logits
        let t = table(&[0, 1, 0, 1], &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        assert!((mean_ce_loss(&t).unwrap() - 2f64.ln()).abs() < 1e-12);
        let t = table(&[0, 0, 1, 1], &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let expected = -1.0 + (std::f64::consts::E + 1.0).ln();
        assert!((mean_ce_loss(&t).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn conditional_variance_cases() {
        let t = table(&[0, 0, 1], &[&[0.6, 0.8], &[0.6, 0.8], &[1.0, 0.0]]);
        assert!(conditional_variance(&t).unwrap().abs() < 1e-15);
        let t = table(&[0, 0], &[&[0.6, 0.8], &[-0.6, -0.8]]);
        assert!((conditional_variance(&t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn import_renormalizes_with_flag() {
        let t = FeatureTable::new(vec![0], vec![0], vec![vec![3.0, 4.0]]).unwrap();
        assert!(t.renormalized);
        assert_eq!(t.features[0], vec![0.6, 0.8]);
        let csv = "id,label,z0,z1\n0,1,3,4\n1,0,1,0\n";
        let t = FeatureTable::read_csv(csv.as_bytes()).unwrap();
        assert!(t.renormalized);
        assert_eq!(t.num_classes(), 2);
        assert!(FeatureTable::read_csv("a,b,c\n1,2,3\n".as_bytes()).is_err());
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(FeatureTable::read_csv(buf.as_slice()).unwrap().features, t.features);
    }

    #[test]
    fn probe_separable_and_single_class() {
        let train = table(&[0, 1, 0, 1], &[&[1.0, 0.0], &[-1.0, 0.0], &[0.9, 0.1], &[-0.9, 0.1]]);
        let test = table(&[0, 1], &[&[1.0, 0.0], &[-1.0, 0.0]]);
        let res = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert_eq!(res.test_acc, 1.0);
        assert_eq!(res.train_acc, 1.0);
        let single = table(&[0, 0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(linear_probe(&single, &test, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn alignment_zero_cases() {
        let ds = make_dataset(&pole_centers(), 20, CapSize::Area(1.0), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ConstantEncoder(UnitVector::basis(4, 1));
        let a = alignment_error(&enc, &ds, 0.5, 100, PairMode::TwoViews, &mut rng).unwrap();
        assert_eq!(a.max_eps, 0.0);
        let id = crate::encoder::IdentityEncoder { dim: 3 };
        let a = alignment_error(&id, &ds, 0.0, 100, PairMode::NaturalAnchor, &mut rng).unwrap();
        assert_eq!(a.max_eps, 0.0);
        let a = alignment_error(&id, &ds, 3.0, 500, PairMode::NaturalAnchor, &mut rng).unwrap();
        assert!(a.max_eps <= 2.0 && a.max_eps > 0.0);
        assert!(alignment_error(&id, &ds, 0.1, 0, PairMode::NaturalAnchor, &mut rng).is_err());
    }

    #[test]
    fn constant_encoder_infonce_is_log_m() {
        let ds = make_dataset(&pole_centers(), 20, CapSize::Area(1.0), 1).unwrap();
        let enc = ConstantEncoder(UnitVector::basis(4, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [8usize, 32] {
            let e = empirical_infonce(&enc, &ds, 0.1, m, 50, PairMode::NaturalAnchor, &mut rng).unwrap();
            assert!((e.mean - (m as f64).ln()).abs() < 1e-12);
            assert!(e.std_error < 1e-12);
        }
        assert!(empirical_infonce(&enc, &ds, 0.1, 0, 50, PairMode::NaturalAnchor, &mut rng).is_err());
    }

    #[test]
    fn lse_error_constant_features_is_zero() {
        let row: &[f64] = &[1.0, 0.0];
        let t = table(&[0, 0, 0, 0], &[row; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = lse_approximation_error(&t, &[1, 2, 4], 20, &mut rng).unwrap();
        assert!(pts.iter().all(|p| p.mean_abs_error < 1e-12));
        assert!(lse_approximation_error(&t, &[5], 20, &mut rng).is_err());
    }

    #[test]
    fn loglog_slope_recovers_power() {
        let xs = [8.0, 32.0, 128.0, 512.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((loglog_slope(&xs, &ys) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn counterexample_preconditions() {
        assert!(uniform_counterexample(100, 2, 16, 0).is_err());
        let r = uniform_counterexample(2000, 2, 8, 0).unwrap();
        assert!(r.probe_acc < 0.6);
        assert!(r.var_cond > 0.9);
    }
}
