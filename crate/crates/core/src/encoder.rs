//! Single-hidden-layer encoder onto the unit sphere, the InfoNCE objective
//! with exact gradients, and the contrastive training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sphere::{augment, dot, norm, LabeledSphereDataset, UnitVector};

/// Pre-normalization norms below this map to the fallback direction `e_0`.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Anything that maps inputs to points on the unit sphere.
pub trait Encoder: Sync {
    fn output_dim(&self) -> usize;
    fn embed(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Softmax,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct EncoderParams {
    input_dim: usize,
    hidden: usize,
    output: usize,
    pub activation: Activation,
    /// `hidden × input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `output × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// On-disk layout with an explicit shape header.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    h: usize,
    d: usize,
    m: usize,
    activation: Activation,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl From<EncoderParams> for Checkpoint {
    fn from(p: EncoderParams) -> Self {
        Checkpoint {
            h: p.hidden,
            d: p.input_dim,
            m: p.output,
            activation: p.activation,
            w1: p.w1,
            b1: p.b1,
            w2: p.w2,
            b2: p.b2,
        }
    }
}

impl TryFrom<Checkpoint> for EncoderParams {
    type Error = Error;
    fn try_from(c: Checkpoint) -> Result<Self> {
        let p = EncoderParams {
            input_dim: c.d,
            hidden: c.h,
            output: c.m,
            activation: c.activation,
            w1: c.w1,
            b1: c.b1,
            w2: c.w2,
            b2: c.b2,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Intermediate values of one forward pass, kept for backprop.
struct ForwardTrace {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    raw_norm: f64,
    z: Vec<f64>,
}

impl EncoderParams {
    /// Entries drawn i.i.d. uniform on `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output == 0 {
            return Err(invalid("encoder dimensions must be positive"));
        }
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-s..=s)).collect()
        };
        let w1 = draw(hidden * input_dim, s1);
        let b1 = draw(hidden, s1);
        let w2 = draw(output * hidden, s2);
        let b2 = draw(output, s2);
        Ok(Self {
            input_dim,
            hidden,
            output,
            activation,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(input_dim: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden,
            output,
            activation,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    fn validate(&self) -> Result<()> {
        let expect = [
            ("w1", self.w1.len(), self.hidden * self.input_dim),
            ("b1", self.b1.len(), self.hidden),
            ("w2", self.w2.len(), self.output * self.hidden),
            ("b2", self.b2.len(), self.output),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Parse(format!(
                    "{name} has {got} entries, shape header implies {want}"
                )));
            }
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in the order `w1, b1, w2, b2`.
    pub fn flat(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut rest = values;
        for buf in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(buf.len());
            buf.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> ForwardTrace {
        let h = self.hidden;
        let mut pre = self.b1.clone();
        for (k, p) in pre.iter_mut().enumerate() {
            *p += dot(&self.w1[k * self.input_dim..(k + 1) * self.input_dim], x);
        }
        let hidden = match self.activation {
            Activation::Softmax => {
                let mx = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut e: Vec<f64> = pre.iter().map(|a| (a - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter_mut().for_each(|v| *v /= s);
                e
            }
            Activation::Tanh => pre.iter().map(|a| a.tanh()).collect(),
            Activation::Relu => pre.iter().map(|a| a.max(0.0)).collect(),
        };
        let mut u = self.b2.clone();
        for (o, uo) in u.iter_mut().enumerate() {
            *uo += dot(&self.w2[o * h..(o + 1) * h], &hidden);
        }
        let raw_norm = norm(&u);
        let z = if raw_norm < DEGENERATE_NORM {
            let mut e = vec![0.0; self.output];
            e[0] = 1.0;
            e
        } else {
            u.iter().map(|v| v / raw_norm).collect()
        };
        ForwardTrace {
            pre,
            hidden,
            raw_norm,
            z,
        }
    }

    /// `normalize(W2 · act(W1 x + b1) + b2)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).z)
    }

    pub fn forward_unit(&self, x: &UnitVector) -> Result<UnitVector> {
        UnitVector::from_unit(self.forward(x)?)
    }

    /// Accumulates the parameter gradient of `gz · z(x)` into `grad`.
    fn backward(&self, x: &[f64], t: &ForwardTrace, gz: &[f64], grad: &mut EncoderGrad) {
        if t.raw_norm < DEGENERATE_NORM {
            return;
        }
        let h = self.hidden;
        let proj = dot(gz, &t.z);
        let gu: Vec<f64> = gz
            .iter()
            .zip(&t.z)
            .map(|(g, z)| (g - proj * z) / t.raw_norm)
            .collect();
        let mut gh = vec![0.0; h];
        for (o, &g) in gu.iter().enumerate() {
            grad.b2[o] += g;
            let row = &self.w2[o * h..(o + 1) * h];
            let grow = &mut grad.w2[o * h..(o + 1) * h];
            for k in 0..h {
                grow[k] += g * t.hidden[k];
                gh[k] += g * row[k];
            }
        }
        let ga: Vec<f64> = match self.activation {
            Activation::Softmax => {
                let s = dot(&t.hidden, &gh);
                t.hidden.iter().zip(&gh).map(|(p, g)| p * (g - s)).collect()
            }
            Activation::Tanh => t.hidden.iter().zip(&gh).map(|(a, g)| (1.0 - a * a) * g).collect(),
            Activation::Relu => t
                .pre
                .iter()
                .zip(&gh)
                .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                .collect(),
        };
        let d = self.input_dim;
        for (k, &g) in ga.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b1[k] += g;
            for (w, xi) in grad.w1[k * d..(k + 1) * d].iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }

    /// Jacobian `∂z/∂x`, `output × input_dim`, row-major.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let t = self.trace(x);
        let (m, d) = (self.output, self.input_dim);
        let mut jac = vec![0.0; m * d];
        if t.raw_norm < DEGENERATE_NORM {
            return Ok(jac);
        }
        // Row o of the Jacobian is the input gradient of z_o.
        for o in 0..m {
            let mut gz = vec![0.0; m];
            gz[o] = 1.0;
            let mut g = EncoderGrad::zeros_like(self);
            self.backward(x, &t, &gz, &mut g);
            // ∂z_o/∂x_i = Σ_k ga_k W1[k,i]; b1 holds ga after backward.
            for i in 0..d {
                jac[o * d + i] = (0..self.hidden).map(|k| g.b1[k] * self.w1[k * d + i]).sum();
            }
        }
        Ok(jac)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Encoder for EncoderParams {
    fn output_dim(&self) -> usize {
        self.output
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).z
    }
}

/// Maps every input to the same point.
#[derive(Debug, Clone)]
pub struct ConstantEncoder(pub UnitVector);

impl Encoder for ConstantEncoder {
    fn output_dim(&self) -> usize {
        self.0.dim()
    }

    fn embed(&self, _x: &[f64]) -> Vec<f64> {
        self.0.as_slice().to_vec()
    }
}

/// The raw input coordinates, normalized.
#[derive(Debug, Clone, Copy)]
pub struct IdentityEncoder {
    pub dim: usize,
}

impl Encoder for IdentityEncoder {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        let n = norm(x);
        x.iter().map(|v| v / n).collect()
    }
}

/// Gradient buffers with the same shapes as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderGrad {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.flat())
    }
}

/// Negative samples of a contrastive batch.
#[derive(Debug, Clone)]
pub enum Negatives {
    /// One pool contrasted against every anchor.
    Shared(Vec<Vec<f64>>),
    /// A separate list for each anchor.
    PerAnchor(Vec<Vec<Vec<f64>>>),
}

impl Negatives {
    fn for_anchor(&self, i: usize) -> &[Vec<f64>] {
        match self {
            Negatives::Shared(v) => v,
            Negatives::PerAnchor(v) => &v[i],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Negatives,
}

impl ContrastiveBatch {
    fn validate(&self) -> Result<()> {
        if self.anchors.len() != self.positives.len() {
            return Err(Error::DimensionMismatch {
                expected: self.anchors.len(),
                got: self.positives.len(),
            });
        }
        if self.anchors.is_empty() {
            return Err(invalid("empty contrastive batch"));
        }
        match &self.negatives {
            Negatives::Shared(v) if v.is_empty() => return Err(invalid("M must be >= 1")),
            Negatives::PerAnchor(v) => {
                if v.len() != self.anchors.len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.anchors.len(),
                        got: v.len(),
                    });
                }
                if v.iter().any(|n| n.is_empty()) {
                    return Err(invalid("M must be >= 1"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// `log Σ exp(s_i)`, shifted by the max for stability.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln()
}

/// Single-anchor InfoNCE: `−aᵀp + log Σ_i exp(aᵀn_i)`. The positive does not
/// enter the denominator.
pub fn infonce_term(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>]) -> f64 {
    let scores: Vec<f64> = negatives.iter().map(|n| dot(anchor, n)).collect();
    -dot(anchor, positive) + log_sum_exp(&scores)
}

/// Mean InfoNCE over a batch given precomputed embeddings.
pub fn infonce_from_embeddings(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let b = batch.anchors.len();
    let total: f64 = (0..b)
        .map(|i| infonce_term(&batch.anchors[i], &batch.positives[i], batch.negatives.for_anchor(i)))
        .sum();
    Ok(total / b as f64)
}

fn embed_all<E: Encoder + ?Sized>(enc: &E, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    xs.iter().map(|x| enc.embed(x)).collect()
}

/// Mean InfoNCE of an encoder over a batch of inputs.
pub fn infonce_loss<E: Encoder + ?Sized>(enc: &E, batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let embedded = ContrastiveBatch {
        anchors: embed_all(enc, &batch.anchors),
        positives: embed_all(enc, &batch.positives),
        negatives: match &batch.negatives {
            Negatives::Shared(v) => Negatives::Shared(embed_all(enc, v)),
            Negatives::PerAnchor(v) => {
                Negatives::PerAnchor(v.iter().map(|n| embed_all(enc, n)).collect())
            }
        },
    };
    infonce_from_embeddings(&embedded)
}

/// Batch loss and its exact gradient, normalization layer included.
pub fn infonce_grad(p: &EncoderParams, batch: &ContrastiveBatch) -> Result<(f64, EncoderGrad)> {
    batch.validate()?;
    for x in batch.anchors.iter().chain(&batch.positives) {
        p.check_input(x)?;
    }
    let b = batch.anchors.len();
    let inv_b = 1.0 / b as f64;
    let m = p.output;

    let anchor_t: Vec<ForwardTrace> = batch.anchors.iter().map(|x| p.trace(x)).collect();
    let pos_t: Vec<ForwardTrace> = batch.positives.iter().map(|x| p.trace(x)).collect();
    let neg_t: Vec<Vec<ForwardTrace>> = match &batch.negatives {
        Negatives::Shared(v) => vec![v.iter().map(|x| p.trace(x)).collect()],
        Negatives::PerAnchor(v) => v.iter().map(|n| n.iter().map(|x| p.trace(x)).collect()).collect(),
    };
    let shared = matches!(batch.negatives, Negatives::Shared(_));
    let neg_of = |i: usize| if shared { &neg_t[0] } else { &neg_t[i] };

    let mut grad = EncoderGrad::zeros_like(p);
    let mut neg_grads: Vec<Vec<Vec<f64>>> = neg_t
        .iter()
        .map(|n| vec![vec![0.0; m]; n.len()])
        .collect();
    let mut loss = 0.0;
    for i in 0..b {
        let za = &anchor_t[i].z;
        let zp = &pos_t[i].z;
        let negs = neg_of(i);
        let scores: Vec<f64> = negs.iter().map(|t| dot(za, &t.z)).collect();
        let lse = log_sum_exp(&scores);
        loss += -dot(za, zp) + lse;

        let mut ga: Vec<f64> = zp.iter().map(|v| -v * inv_b).collect();
        let slot = if shared { 0 } else { i };
        for (j, t) in negs.iter().enumerate() {
            let w = (scores[j] - lse).exp() * inv_b;
            for c in 0..m {
                ga[c] += w * t.z[c];
                neg_grads[slot][j][c] += w * za[c];
            }
        }
        let gp: Vec<f64> = za.iter().map(|v| -v * inv_b).collect();
        p.backward(&batch.anchors[i], &anchor_t[i], &ga, &mut grad);
        p.backward(&batch.positives[i], &pos_t[i], &gp, &mut grad);
    }
    for (slot, traces) in neg_t.iter().enumerate() {
        let inputs = match &batch.negatives {
            Negatives::Shared(v) => v,
            Negatives::PerAnchor(v) => &v[slot],
        };
        for (j, t) in traces.iter().enumerate() {
            p.check_input(&inputs[j])?;
            p.backward(&inputs[j], t, &neg_grads[slot][j], &mut grad);
        }
    }
    Ok((loss * inv_b, grad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    SgdMomentum,
}

/// How positive pairs are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Anchor is the natural sample, positive one augmented view of it.
    #[default]
    NaturalAnchor,
    /// Anchor and positive are two independent views of the same sample.
    TwoViews,
}

/// Settings for the ACR / alignment diagnostics recorded during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub views: usize,
    pub k: usize,
    pub max_sources: usize,
    pub eps_pairs: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            views: 10,
            k: 1,
            max_sources: 500,
            eps_pairs: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Augmentation radius (geodesic).
    pub r: f64,
    /// Negatives per anchor.
    #[serde(rename = "M")]
    pub negatives: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub seed: u64,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub pair_mode: PairMode,
    /// Record ACR and alignment error every this many epochs; 0 disables.
    pub acr_eval_every: usize,
    pub monitor: MonitorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            r: 0.1,
            negatives: 255,
            batch_size: 256,
            epochs: 200,
            learning_rate: 0.5,
            optimizer: Optimizer::SgdMomentum,
            momentum: 0.9,
            seed: 0,
            hidden_width: 128,
            output_dim: 16,
            activation: Activation::Softmax,
            pair_mode: PairMode::NaturalAnchor,
            acr_eval_every: 0,
            monitor: MonitorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives < 1 {
            return Err(invalid("M must be >= 1"));
        }
        if self.epochs < 1 {
            return Err(invalid("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be > 0"));
        }
        if self.batch_size < 1 || self.hidden_width < 1 || self.output_dim < 1 {
            return Err(invalid("batch size and layer widths must be >= 1"));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.r) {
            return Err(invalid(format!("augmentation strength {} outside [0, π]", self.r)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "loss")]
    pub infonce_loss: f64,
    pub acr: Option<f64>,
    #[serde(rename = "eps")]
    pub alignment_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.infonce_loss)
    }

    /// Writes `epoch,loss,acr,eps`; diagnostics not evaluated that epoch are left empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// ChaCha8 stream assignments derived from the training seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const MONITOR: u64 = 2;
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The untrained encoder `train` starts from for this config and input dimension.
pub fn initial_encoder(input_dim: usize, config: &TrainConfig) -> Result<EncoderParams> {
    EncoderParams::init(
        input_dim,
        config.hidden_width,
        config.output_dim,
        config.activation,
        &mut stream_rng(config.seed, streams::INIT),
    )
}

/// Draws one training batch for anchors `idx`.
pub(crate) fn sample_batch<R: Rng + ?Sized>(
    dataset: &LabeledSphereDataset,
    idx: &[usize],
    r: f64,
    negatives: usize,
    pair_mode: PairMode,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    let mut anchors = Vec::with_capacity(idx.len());
    let mut positives = Vec::with_capacity(idx.len());
    for &i in idx {
        let x = &dataset.points[i];
        let a = match pair_mode {
            PairMode::NaturalAnchor => x.clone(),
            PairMode::TwoViews => augment(x, r, rng)?,
        };
        anchors.push(a.into_inner());
        positives.push(augment(x, r, rng)?.into_inner());
    }
    let n = dataset.len();
    let negs = (0..negatives)
        .map(|_| {
            let j = rng.random_range(0..n);
            augment(&dataset.points[j], r, rng).map(UnitVector::into_inner)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ContrastiveBatch {
        anchors,
        positives,
        negatives: Negatives::Shared(negs),
    })
}

/// Mini-batch contrastive training.
///
/// Each step draws one fresh positive per anchor and a pool of `M` fresh
/// negatives (augmented views of uniformly chosen samples) shared across the
/// batch. Diagnostics use their own random stream, so enabling them does not
/// change the trained parameters.
pub fn train(
    dataset: &LabeledSphereDataset,
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainingTrace)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let mut params = initial_encoder(dataset.ambient_dim(), config)?;
    let mut rng = stream_rng(config.seed, streams::TRAIN);
    let monitor_seed = stream_rng(config.seed, streams::MONITOR).random::<u64>();
    let monitor_set = dataset.subsample(config.monitor.max_sources);

    let mut velocity = vec![0.0; params.num_params()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = TrainingTrace::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = sample_batch(dataset, chunk, config.r, config.negatives, config.pair_mode, &mut rng)?;
            let (loss, grad) = infonce_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss * chunk.len() as f64;
            let g = grad.flat();
            let mut theta = params.flat();
            match config.optimizer {
                Optimizer::Sgd => {
                    for (t, gi) in theta.iter_mut().zip(&g) {
                        *t -= config.learning_rate * gi;
                    }
                }
                Optimizer::SgdMomentum => {
                    for ((t, v), gi) in theta.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                        *v = config.momentum * *v + gi;
                        *t -= config.learning_rate * *v;
                    }
                }
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            params.set_flat(&theta)?;
        }
        let epoch_loss = total / dataset.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }

        let monitor_now = config.acr_eval_every > 0
            && (epoch % config.acr_eval_every == 0 || epoch == config.epochs);
        let (acr, alignment_error) = if monitor_now {
            let set = crate::metrics::build_augmented_features(
                &params,
                &monitor_set,
                config.monitor.views,
                config.r,
                config.monitor.k,
                monitor_seed,
            )?;
            let acr = crate::metrics::confusion_ratio_all(&set).acr;
            let mut eps_rng = ChaCha8Rng::seed_from_u64(monitor_seed);
            let eps = crate::eval::alignment_error(
                &params,
                dataset,
                config.r,
                config.monitor.eps_pairs.max(1),
                config.pair_mode,
                &mut eps_rng,
            )?;
            (Some(acr), Some(eps.max_eps))
        } else {
            (None, None)
        };
        trace.records.push(EpochRecord {
            epoch,
            infonce_loss: epoch_loss,
            acr,
            alignment_error,
        });
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_unit(dim: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        UnitVector::new(v).unwrap().into_inner()
    }

    #[test]
    fn output_is_unit_norm() {
        let mut r = rng(0);
        for act in [Activation::Softmax, Activation::Tanh, Activation::Relu] {
            let p = EncoderParams::init(3, 16, 5, act, &mut r).unwrap();
            for _ in 0..1000 {
                let x = random_unit(3, &mut r);
                let z = p.forward(&x).unwrap();
                assert!((norm(&z) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_map_and_degenerate_fallback() {
        let mut r = rng(1);
        let mut p = EncoderParams::init(3, 8, 4, Activation::Tanh, &mut r).unwrap();
        p.w2.iter_mut().for_each(|w| *w = 0.0);
        p.b2 = vec![0.0, 0.0, 2.5, 0.0];
        let x = random_unit(3, &mut r);
        assert_eq!(p.forward(&x).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let z = EncoderParams::zeros(3, 8, 4, Activation::Relu).forward(&x).unwrap();
        assert_eq!(z, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(p.forward(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn infonce_closed_forms() {
        let z = vec![0.6, 0.8];
        for m in [1usize, 7, 255] {
            let batch = ContrastiveBatch {
                anchors: vec![z.clone()],
                positives: vec![z.clone()],
                negatives: Negatives::Shared(vec![z.clone(); m]),
            };
            let loss = infonce_from_embeddings(&batch).unwrap();
            assert!((loss - (m as f64).ln()).abs() < 1e-12);
        }
        let batch = ContrastiveBatch {
            anchors: vec![vec![1.0, 0.0]],
            positives: vec![vec![1.0, 0.0]],
            negatives: Negatives::PerAnchor(vec![vec![vec![-1.0, 0.0]]]),
        };
        assert!((infonce_from_embeddings(&batch).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_negatives_rejected() {
        let batch = ContrastiveBatch {
            anchors: vec![vec![1.0, 0.0]],
            positives: vec![vec![1.0, 0.0]],
            negatives: Negatives::Shared(vec![]),
        };
        assert!(infonce_from_embeddings(&batch).is_err());
    }

    #[test]
    fn relu_dead_units_get_no_w2_gradient() {
        let mut r = rng(2);
        let mut p = EncoderParams::init(3, 6, 4, Activation::Relu, &mut r).unwrap();
        p.w1.iter_mut().for_each(|w| *w = 0.0);
        p.b1.iter_mut().for_each(|b| *b = -1.0);
        let batch = ContrastiveBatch {
            anchors: vec![random_unit(3, &mut r)],
            positives: vec![random_unit(3, &mut r)],
            negatives: Negatives::Shared(vec![random_unit(3, &mut r), random_unit(3, &mut r)]),
        };
        let (_, g) = infonce_grad(&p, &batch).unwrap();
        assert!(g.w2.iter().all(|&v| v == 0.0));
        assert!(g.w1.iter().chain(&g.b1).all(|&v| v == 0.0));
    }

    #[test]
    fn coincident_embeddings_have_finite_gradient() {
        let mut r = rng(3);
        let mut p = EncoderParams::init(3, 6, 4, Activation::Softmax, &mut r).unwrap();
        p.w2.iter_mut().for_each(|w| *w = 0.0);
        let x = random_unit(3, &mut r);
        let batch = ContrastiveBatch {
            anchors: vec![x.clone()],
            positives: vec![x.clone()],
            negatives: Negatives::Shared(vec![x.clone(); 5]),
        };
        let (loss, g) = infonce_grad(&p, &batch).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!(g.norm().is_finite());
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let p = EncoderParams::init(3, 4, 2, Activation::Tanh, &mut rng(4)).unwrap();
        let json = p.to_json().unwrap();
        assert!(json.contains("\"h\":4") && json.contains("\"d\":3") && json.contains("\"m\":2"));
        assert_eq!(EncoderParams::from_json(&json).unwrap(), p);
        let broken = json.replace("\"h\":4", "\"h\":5");
        assert!(EncoderParams::from_json(&broken).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.negatives = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"bogus": 1}"#);
        assert!(parsed.is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"M": 31, "r": 0.2}"#).unwrap();
        assert_eq!((parsed.negatives, parsed.r), (31, 0.2));
    }
}
