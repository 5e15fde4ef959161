//! Sparse mixture-of-experts fusion model.
//!
//! Per modality m a learned projection maps the encoder vector into the shared
//! space, `z_m = P_m e_m`. The projected vectors are concatenated into `h`
//! (fixed fusion order, see [`Modality::ALL`]). A noisy top-k gate routes each
//! sample to k expert FFNs whose outputs are mixed by the renormalized gate
//! probabilities into `y`. The head is linear over `[y ‖ z_mol ‖ z_onto]`.
//!
//! All compute is f64 and batched: rows are samples. Parameters live in one
//! flat list of matrices (see [`Layout`]) so the optimizer, the checkpoint and
//! the gradient checker can treat them uniformly.

use std::fmt;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Segment;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Smiles,
    Criteria,
    Diseases,
    Drugs,
    Summary,
    Description,
    Enrollment,
}

impl Modality {
    /// Fusion order: molecular, protocol, ontology, then the extra modalities.
    pub const ALL: [Modality; 7] = [
        Modality::Smiles,
        Modality::Criteria,
        Modality::Diseases,
        Modality::Drugs,
        Modality::Summary,
        Modality::Description,
        Modality::Enrollment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Smiles => "smiles",
            Modality::Criteria => "criteria",
            Modality::Diseases => "diseases",
            Modality::Drugs => "drugs",
            Modality::Summary => "summary",
            Modality::Description => "description",
            Modality::Enrollment => "enrollment",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        let s = s.trim().to_ascii_lowercase();
        let s = match s.as_str() {
            "summarization" | "brief_summary" => "summary",
            "text_description" => "description",
            "eligibility" => "criteria",
            other => other,
        };
        Modality::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Width of the encoder-side vector: eligibility carries two pooled halves.
    pub fn input_dim(self, embed_dim: usize) -> usize {
        match self {
            Modality::Criteria => 2 * embed_dim,
            _ => embed_dim,
        }
    }

    /// Token-cap family used before encoding.
    pub fn segment(self) -> Segment {
        match self {
            Modality::Smiles | Modality::Drugs => Segment::Molecular,
            Modality::Diseases => Segment::Ontology,
            _ => Segment::Protocol,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Gate sees `[z_mol ‖ z_onto]`.
    DrugDisease,
    /// Gate sees the whole fused vector `h`.
    All,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::DrugDisease => "drug-disease",
            GateMode::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<GateMode> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "drug-disease" => Some(GateMode::DrugDisease),
            "all" | "all-modalities" => Some(GateMode::All),
            _ => None,
        }
    }
}

/// How expert selection counts are turned into utilization fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtilizationNorm {
    /// count / (batch · k): fractions sum to 1.
    PerSelection,
    /// count / batch: fractions sum to k.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub shared_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub expert_out: usize,
    pub gate_mode: GateMode,
    pub modalities: Vec<Modality>,
    pub utilization_norm: UtilizationNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 768,
            shared_dim: 768,
            experts: 4,
            top_k: 2,
            hidden_dim: 256,
            expert_out: 768,
            gate_mode: GateMode::DrugDisease,
            modalities: Modality::ALL.to_vec(),
            utilization_norm: UtilizationNorm::PerSelection,
        }
    }
}

impl ModelConfig {
    /// Sorts modalities into fusion order and checks the sizes.
    pub fn normalized(mut self) -> Result<Self, ModelError> {
        self.modalities.sort();
        self.modalities.dedup();
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.modalities.is_empty() {
            return bad("modality subset is empty");
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return bad("need 1 <= top_k <= experts");
        }
        if self.embed_dim == 0
            || self.shared_dim == 0
            || self.hidden_dim == 0
            || self.expert_out == 0
        {
            return bad("dimensions must be positive");
        }
        Ok(self)
    }

    pub fn fused_dim(&self) -> usize {
        self.modalities.len() * self.shared_dim
    }

    pub fn gate_input_dim(&self) -> usize {
        match self.gate_mode {
            GateMode::DrugDisease => 2 * self.shared_dim,
            GateMode::All => self.fused_dim(),
        }
    }

    pub fn head_input_dim(&self) -> usize {
        self.expert_out + 2 * self.shared_dim
    }

    fn position(&self, m: Modality) -> Option<usize> {
        self.modalities.iter().position(|x| *x == m)
    }
}

/// Indices into [`SMoEModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// One projection per active modality, in fusion order (shared × input).
    pub proj: Vec<usize>,
    pub wg: usize,
    pub wnoise: usize,
    /// (W1, b1, W2, b2) per expert; biases are 1-row matrices.
    pub experts: Vec<[usize; 4]>,
    /// Column vector (head input × 1).
    pub head_w: usize,
    pub head_b: usize,
    pub names: Vec<String>,
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut push = |n: String| {
            names.push(n);
            names.len() - 1
        };
        let proj = config
            .modalities
            .iter()
            .map(|m| push(format!("proj.{m}")))
            .collect();
        let wg = push("gate.wg".into());
        let wnoise = push("gate.wnoise".into());
        let experts = (0..config.experts)
            .map(|j| ["w1", "b1", "w2", "b2"].map(|p| push(format!("expert{j}.{p}"))))
            .collect();
        let head_w = push("head.w".into());
        let head_b = push("head.b".into());
        Layout {
            proj,
            wg,
            wnoise,
            experts,
            head_w,
            head_b,
            names,
        }
    }
}

pub fn param_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
    let mut shapes: Vec<(usize, usize)> = config
        .modalities
        .iter()
        .map(|m| (config.shared_dim, m.input_dim(config.embed_dim)))
        .collect();
    let g = config.gate_input_dim();
    shapes.push((g, config.experts));
    shapes.push((g, config.experts));
    for _ in 0..config.experts {
        shapes.push((config.fused_dim(), config.hidden_dim));
        shapes.push((1, config.hidden_dim));
        shapes.push((config.hidden_dim, config.expert_out));
        shapes.push((1, config.expert_out));
    }
    shapes.push((config.head_input_dim(), 1));
    shapes.push((1, 1));
    shapes
}

/// A batch of encoder-side inputs: one matrix per active modality (rows are
/// samples), zero rows where the modality is missing.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Array2<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self
                .inputs
                .iter()
                .map(|x| x.select(Axis(0), rows))
                .collect(),
        }
    }
}

/// Gate noise source.
pub enum Noise<'a> {
    /// Eval mode: no noise, no rng consumption.
    Off,
    /// Train mode: ε ~ N(0,1) drawn row-major (sample, expert).
    Sample(&'a mut ChaCha8Rng),
    /// Train mode with a given ε matrix (batch × experts).
    Fixed(ArrayView2<'a, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingStats {
    pub batch: usize,
    pub top_k: usize,
    /// Selection counts per expert; they sum to batch · k.
    pub counts: Vec<usize>,
    /// Utilization fractions under the configured normalization.
    pub f: Vec<f64>,
    /// Batch-mean dense gate probability per expert.
    pub p: Vec<f64>,
    /// Zero-filled (missing) inputs per active modality.
    pub zero_filled: Vec<usize>,
}

impl RoutingStats {
    pub fn load_balance_loss(&self) -> f64 {
        importance_loss(&self.f, &self.p)
    }
}

/// `N · Σ f_i P_i`.
pub fn importance_loss(f: &[f64], p: &[f64]) -> f64 {
    f.len() as f64 * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
}

pub fn load_balance_loss(stats: &RoutingStats) -> f64 {
    stats.load_balance_loss()
}

pub fn utilization(
    counts: &[usize],
    samples: usize,
    top_k: usize,
    norm: UtilizationNorm,
) -> Vec<f64> {
    let denom = match norm {
        UtilizationNorm::PerSelection => (samples * top_k) as f64,
        UtilizationNorm::PerSample => samples as f64,
    };
    counts
        .iter()
        .map(|&c| if denom > 0.0 { c as f64 / denom } else { 0.0 })
        .collect()
}

/// Top-k indices (ties to the lower index) and the softmax over them;
/// non-selected experts get probability 0.
pub fn top_k_softmax(logits: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    let mut probs = vec![0.0; logits.len()];
    let max = order
        .iter()
        .map(|&j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &j in &order {
        probs[j] = (logits[j] - max).exp();
        total += probs[j];
    }
    for &j in &order {
        probs[j] /= total;
    }
    (probs, order)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Concatenates projected vectors in the given order.
pub fn build_fusion_input(
    parts: &[ArrayView1<'_, f64>],
    dim: usize,
) -> Result<Array1<f64>, ModelError> {
    if parts.is_empty() {
        return Err(ModelError::InvalidConfig("no modality vectors".into()));
    }
    if let Some(bad) = parts.iter().find(|p| p.len() != dim) {
        return Err(ModelError::DimMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    Ok(concatenate(Axis(0), parts).expect("equal-width parts"))
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    z: Vec<Array2<f64>>,
    h: Array2<f64>,
    gin: Array2<f64>,
    noise_pre: Option<Array2<f64>>,
    eps: Option<Array2<f64>>,
    /// Dense softmax of the (noisy) gate logits.
    q: Array2<f64>,
    /// Renormalized top-k probabilities (zero off the selected set).
    pub gate_probs: Array2<f64>,
    pub selected: Vec<Vec<usize>>,
    rows: Vec<Vec<usize>>,
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
    out: Vec<Array2<f64>>,
    pub y: Array2<f64>,
    u: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    pub stats: RoutingStats,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SMoEModel {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<Array2<f64>>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl SMoEModel {
    /// Random initialization. Projections are scaled for unit-norm inputs so
    /// projected entries start near unit variance; the noise projection starts
    /// at zero (constant noise scale softplus(0)).
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        let config = config.normalized()?;
        let layout = Layout::new(&config);
        let shapes = param_shapes(&config);
        let mut params = Vec::with_capacity(shapes.len());
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let std = if layout.proj.contains(&i) {
                1.0
            } else if i == layout.wnoise || i == layout.head_b || r == 1 {
                0.0
            } else {
                (1.0 / r as f64).sqrt()
            };
            params.push(normal_matrix(rng, r, c, std));
        }
        Ok(SMoEModel {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Array2<f64>>) -> Result<Self, ModelError> {
        let config = config.normalized()?;
        let shapes = param_shapes(&config);
        if shapes.len() != params.len() {
            return Err(ModelError::DimMismatch {
                expected: shapes.len(),
                actual: params.len(),
            });
        }
        for (want, p) in shapes.iter().zip(&params) {
            if *want != p.dim() {
                return Err(ModelError::DimMismatch {
                    expected: want.0 * want.1,
                    actual: p.len(),
                });
            }
        }
        Ok(SMoEModel {
            layout: Layout::new(&config),
            config,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Array2::len).sum()
    }

    /// Rounds every parameter to f32 precision (what a checkpoint stores).
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.inputs.len() != self.config.modalities.len() {
            return Err(ModelError::DimMismatch {
                expected: self.config.modalities.len(),
                actual: batch.inputs.len(),
            });
        }
        let n = batch.len();
        for (m, x) in self.config.modalities.iter().zip(&batch.inputs) {
            let want = m.input_dim(self.config.embed_dim);
            if x.ncols() != want {
                return Err(ModelError::DimMismatch {
                    expected: want,
                    actual: x.ncols(),
                });
            }
            if x.nrows() != n {
                return Err(ModelError::DimMismatch {
                    expected: n,
                    actual: x.nrows(),
                });
            }
        }
        Ok(())
    }

    fn zero_z(&self, n: usize) -> Array2<f64> {
        Array2::zeros((n, self.config.shared_dim))
    }

    fn z_of(&self, z: &[Array2<f64>], m: Modality, n: usize) -> Array2<f64> {
        self.config
            .position(m)
            .map_or_else(|| self.zero_z(n), |i| z[i].clone())
    }

    /// Gate input for the configured mode.
    fn gate_input(&self, z: &[Array2<f64>], h: &Array2<f64>) -> Array2<f64> {
        match self.config.gate_mode {
            GateMode::All => h.clone(),
            GateMode::DrugDisease => {
                let n = h.nrows();
                let zm = self.z_of(z, Modality::Smiles, n);
                let zo = self.z_of(z, Modality::Diseases, n);
                concatenate(Axis(1), &[zm.view(), zo.view()]).unwrap()
            }
        }
    }

    /// Output of expert `j` for the rows of `x`.
    pub fn expert_forward(&self, j: usize, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let [w1, b1, w2, b2] = self.layout.experts[j];
        let a = x.dot(&self.params[w1]) + &self.params[b1];
        a.mapv(gelu).dot(&self.params[w2]) + &self.params[b2]
    }

    /// Gate logits for each row of `gin` plus noise; returns (logits, noise pre-activation, eps).
    fn gate_logits(
        &self,
        gin: &Array2<f64>,
        noise: Noise<'_>,
    ) -> (Array2<f64>, Option<Array2<f64>>, Option<Array2<f64>>) {
        let clean = gin.dot(&self.params[self.layout.wg]);
        let (n, e) = clean.dim();
        let eps = match noise {
            Noise::Off => return (clean, None, None),
            Noise::Sample(rng) => {
                Array2::from_shape_simple_fn((n, e), || StandardNormal.sample(rng))
            }
            Noise::Fixed(eps) => eps.to_owned(),
        };
        let pre = gin.dot(&self.params[self.layout.wnoise]);
        let noisy = &clean + &(&eps * &pre.mapv(softplus));
        (noisy, Some(pre), Some(eps))
    }

    /// Gate probabilities and top-k sets for one gate input vector.
    pub fn gate(
        &self,
        gate_input: ArrayView1<'_, f64>,
        noise: Noise<'_>,
    ) -> (Vec<f64>, Vec<usize>) {
        let gin = gate_input.insert_axis(Axis(0)).to_owned();
        let (logits, _, _) = self.gate_logits(&gin, noise);
        top_k_softmax(logits.row(0).as_slice().unwrap(), self.config.top_k)
    }

    /// Routes rows of `h` (with gate input `gin`) through the experts.
    pub fn fuse(
        &self,
        h: &Array2<f64>,
        gin: &Array2<f64>,
        noise: Noise<'_>,
    ) -> (Array2<f64>, RoutingStats, ForwardCache) {
        let n = h.nrows();
        let k = self.config.top_k;
        let experts = self.config.experts;
        let (logits, noise_pre, eps) = self.gate_logits(gin, noise);
        let mut gate_probs = Array2::zeros((n, experts));
        let mut q = Array2::zeros((n, experts));
        let mut selected = Vec::with_capacity(n);
        let mut rows = vec![Vec::new(); experts];
        for i in 0..n {
            let l = logits.row(i).to_vec();
            let (p, sel) = top_k_softmax(&l, k);
            for &j in &sel {
                rows[j].push(i);
            }
            gate_probs.row_mut(i).assign(&Array1::from(p));
            q.row_mut(i).assign(&Array1::from(softmax(&l)));
            selected.push(sel);
        }
        let mut y = Array2::zeros((n, self.config.expert_out));
        let (mut pre, mut act, mut out) = (Vec::new(), Vec::new(), Vec::new());
        for (j, r) in rows.iter().enumerate() {
            let [w1, b1, w2, b2] = self.layout.experts[j];
            let x = h.select(Axis(0), r);
            let a = x.dot(&self.params[w1]) + &self.params[b1];
            let g = a.mapv(gelu);
            let o = g.dot(&self.params[w2]) + &self.params[b2];
            for (pos, &i) in r.iter().enumerate() {
                y.row_mut(i).scaled_add(gate_probs[[i, j]], &o.row(pos));
            }
            pre.push(a);
            act.push(g);
            out.push(o);
        }
        let counts: Vec<usize> = rows.iter().map(Vec::len).collect();
        let p = if n == 0 {
            vec![0.0; experts]
        } else {
            q.mean_axis(Axis(0)).unwrap().to_vec()
        };
        let stats = RoutingStats {
            batch: n,
            top_k: k,
            f: utilization(&counts, n, k, self.config.utilization_norm),
            counts,
            p,
            zero_filled: Vec::new(),
        };
        let cache = ForwardCache {
            z: Vec::new(),
            h: h.clone(),
            gin: gin.clone(),
            noise_pre,
            eps,
            q,
            gate_probs,
            selected,
            rows,
            pre,
            act,
            out,
            y: y.clone(),
            u: Array2::zeros((0, 0)),
        };
        (y, stats, cache)
    }

    /// Full forward pass over a batch.
    pub fn forward(&self, batch: &Batch, noise: Noise<'_>) -> Result<Forward, ModelError> {
        self.check_batch(batch)?;
        let n = batch.len();
        let z: Vec<Array2<f64>> = batch
            .inputs
            .iter()
            .zip(&self.layout.proj)
            .map(|(x, &pi)| x.dot(&self.params[pi].t()))
            .collect();
        let views: Vec<ArrayView2<'_, f64>> = z.iter().map(|a| a.view()).collect();
        let h = concatenate(Axis(1), &views).unwrap();
        let gin = self.gate_input(&z, &h);
        let (y, mut stats, mut cache) = self.fuse(&h, &gin, noise);
        stats.zero_filled = batch
            .inputs
            .iter()
            .map(|x| {
                x.rows()
                    .into_iter()
                    .filter(|r| r.iter().all(|v| *v == 0.0))
                    .count()
            })
            .collect();
        let zm = self.z_of(&z, Modality::Smiles, n);
        let zo = self.z_of(&z, Modality::Diseases, n);
        let u = concatenate(Axis(1), &[y.view(), zm.view(), zo.view()]).unwrap();
        let w = self.params[self.layout.head_w].column(0);
        let b = self.params[self.layout.head_b][[0, 0]];
        let logits = u.dot(&w) + b;
        let probs = logits.mapv(sigmoid);
        cache.z = z;
        cache.u = u;
        Ok(Forward {
            logits,
            probs,
            stats,
            cache,
        })
    }

    /// Gradients of `Σ_i dlogits_i · ℓ_i + imp_weight · L_imp` with respect
    /// to every parameter. The top-k selection and ε are treated as constants.
    pub fn backward(
        &self,
        batch: &Batch,
        fwd: &Forward,
        dlogits: &Array1<f64>,
        imp_weight: f64,
    ) -> Vec<Array2<f64>> {
        let c = &fwd.cache;
        let cfg = &self.config;
        let lay = &self.layout;
        let n = batch.len();
        let d = cfg.shared_dim;
        let mut grads: Vec<Array2<f64>> =
            self.params.iter().map(|p| Array2::zeros(p.dim())).collect();

        // head
        let dl = dlogits.view().insert_axis(Axis(1));
        grads[lay.head_w] = c.u.t().dot(&dl);
        grads[lay.head_b][[0, 0]] = dlogits.sum();
        let du = dl.dot(&self.params[lay.head_w].t());
        let dy = du.slice(s![.., ..cfg.expert_out]);
        let mut dz_mol = du
            .slice(s![.., cfg.expert_out..cfg.expert_out + d])
            .to_owned();
        let mut dz_onto = du.slice(s![.., cfg.expert_out + d..]).to_owned();

        // experts
        let mut dh = Array2::zeros(c.h.dim());
        let mut dpi = Array2::<f64>::zeros((n, cfg.experts));
        for (j, r) in c.rows.iter().enumerate() {
            if r.is_empty() {
                continue;
            }
            let [w1, b1, w2, b2] = lay.experts[j];
            let mut d_out = Array2::zeros(c.out[j].dim());
            for (pos, &i) in r.iter().enumerate() {
                dpi[[i, j]] = dy.row(i).dot(&c.out[j].row(pos));
                d_out
                    .row_mut(pos)
                    .assign(&(&dy.row(i) * c.gate_probs[[i, j]]));
            }
            grads[w2] = c.act[j].t().dot(&d_out);
            grads[b2] = d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_act = d_out.dot(&self.params[w2].t());
            let d_pre = d_act * &c.pre[j].mapv(gelu_grad);
            let x = c.h.select(Axis(0), r);
            grads[w1] = x.t().dot(&d_pre);
            grads[b1] = d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dx = d_pre.dot(&self.params[w1].t());
            for (pos, &i) in r.iter().enumerate() {
                dh.row_mut(i).scaled_add(1.0, &dx.row(pos));
            }
        }

        // gate logits: renormalized top-k softmax, then the dense softmax in L_imp
        let mut dlogit = Array2::<f64>::zeros((n, cfg.experts));
        for i in 0..n {
            let sel = &c.selected[i];
            let dot: f64 = sel
                .iter()
                .map(|&j| c.gate_probs[[i, j]] * dpi[[i, j]])
                .sum();
            for &j in sel {
                dlogit[[i, j]] = c.gate_probs[[i, j]] * (dpi[[i, j]] - dot);
            }
        }
        if imp_weight != 0.0 && n > 0 {
            let f = utilization(&fwd.stats.counts, n, cfg.top_k, cfg.utilization_norm);
            let g: Vec<f64> = f
                .iter()
                .map(|fi| imp_weight * cfg.experts as f64 * fi / n as f64)
                .collect();
            for i in 0..n {
                let dot: f64 = (0..cfg.experts).map(|j| c.q[[i, j]] * g[j]).sum();
                for j in 0..cfg.experts {
                    dlogit[[i, j]] += c.q[[i, j]] * (g[j] - dot);
                }
            }
        }
        grads[lay.wg] = c.gin.t().dot(&dlogit);
        let mut dgin = dlogit.dot(&self.params[lay.wg].t());
        if let (Some(pre), Some(eps)) = (&c.noise_pre, &c.eps) {
            let dpre = &dlogit * eps * &pre.mapv(sigmoid);
            grads[lay.wnoise] = c.gin.t().dot(&dpre);
            dgin += &dpre.dot(&self.params[lay.wnoise].t());
        }
        match cfg.gate_mode {
            GateMode::All => dh += &dgin,
            GateMode::DrugDisease => {
                dz_mol += &dgin.slice(s![.., ..d]);
                dz_onto += &dgin.slice(s![.., d..]);
            }
        }

        // projections
        for (slot, (m, x)) in cfg.modalities.iter().zip(&batch.inputs).enumerate() {
            let mut dz = dh.slice(s![.., slot * d..(slot + 1) * d]).to_owned();
            match m {
                Modality::Smiles => dz += &dz_mol,
                Modality::Diseases => dz += &dz_onto,
                _ => {}
            }
            grads[lay.proj[slot]] = dz.t().dot(x);
        }
        grads
    }
}

/// Draws a random batch of unit-scale inputs; used by tests and benchmarks.
pub fn random_batch(config: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let inputs = config
        .modalities
        .iter()
        .map(|m| {
            let w = m.input_dim(config.embed_dim);
            Array2::from_shape_simple_fn((n, w), || rng.random_range(-1.0..1.0) / (w as f64).sqrt())
        })
        .collect();
    Batch { inputs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn hand_gate_case() {
        let (p, sel) = top_k_softmax(&[2.0, 1.0, 0.0, -1.0], 2);
        assert_eq!(sel, [0, 1]);
        assert!((p[0] - 0.731_058_578_6).abs() < 1e-9);
        assert!((p[1] - 0.268_941_421_4).abs() < 1e-9);
        assert_eq!(&p[2..], &[0.0, 0.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let (_, sel) = top_k_softmax(&[0.0; 4], 2);
        assert_eq!(sel, [0, 1]);
    }

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig {
            embed_dim: 8,
            shared_dim: 6,
            hidden_dim: 5,
            expert_out: 4,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = SMoEModel::new(cfg.clone(), &mut rng).unwrap();
        let batch = random_batch(&model.config, 3, &mut rng);
        let fwd = model.forward(&batch, Noise::Off).unwrap();
        assert_eq!(fwd.logits.len(), 3);
        assert_eq!(fwd.stats.counts.iter().sum::<usize>(), 6);
        assert_eq!(cfg.head_input_dim(), 16);
    }
}
