//! The adaptable model abstraction.
//!
//! Models are small feed-forward nets (MLP or 1-d conv) with explicit
//! normalization layers. Forward and backward passes are hand-written so
//! that adaptation losses can differentiate through batch statistics, and
//! so that the complete model state (parameters + running statistics) can
//! be snapshotted and restored bit-exactly.
//!
//! Activations are `[batch, channels * positions]` matrices; MLP layers use
//! `positions = 1`, the conv path keeps channel-major rows.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::num::{col_mean, col_var_biased, softmax_rows};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("architecture mismatch: state tagged `{state}`, model tagged `{model}`")]
    ArchitectureMismatch { state: String, model: String },
    #[error("shape mismatch for `{name}`: expected {expected}, got {got}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("negative variance entry at channel {channel}")]
    NegativeVariance { channel: usize },
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("missing entry `{0}` in model state")]
    MissingEntry(String),
}

/// The five addressable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Affine scale/shift of every normalization layer (alias `norm_affine`:
    /// group/layer norm affines live here too, so norm-affine methods work
    /// unchanged on GN/LN backbones).
    BnAffine,
    /// Feature-extractor weights and biases, excluding norm affines.
    Extractor,
    Classifier,
    Aux,
    All,
}

impl ParamGroup {
    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s {
            "bn_affine" | "norm_affine" => Ok(Self::BnAffine),
            "extractor" => Ok(Self::Extractor),
            "classifier" => Ok(Self::Classifier),
            "aux" => Ok(Self::Aux),
            "all" => Ok(Self::All),
            other => Err(CoreError::UnknownGroup(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BnAffine => "bn_affine",
            Self::Extractor => "extractor",
            Self::Classifier => "classifier",
            Self::Aux => "aux",
            Self::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group,
    Layer,
}

/// Which statistics normalization layers use during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    /// Stored running statistics (inference mode).
    Running,
    /// Statistics of the current batch (adaptation mode).
    Batch,
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn new(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Self {
        let scale = (2.0 / inp as f64).sqrt();
        let w = Array2::from_shape_fn((out, inp), |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale);
        Linear {
            w,
            b: Array1::zeros(out),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Returns (d_input, d_w, d_b).
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.w);
        (dx, dw, db)
    }
}

/// Same-padded 1-d convolution over channel-major flattened rows.
#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `[c_out, c_in, k]`, k odd.
    pub w: Array3<f64>,
    pub b: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub k: usize,
}

impl Conv1d {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, len: usize, k: usize) -> Self {
        assert!(k % 2 == 1);
        let scale = (2.0 / (c_in * k) as f64).sqrt();
        let w = Array3::from_shape_fn((c_out, c_in, k), |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale);
        Conv1d {
            w,
            b: Array1::zeros(c_out),
            c_in,
            c_out,
            len,
            k,
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let b = x.nrows();
        let half = (self.k / 2) as isize;
        let mut out = Array2::zeros((b, self.c_out * self.len));
        for i in 0..b {
            for co in 0..self.c_out {
                for p in 0..self.len {
                    let mut acc = self.b[co];
                    for ci in 0..self.c_in {
                        for t in 0..self.k {
                            let q = p as isize + t as isize - half;
                            if q >= 0 && (q as usize) < self.len {
                                acc += self.w[[co, ci, t]] * x[[i, ci * self.len + q as usize]];
                            }
                        }
                    }
                    out[[i, co * self.len + p]] = acc;
                }
            }
        }
        out
    }

    fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array3<f64>, Array1<f64>) {
        let b = x.nrows();
        let half = (self.k / 2) as isize;
        let mut dx = Array2::zeros(x.raw_dim());
        let mut dw = Array3::zeros(self.w.raw_dim());
        let mut db = Array1::zeros(self.c_out);
        for i in 0..b {
            for co in 0..self.c_out {
                for p in 0..self.len {
                    let g = dy[[i, co * self.len + p]];
                    db[co] += g;
                    for ci in 0..self.c_in {
                        for t in 0..self.k {
                            let q = p as isize + t as isize - half;
                            if q >= 0 && (q as usize) < self.len {
                                dw[[co, ci, t]] += g * x[[i, ci * self.len + q as usize]];
                                dx[[i, ci * self.len + q as usize]] += g * self.w[[co, ci, t]];
                            }
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub kind: NormKind,
    pub channels: usize,
    pub positions: usize,
    /// Group count; 1 for layer norm, `channels` would be instance norm.
    pub groups: usize,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    /// Used only by `NormKind::Batch`.
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
}

impl NormLayer {
    fn new(kind: NormKind, channels: usize, positions: usize, groups: usize) -> Self {
        NormLayer {
            kind,
            channels,
            positions,
            groups,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: NORM_EPS,
        }
    }

    fn channel_of(&self, col: usize) -> usize {
        col / self.positions
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv1d(Conv1d),
    Norm(NormLayer),
    Relu,
    /// Mean over positions: `[b, c*l] -> [b, c]`.
    MeanPool { channels: usize, positions: usize },
}

/// Per-layer values saved by the forward pass for backprop.
pub enum LayerCache {
    Linear { x: Array2<f64> },
    Conv1d { x: Array2<f64> },
    Norm(NormCache),
    Relu { x: Array2<f64> },
    MeanPool,
}

pub struct NormCache {
    pub x: Array2<f64>,
    /// Normalized pre-affine activations.
    pub xhat: Array2<f64>,
    /// Per-channel batch statistics (batch-norm in Batch mode only).
    pub batch_mean: Option<Array1<f64>>,
    pub batch_var: Option<Array1<f64>>,
    /// Per-(sample, group) statistics for GN/LN.
    pub group_mean: Option<Array2<f64>>,
    pub group_var: Option<Array2<f64>>,
    pub mode: StatsMode,
}

/// Forward-pass cache: per-layer values plus the embedding fed to the heads.
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub embedding: Array2<f64>,
}

pub type GradMap = BTreeMap<String, Vec<f64>>;

/// One flat tensor in a serialized model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Complete serializable snapshot of a model: parameters, normalization
/// running statistics, and an opaque method-owned auxiliary blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub version_tag: String,
    pub parameters: BTreeMap<String, Tensor>,
    pub running_stats: BTreeMap<String, Tensor>,
    #[serde(default)]
    pub aux_state: serde_json::Value,
}

const STATE_SCHEMA_VERSION: u32 = 1;

/// Container file format for [`ModelState`].
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelStateFile {
    pub schema_version: u32,
    pub state: ModelState,
}

impl ModelState {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelStateFile {
            schema_version: STATE_SCHEMA_VERSION,
            state: self.clone(),
        })
        .expect("model state serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let file: ModelStateFile = serde_json::from_str(s).map_err(|e| e.to_string())?;
        if file.schema_version != STATE_SCHEMA_VERSION {
            return Err(format!(
                "unsupported model state schema version {}",
                file.schema_version
            ));
        }
        Ok(file.state)
    }
}

/// A live model: feature extractor, classifier head, optional auxiliary
/// head, with named parameters addressable by group.
#[derive(Debug, Clone)]
pub struct AdaptiveModel {
    pub arch_tag: String,
    pub input_dim: usize,
    pub class_count: usize,
    pub extractor: Vec<Layer>,
    pub classifier: Linear,
    pub aux_head: Option<Linear>,
}

impl AdaptiveModel {
    /// MLP: `depth` blocks of Linear -> Norm -> ReLU, then linear heads.
    pub fn mlp(
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        hidden: usize,
        depth: usize,
        class_count: usize,
        norm: NormKind,
        groups: usize,
        aux_head: bool,
    ) -> Self {
        let mut layers = Vec::new();
        let mut d = input_dim;
        for _ in 0..depth {
            layers.push(Layer::Linear(Linear::new(rng, d, hidden)));
            layers.push(Layer::Norm(NormLayer::new(norm, hidden, 1, groups)));
            layers.push(Layer::Relu);
            d = hidden;
        }
        let arch_tag = format!(
            "mlp-{:?}x{}g{}-in{}-h{}-d{}-c{}-aux{}",
            norm, depth, groups, input_dim, hidden, depth, class_count, aux_head
        );
        AdaptiveModel {
            arch_tag,
            input_dim,
            class_count,
            extractor: layers,
            classifier: Linear::new(rng, hidden, class_count),
            aux_head: aux_head.then(|| Linear::new(rng, hidden, 4)),
        }
    }

    /// Conv net: Conv1d -> BatchNorm -> ReLU -> MeanPool -> Linear -> Norm -> ReLU.
    pub fn small_conv(
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        channels: usize,
        hidden: usize,
        class_count: usize,
        aux_head: bool,
    ) -> Self {
        let layers = vec![
            Layer::Conv1d(Conv1d::new(rng, 1, channels, input_dim, 3)),
            Layer::Norm(NormLayer::new(NormKind::Batch, channels, input_dim, 1)),
            Layer::Relu,
            Layer::MeanPool {
                channels,
                positions: input_dim,
            },
            Layer::Linear(Linear::new(rng, channels, hidden)),
            Layer::Norm(NormLayer::new(NormKind::Batch, hidden, 1, 1)),
            Layer::Relu,
        ];
        let arch_tag = format!(
            "smallconv-bn-in{}-ch{}-h{}-c{}-aux{}",
            input_dim, channels, hidden, class_count, aux_head
        );
        AdaptiveModel {
            arch_tag,
            input_dim,
            class_count,
            extractor: layers,
            classifier: Linear::new(rng, hidden, class_count),
            aux_head: aux_head.then(|| Linear::new(rng, hidden, 4)),
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        self.extractor.iter().any(
            |l| matches!(l, Layer::Norm(n) if n.kind == NormKind::Batch),
        )
    }

    // ---------------------------------------------------------------- forward

    fn norm_forward(n: &NormLayer, x: &Array2<f64>, mode: StatsMode) -> NormCache {
        match n.kind {
            NormKind::Batch => {
                let (mean, var, is_batch) = match mode {
                    StatsMode::Running => (n.running_mean.clone(), n.running_var.clone(), false),
                    StatsMode::Batch => {
                        // stats per channel over (batch, positions)
                        let b = x.nrows();
                        let nper = (b * n.positions) as f64;
                        let mut mean = Array1::zeros(n.channels);
                        for i in 0..b {
                            for col in 0..x.ncols() {
                                mean[n.channel_of(col)] += x[[i, col]];
                            }
                        }
                        mean.mapv_inplace(|v| v / nper);
                        let mut var = Array1::zeros(n.channels);
                        for i in 0..b {
                            for col in 0..x.ncols() {
                                let c = n.channel_of(col);
                                let d = x[[i, col]] - mean[c];
                                var[c] += d * d;
                            }
                        }
                        var.mapv_inplace(|v| v / nper);
                        (mean, var, true)
                    }
                };
                let mut xhat = x.clone();
                for i in 0..x.nrows() {
                    for col in 0..x.ncols() {
                        let c = n.channel_of(col);
                        xhat[[i, col]] = (x[[i, col]] - mean[c]) / (var[c] + n.eps).sqrt();
                    }
                }
                NormCache {
                    x: x.clone(),
                    xhat,
                    batch_mean: is_batch.then(|| mean.clone()),
                    batch_var: is_batch.then(|| var.clone()),
                    group_mean: None,
                    group_var: None,
                    mode,
                }
            }
            NormKind::Group | NormKind::Layer => {
                // per-sample stats over each group of channels (all positions)
                let groups = if n.kind == NormKind::Layer { 1 } else { n.groups };
                let cpg = n.channels / groups;
                let b = x.nrows();
                let nper = (cpg * n.positions) as f64;
                let mut gmean: Array2<f64> = Array2::zeros((b, groups));
                let mut gvar: Array2<f64> = Array2::zeros((b, groups));
                for i in 0..b {
                    for col in 0..x.ncols() {
                        let g = n.channel_of(col) / cpg;
                        gmean[[i, g]] += x[[i, col]];
                    }
                    for g in 0..groups {
                        gmean[[i, g]] /= nper;
                    }
                    for col in 0..x.ncols() {
                        let g = n.channel_of(col) / cpg;
                        let d = x[[i, col]] - gmean[[i, g]];
                        gvar[[i, g]] += d * d;
                    }
                    for g in 0..groups {
                        gvar[[i, g]] /= nper;
                    }
                }
                let mut xhat = x.clone();
                for i in 0..b {
                    for col in 0..x.ncols() {
                        let g = n.channel_of(col) / cpg;
                        xhat[[i, col]] =
                            (x[[i, col]] - gmean[[i, g]]) / (gvar[[i, g]] + n.eps).sqrt();
                    }
                }
                NormCache {
                    x: x.clone(),
                    xhat,
                    batch_mean: None,
                    batch_var: None,
                    group_mean: Some(gmean),
                    group_var: Some(gvar),
                    mode,
                }
            }
        }
    }

    /// Forward through the extractor, caching everything needed for backprop.
    pub fn forward_cached(&self, x: &Array2<f64>, mode: StatsMode) -> (Array2<f64>, ForwardCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.extractor.len());
        for layer in &self.extractor {
            match layer {
                Layer::Linear(l) => {
                    let out = l.forward(&h);
                    caches.push(LayerCache::Linear { x: h });
                    h = out;
                }
                Layer::Conv1d(c) => {
                    let out = c.forward(&h);
                    caches.push(LayerCache::Conv1d { x: h });
                    h = out;
                }
                Layer::Norm(n) => {
                    let cache = Self::norm_forward(n, &h, mode);
                    let mut out = cache.xhat.clone();
                    for i in 0..out.nrows() {
                        for col in 0..out.ncols() {
                            let c = n.channel_of(col);
                            out[[i, col]] = out[[i, col]] * n.gamma[c] + n.beta[c];
                        }
                    }
                    caches.push(LayerCache::Norm(cache));
                    h = out;
                }
                Layer::Relu => {
                    caches.push(LayerCache::Relu { x: h.clone() });
                    h.mapv_inplace(|v| v.max(0.0));
                }
                Layer::MeanPool {
                    channels,
                    positions,
                } => {
                    let b = h.nrows();
                    let mut out = Array2::zeros((b, *channels));
                    for i in 0..b {
                        for c in 0..*channels {
                            let mut acc = 0.0;
                            for p in 0..*positions {
                                acc += h[[i, c * positions + p]];
                            }
                            out[[i, c]] = acc / *positions as f64;
                        }
                    }
                    caches.push(LayerCache::MeanPool);
                    h = out;
                }
            }
        }
        let logits = self.classifier.forward(&h);
        (
            logits,
            ForwardCache {
                layers: caches,
                embedding: h,
            },
        )
    }

    pub fn logits(&self, x: &Array2<f64>, mode: StatsMode) -> Array2<f64> {
        self.forward_cached(x, mode).0
    }

    pub fn probs(&self, x: &Array2<f64>, mode: StatsMode) -> Array2<f64> {
        softmax_rows(&self.logits(x, mode))
    }

    /// Inference-mode forward (running statistics).
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.logits(x, StatsMode::Running)
    }

    pub fn aux_logits(&self, cache: &ForwardCache) -> Option<Array2<f64>> {
        self.aux_head.as_ref().map(|h| h.forward(&cache.embedding))
    }

    /// Per-norm-layer batch statistics captured during a Batch-mode forward.
    /// Only batch-norm layers contribute; keys are layer names.
    pub fn cached_batch_stats(&self, cache: &ForwardCache) -> Vec<(String, Array1<f64>, Array1<f64>)> {
        let mut out = Vec::new();
        for (i, (layer, lc)) in self.extractor.iter().zip(&cache.layers).enumerate() {
            if let (Layer::Norm(n), LayerCache::Norm(nc)) = (layer, lc) {
                if n.kind == NormKind::Batch {
                    if let (Some(m), Some(v)) = (&nc.batch_mean, &nc.batch_var) {
                        out.push((format!("extractor.{i}"), m.clone(), v.clone()));
                    }
                }
            }
        }
        out
    }

    // --------------------------------------------------------------- backward

    fn norm_backward(n: &NormLayer, cache: &NormCache, dy: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let b = cache.x.nrows();
        let cols = cache.x.ncols();
        let mut dgamma = Array1::zeros(n.channels);
        let mut dbeta = Array1::zeros(n.channels);
        for i in 0..b {
            for col in 0..cols {
                let c = n.channel_of(col);
                dgamma[c] += dy[[i, col]] * cache.xhat[[i, col]];
                dbeta[c] += dy[[i, col]];
            }
        }
        // d xhat
        let mut dxhat = dy.clone();
        for i in 0..b {
            for col in 0..cols {
                dxhat[[i, col]] *= n.gamma[n.channel_of(col)];
            }
        }
        let dx = match (n.kind, cache.mode) {
            (NormKind::Batch, StatsMode::Running) => {
                let mut dx = dxhat;
                for i in 0..b {
                    for col in 0..cols {
                        let c = n.channel_of(col);
                        dx[[i, col]] /= (n.running_var[c] + n.eps).sqrt();
                    }
                }
                dx
            }
            (NormKind::Batch, StatsMode::Batch) => {
                let mean = cache.batch_mean.as_ref().unwrap();
                let var = cache.batch_var.as_ref().unwrap();
                let nper = (b * n.positions) as f64;
                // standard batch-norm backward, stats per channel
                let mut sum_dxhat: Array1<f64> = Array1::zeros(n.channels);
                let mut sum_dxhat_xhat: Array1<f64> = Array1::zeros(n.channels);
                for i in 0..b {
                    for col in 0..cols {
                        let c = n.channel_of(col);
                        sum_dxhat[c] += dxhat[[i, col]];
                        sum_dxhat_xhat[c] += dxhat[[i, col]] * cache.xhat[[i, col]];
                    }
                }
                let mut dx = Array2::zeros(cache.x.raw_dim());
                for i in 0..b {
                    for col in 0..cols {
                        let c = n.channel_of(col);
                        let inv_std = 1.0 / (var[c] + n.eps).sqrt();
                        let _ = mean;
                        dx[[i, col]] = inv_std / nper
                            * (nper * dxhat[[i, col]]
                                - sum_dxhat[c]
                                - cache.xhat[[i, col]] * sum_dxhat_xhat[c]);
                    }
                }
                dx
            }
            (_, _) => {
                // group/layer norm: per (sample, group) statistics
                let groups = if n.kind == NormKind::Layer { 1 } else { n.groups };
                let cpg = n.channels / groups;
                let gvar = cache.group_var.as_ref().unwrap();
                let nper = (cpg * n.positions) as f64;
                let mut dx = Array2::zeros(cache.x.raw_dim());
                for i in 0..b {
                    let mut sum_dxhat = vec![0.0; groups];
                    let mut sum_dxhat_xhat = vec![0.0; groups];
                    for col in 0..cols {
                        let g = n.channel_of(col) / cpg;
                        sum_dxhat[g] += dxhat[[i, col]];
                        sum_dxhat_xhat[g] += dxhat[[i, col]] * cache.xhat[[i, col]];
                    }
                    for col in 0..cols {
                        let g = n.channel_of(col) / cpg;
                        let inv_std = 1.0 / (gvar[[i, g]] + n.eps).sqrt();
                        dx[[i, col]] = inv_std / nper
                            * (nper * dxhat[[i, col]]
                                - sum_dxhat[g]
                                - cache.xhat[[i, col]] * sum_dxhat_xhat[g]);
                    }
                }
                dx
            }
        };
        (dx, dgamma, dbeta)
    }

    /// Backprop `d_logits` (and optionally `d_aux_logits`) to every
    /// parameter. Gradients are keyed by parameter name.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: Option<&Array2<f64>>,
        d_aux_logits: Option<&Array2<f64>>,
    ) -> GradMap {
        let mut grads = GradMap::new();
        let b = cache.embedding.nrows();
        let mut d_emb = Array2::zeros((b, cache.embedding.ncols()));
        if let Some(dz) = d_logits {
            let (dx, dw, db) = self.classifier.backward(&cache.embedding, dz);
            d_emb += &dx;
            grads.insert("classifier.weight".into(), dw.into_raw_vec());
            grads.insert("classifier.bias".into(), db.to_vec());
        }
        if let (Some(dz), Some(head)) = (d_aux_logits, &self.aux_head) {
            let (dx, dw, db) = head.backward(&cache.embedding, dz);
            d_emb += &dx;
            grads.insert("aux.weight".into(), dw.into_raw_vec());
            grads.insert("aux.bias".into(), db.to_vec());
        }
        let mut dy = d_emb;
        for (i, (layer, lc)) in self
            .extractor
            .iter()
            .zip(&cache.layers)
            .enumerate()
            .rev()
        {
            match (layer, lc) {
                (Layer::Linear(l), LayerCache::Linear { x }) => {
                    let (dx, dw, db) = l.backward(x, &dy);
                    grads.insert(format!("extractor.{i}.weight"), dw.into_raw_vec());
                    grads.insert(format!("extractor.{i}.bias"), db.to_vec());
                    dy = dx;
                }
                (Layer::Conv1d(c), LayerCache::Conv1d { x }) => {
                    let (dx, dw, db) = c.backward(x, &dy);
                    grads.insert(format!("extractor.{i}.weight"), dw.into_raw_vec());
                    grads.insert(format!("extractor.{i}.bias"), db.to_vec());
                    dy = dx;
                }
                (Layer::Norm(n), LayerCache::Norm(nc)) => {
                    let (dx, dg, dbt) = Self::norm_backward(n, nc, &dy);
                    grads.insert(format!("extractor.{i}.gamma"), dg.to_vec());
                    grads.insert(format!("extractor.{i}.beta"), dbt.to_vec());
                    dy = dx;
                }
                (Layer::Relu, LayerCache::Relu { x }) => {
                    for r in 0..dy.nrows() {
                        for c in 0..dy.ncols() {
                            if x[[r, c]] <= 0.0 {
                                dy[[r, c]] = 0.0;
                            }
                        }
                    }
                }
                (
                    Layer::MeanPool {
                        channels,
                        positions,
                    },
                    LayerCache::MeanPool,
                ) => {
                    let mut dx = Array2::zeros((dy.nrows(), channels * positions));
                    for r in 0..dy.nrows() {
                        for c in 0..*channels {
                            let g = dy[[r, c]] / *positions as f64;
                            for p in 0..*positions {
                                dx[[r, c * positions + p]] = g;
                            }
                        }
                    }
                    dy = dx;
                }
                _ => unreachable!("layer/cache mismatch"),
            }
        }
        grads
    }

    // ------------------------------------------------------- parameter access

    /// Names of every parameter, deterministic order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.extractor.iter().enumerate() {
            match layer {
                Layer::Linear(_) | Layer::Conv1d(_) => {
                    names.push(format!("extractor.{i}.weight"));
                    names.push(format!("extractor.{i}.bias"));
                }
                Layer::Norm(_) => {
                    names.push(format!("extractor.{i}.gamma"));
                    names.push(format!("extractor.{i}.beta"));
                }
                _ => {}
            }
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        if self.aux_head.is_some() {
            names.push("aux.weight".into());
            names.push("aux.bias".into());
        }
        names
    }

    /// Parameter names belonging to a group, deterministic order.
    pub fn group_members(&self, group: ParamGroup) -> Vec<String> {
        self.param_names()
            .into_iter()
            .filter(|n| match group {
                ParamGroup::All => true,
                ParamGroup::BnAffine => n.ends_with(".gamma") || n.ends_with(".beta"),
                ParamGroup::Extractor => {
                    n.starts_with("extractor.")
                        && (n.ends_with(".weight") || n.ends_with(".bias"))
                }
                ParamGroup::Classifier => n.starts_with("classifier."),
                ParamGroup::Aux => n.starts_with("aux."),
            })
            .collect()
    }

    /// `parameters_of`: (name, flat values) pairs for a named group.
    pub fn parameters_of(&self, group: &str) -> Result<Vec<(String, Vec<f64>)>, CoreError> {
        let g = ParamGroup::parse(group)?;
        Ok(self
            .group_members(g)
            .into_iter()
            .map(|n| {
                let v = self.param(&n).expect("listed param exists").to_vec();
                (n, v)
            })
            .collect())
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        let (loc, field) = split_name(name)?;
        match loc {
            Loc::Extractor(i) => match (self.extractor.get(i)?, field) {
                (Layer::Linear(l), "weight") => l.w.as_slice(),
                (Layer::Linear(l), "bias") => l.b.as_slice(),
                (Layer::Conv1d(c), "weight") => c.w.as_slice(),
                (Layer::Conv1d(c), "bias") => c.b.as_slice(),
                (Layer::Norm(n), "gamma") => n.gamma.as_slice(),
                (Layer::Norm(n), "beta") => n.beta.as_slice(),
                (Layer::Norm(n), "running_mean") => n.running_mean.as_slice(),
                (Layer::Norm(n), "running_var") => n.running_var.as_slice(),
                _ => None,
            },
            Loc::Classifier => match field {
                "weight" => self.classifier.w.as_slice(),
                "bias" => self.classifier.b.as_slice(),
                _ => None,
            },
            Loc::Aux => match (self.aux_head.as_ref()?, field) {
                (h, "weight") => h.w.as_slice(),
                (h, "bias") => h.b.as_slice(),
                _ => None,
            },
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (loc, field) = split_name(name)?;
        match loc {
            Loc::Extractor(i) => match (self.extractor.get_mut(i)?, field) {
                (Layer::Linear(l), "weight") => l.w.as_slice_mut(),
                (Layer::Linear(l), "bias") => l.b.as_slice_mut(),
                (Layer::Conv1d(c), "weight") => c.w.as_slice_mut(),
                (Layer::Conv1d(c), "bias") => c.b.as_slice_mut(),
                (Layer::Norm(n), "gamma") => n.gamma.as_slice_mut(),
                (Layer::Norm(n), "beta") => n.beta.as_slice_mut(),
                (Layer::Norm(n), "running_mean") => n.running_mean.as_slice_mut(),
                (Layer::Norm(n), "running_var") => n.running_var.as_slice_mut(),
                _ => None,
            },
            Loc::Classifier => match field {
                "weight" => self.classifier.w.as_slice_mut(),
                "bias" => self.classifier.b.as_slice_mut(),
                _ => None,
            },
            Loc::Aux => match (self.aux_head.as_mut()?, field) {
                (h, "weight") => h.w.as_slice_mut(),
                (h, "bias") => h.b.as_slice_mut(),
                _ => None,
            },
        }
    }

    fn param_shape(&self, name: &str) -> Option<Vec<usize>> {
        let (loc, field) = split_name(name)?;
        match loc {
            Loc::Extractor(i) => match (self.extractor.get(i)?, field) {
                (Layer::Linear(l), "weight") => Some(l.w.shape().to_vec()),
                (Layer::Linear(l), "bias") => Some(l.b.shape().to_vec()),
                (Layer::Conv1d(c), "weight") => Some(c.w.shape().to_vec()),
                (Layer::Conv1d(c), "bias") => Some(c.b.shape().to_vec()),
                (Layer::Norm(n), _) => Some(n.gamma.shape().to_vec()),
                _ => None,
            },
            Loc::Classifier => match field {
                "weight" => Some(self.classifier.w.shape().to_vec()),
                "bias" => Some(self.classifier.b.shape().to_vec()),
                _ => None,
            },
            Loc::Aux => {
                let h = self.aux_head.as_ref()?;
                match field {
                    "weight" => Some(h.w.shape().to_vec()),
                    "bias" => Some(h.b.shape().to_vec()),
                    _ => None,
                }
            }
        }
    }

    /// Names of running-statistic tensors (batch-norm layers only).
    pub fn running_stat_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.extractor.iter().enumerate() {
            if let Layer::Norm(n) = layer {
                if n.kind == NormKind::Batch {
                    names.push(format!("extractor.{i}.running_mean"));
                    names.push(format!("extractor.{i}.running_var"));
                }
            }
        }
        names
    }

    /// Names of normalization layers, e.g. `extractor.1`.
    pub fn norm_layer_names(&self) -> Vec<String> {
        self.extractor
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Norm(_)).then(|| format!("extractor.{i}")))
            .collect()
    }

    /// Override the running statistics of one normalization layer.
    pub fn set_norm_statistics(
        &mut self,
        layer_name: &str,
        mean: &[f64],
        var: &[f64],
    ) -> Result<(), CoreError> {
        let idx: usize = layer_name
            .strip_prefix("extractor.")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::UnknownLayer(layer_name.to_string()))?;
        match self.extractor.get_mut(idx) {
            Some(Layer::Norm(n)) => {
                if mean.len() != n.channels || var.len() != n.channels {
                    return Err(CoreError::ShapeMismatch {
                        name: layer_name.to_string(),
                        expected: n.channels,
                        got: mean.len().max(var.len()),
                    });
                }
                if let Some(c) = var.iter().position(|&v| v < 0.0) {
                    return Err(CoreError::NegativeVariance { channel: c });
                }
                n.running_mean = Array1::from_vec(mean.to_vec());
                n.running_var = Array1::from_vec(var.to_vec());
                Ok(())
            }
            _ => Err(CoreError::UnknownLayer(layer_name.to_string())),
        }
    }

    /// Per-channel statistics of `x` at the input of each batch-norm layer,
    /// as observed during a Batch-mode forward.
    pub fn batch_norm_stats(&self, x: &Array2<f64>) -> Vec<(String, Array1<f64>, Array1<f64>)> {
        let (_, cache) = self.forward_cached(x, StatsMode::Batch);
        self.cached_batch_stats(&cache)
    }

    // -------------------------------------------------------- snapshot/restore

    /// Deep value copy of all parameters and running statistics.
    pub fn snapshot(&self) -> ModelState {
        let mut parameters = BTreeMap::new();
        for name in self.param_names() {
            parameters.insert(
                name.clone(),
                Tensor {
                    shape: self.param_shape(&name).unwrap(),
                    data: self.param(&name).unwrap().to_vec(),
                },
            );
        }
        let mut running_stats = BTreeMap::new();
        for name in self.running_stat_names() {
            running_stats.insert(
                name.clone(),
                Tensor {
                    shape: vec![self.param(&name).unwrap().len()],
                    data: self.param(&name).unwrap().to_vec(),
                },
            );
        }
        ModelState {
            version_tag: self.arch_tag.clone(),
            parameters,
            running_stats,
            aux_state: serde_json::Value::Null,
        }
    }

    /// Restore a snapshot taken from a model with the same architecture tag.
    pub fn restore(&mut self, state: &ModelState) -> Result<(), CoreError> {
        if state.version_tag != self.arch_tag {
            return Err(CoreError::ArchitectureMismatch {
                state: state.version_tag.clone(),
                model: self.arch_tag.clone(),
            });
        }
        for name in self.param_names() {
            let t = state
                .parameters
                .get(&name)
                .ok_or_else(|| CoreError::MissingEntry(name.clone()))?;
            let dst = self.param_mut(&name).unwrap();
            if dst.len() != t.data.len() {
                return Err(CoreError::ShapeMismatch {
                    name,
                    expected: dst.len(),
                    got: t.data.len(),
                });
            }
            dst.copy_from_slice(&t.data);
        }
        for name in self.running_stat_names() {
            let t = state
                .running_stats
                .get(&name)
                .ok_or_else(|| CoreError::MissingEntry(name.clone()))?;
            let dst = self.param_mut(&name).unwrap();
            if dst.len() != t.data.len() {
                return Err(CoreError::ShapeMismatch {
                    name,
                    expected: dst.len(),
                    got: t.data.len(),
                });
            }
            dst.copy_from_slice(&t.data);
        }
        Ok(())
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.param_names()
            .iter()
            .map(|n| self.param(n).unwrap().len())
            .sum()
    }

    /// Empirical per-channel batch stats helper used by BN adaptation.
    pub fn column_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
        let m = col_mean(x);
        let v = col_var_biased(x, &m);
        (m, v)
    }
}

enum Loc {
    Extractor(usize),
    Classifier,
    Aux,
}

fn split_name(name: &str) -> Option<(Loc, &str)> {
    let mut parts = name.splitn(3, '.');
    match parts.next()? {
        "extractor" => {
            let idx: usize = parts.next()?.parse().ok()?;
            Some((Loc::Extractor(idx), parts.next()?))
        }
        "classifier" => Some((Loc::Classifier, parts.next()?)),
        "aux" => Some((Loc::Aux, parts.next()?)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn toy_model(norm: NormKind) -> AdaptiveModel {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        AdaptiveModel::mlp(&mut rng, 6, 8, 2, 4, norm, 2, true)
    }

    fn toy_input(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((b, d), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn snapshot_restore_round_trip_exact() {
        let mut m = toy_model(NormKind::Batch);
        let x = toy_input(5, 6, 1);
        let before = m.forward(&x);
        let snap = m.snapshot();
        // mutate a BN gamma by +1, then restore
        let gamma = m.param_mut("extractor.1.gamma").unwrap();
        let orig = gamma[0];
        gamma[0] += 1.0;
        assert_ne!(m.forward(&x), before);
        m.restore(&snap).unwrap();
        assert_eq!(m.param("extractor.1.gamma").unwrap()[0], orig);
        assert_eq!(m.forward(&x), before);
    }

    #[test]
    fn restore_wrong_architecture_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let other = AdaptiveModel::mlp(&mut rng, 5, 8, 2, 4, NormKind::Batch, 2, true);
        let mut m = toy_model(NormKind::Batch);
        let err = m.restore(&other.snapshot()).unwrap_err();
        assert!(matches!(err, CoreError::ArchitectureMismatch { .. }));
    }

    #[test]
    fn groups_partition_all() {
        for norm in [NormKind::Batch, NormKind::Group, NormKind::Layer] {
            let m = toy_model(norm);
            let mut union: Vec<String> = Vec::new();
            for g in [
                ParamGroup::BnAffine,
                ParamGroup::Extractor,
                ParamGroup::Classifier,
                ParamGroup::Aux,
            ] {
                let members = m.group_members(g);
                for n in &members {
                    assert!(!union.contains(n), "group overlap at {n}");
                }
                union.extend(members);
            }
            union.sort();
            let mut all = m.group_members(ParamGroup::All);
            all.sort();
            assert_eq!(union, all);
        }
    }

    #[test]
    fn gn_affine_lives_in_bn_affine_alias() {
        let m = toy_model(NormKind::Group);
        let names = m.parameters_of("norm_affine").unwrap();
        assert!(!names.is_empty());
        assert!(names.iter().all(|(n, _)| n.ends_with(".gamma") || n.ends_with(".beta")));
    }

    #[test]
    fn unknown_group_rejected() {
        let m = toy_model(NormKind::Batch);
        assert!(matches!(
            m.parameters_of("backbone"),
            Err(CoreError::UnknownGroup(_))
        ));
    }

    #[test]
    fn set_norm_statistics_checks() {
        let mut m = toy_model(NormKind::Batch);
        let x = toy_input(4, 6, 2);
        let before = m.forward(&x);
        // setting stats equal to stored running stats: logits unchanged
        let rm = m.param("extractor.1.running_mean").unwrap().to_vec();
        let rv = m.param("extractor.1.running_var").unwrap().to_vec();
        m.set_norm_statistics("extractor.1", &rm, &rv).unwrap();
        assert_eq!(m.forward(&x), before);
        // shifting the mean changes logits on a generic input
        let shifted: Vec<f64> = rm.iter().map(|v| v + 0.5).collect();
        m.set_norm_statistics("extractor.1", &shifted, &rv).unwrap();
        assert_ne!(m.forward(&x), before);
        // negative variance rejected
        let mut bad = rv.clone();
        bad[0] = -1.0;
        assert!(matches!(
            m.set_norm_statistics("extractor.1", &rm, &bad),
            Err(CoreError::NegativeVariance { .. })
        ));
        // shape mismatch rejected
        assert!(matches!(
            m.set_norm_statistics("extractor.1", &rm[..2], &rv[..2]),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn inference_forward_is_pure() {
        let m = toy_model(NormKind::Batch);
        let x = toy_input(3, 6, 5);
        let a = m.forward(&x);
        let b = m.forward(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn state_json_round_trip_is_bit_exact() {
        let m = toy_model(NormKind::Batch);
        let snap = m.snapshot();
        let json = snap.to_json();
        let back = ModelState::from_json(&json).unwrap();
        assert_eq!(snap, back);
    }

    #[test]
    fn fifty_snapshots_stay_small() {
        let m = toy_model(NormKind::Batch);
        let one = m.snapshot().to_json().len();
        assert!(one * 50 < 50 * 1024 * 1024, "50 snapshots = {} bytes", one * 50);
    }

    /// Central finite differences against the hand-written backward pass,
    /// using a scalar test loss sum(logits^2)/2 (+ same on aux logits).
    #[test]
    fn backward_matches_finite_differences() {
        for norm in [NormKind::Batch, NormKind::Group, NormKind::Layer] {
            for mode in [StatsMode::Running, StatsMode::Batch] {
                let mut m = toy_model(norm);
                let x = toy_input(6, 6, 9);
                let (logits, cache) = m.forward_cached(&x, mode);
                let aux = m.aux_logits(&cache).unwrap();
                let grads = m.backward(&cache, Some(&logits.clone()), Some(&aux.clone()));
                let eps = 1e-6;
                for name in m.param_names() {
                    let len = m.param(&name).unwrap().len();
                    for k in (0..len).step_by(len.max(3) / 3) {
                        let orig = m.param(&name).unwrap()[k];
                        let eval = |m: &AdaptiveModel| {
                            let (z, c) = m.forward_cached(&x, mode);
                            let a = m.aux_logits(&c).unwrap();
                            0.5 * (z.iter().map(|v| v * v).sum::<f64>()
                                + a.iter().map(|v| v * v).sum::<f64>())
                        };
                        m.param_mut(&name).unwrap()[k] = orig + eps;
                        let lp = eval(&m);
                        m.param_mut(&name).unwrap()[k] = orig - eps;
                        let lm = eval(&m);
                        m.param_mut(&name).unwrap()[k] = orig;
                        let fd = (lp - lm) / (2.0 * eps);
                        let an = grads[&name][k];
                        // near-zero true gradients (e.g. bias before BN in
                        // batch mode) are dominated by FD roundoff
                        if fd.abs() < 1e-6 && an.abs() < 1e-6 {
                            continue;
                        }
                        let denom = fd.abs().max(an.abs());
                        assert!(
                            (fd - an).abs() / denom < 1e-4,
                            "{name}[{k}] {norm:?} {mode:?}: fd={fd} an={an}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_model_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = AdaptiveModel::small_conv(&mut rng, 6, 3, 5, 4, false);
        let x = toy_input(4, 6, 13);
        let (logits, cache) = m.forward_cached(&x, StatsMode::Batch);
        let grads = m.backward(&cache, Some(&logits.clone()), None);
        let eps = 1e-6;
        for name in ["extractor.0.weight", "extractor.1.gamma", "classifier.weight"] {
            let orig = m.param(name).unwrap()[0];
            let eval = |m: &AdaptiveModel| {
                let z = m.logits(&x, StatsMode::Batch);
                0.5 * z.iter().map(|v| v * v).sum::<f64>()
            };
            m.param_mut(name).unwrap()[0] = orig + eps;
            let lp = eval(&m);
            m.param_mut(name).unwrap()[0] = orig - eps;
            let lm = eval(&m);
            m.param_mut(name).unwrap()[0] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads[name][0];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4,
                "{name}: fd={fd} an={an}"
            );
        }
    }
}
