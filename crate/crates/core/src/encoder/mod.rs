//! Compact post-LN transformer encoder with learned absolute positions.

mod batch;
pub mod gradcheck;
pub mod pooling;
pub mod tokenizer;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::TokenBatch;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use pooling::{cosine_similarity, l2_normalize, pool_mean, EPS_NORM};
pub use tokenizer::{EncodedSentence, Vocab, CLS_ID, PAD_ID, SEP_ID, UNK_ID};

use crate::autodiff::{Graph, NodeId, Real};
use crate::error::{Error, Result};
use crate::lora::{AdapterGroup, Projection, Task, TaskPrimaryAdapterSet};
use crate::params::{cast_array, truncated_normal, LayerNormParams, Linear, Parameters};

pub const INIT_SIGMA: f64 = 0.02;
const LN_EPS: f64 = 1e-12;

/// RNG used for every stochastic step (init, dropout, sampling).
pub type TrainRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dropout() -> f64 {
    0.1
}

impl EncoderConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size,
            max_seq_len: 16,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    /// Layer/width layout of the 6-layer MiniLM family.
    pub fn minilm_like(vocab_size: usize) -> Self {
        Self {
            num_layers: 6,
            hidden_dim: 384,
            num_heads: 12,
            ffn_dim: 1536,
            vocab_size,
            max_seq_len: 128,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    /// Layer/width layout of DistilBERT.
    pub fn distilbert_like(vocab_size: usize) -> Self {
        Self {
            num_layers: 6,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            vocab_size,
            max_seq_len: 128,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0
            || self.hidden_dim == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 1 {
            return Err(Error::config("max_seq_len must be >= 1"));
        }
        if self.vocab_size < 4 {
            return Err(Error::config(
                "vocab_size must be >= 4 (pad, unk, cls, sep)",
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) || self.dropout_rate == 1.0 {
            return Err(Error::config("dropout_rate must be in [0, 1)"));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("ffn_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub attn_norm: LayerNormParams<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNormParams<T>,
}

impl<T: Real> EncoderLayer<T> {
    pub fn projection(&self, p: Projection) -> &Linear<T> {
        match p {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
            Projection::Output => &self.output,
            Projection::FfnIn => &self.ffn_in,
            Projection::FfnOut => &self.ffn_out,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Linear<T> {
        match p {
            Projection::Query => &mut self.query,
            Projection::Key => &mut self.key,
            Projection::Value => &mut self.value,
            Projection::Output => &mut self.output,
            Projection::FfnIn => &mut self.ffn_in,
            Projection::FfnOut => &mut self.ffn_out,
        }
    }

    fn cast<U: Real>(&self) -> EncoderLayer<U> {
        EncoderLayer {
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
            attn_norm: self.attn_norm.cast(),
            ffn_in: self.ffn_in.cast(),
            ffn_out: self.ffn_out.cast(),
            ffn_norm: self.ffn_norm.cast(),
        }
    }
}

/// All backbone weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub token_embeddings: Array2<T>,
    pub position_embeddings: Array2<T>,
    pub layers: Vec<EncoderLayer<T>>,
}

pub(crate) fn layer_prefix(layer: usize) -> String {
    format!("encoder.layers.{layer}")
}

impl<T: Real> EncoderParams<T> {
    /// Truncated-normal weights (σ = 0.02), zero biases, unit layer-norm gains.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let token_embeddings = truncated_normal(config.vocab_size, d, INIT_SIGMA, &mut rng);
        let position_embeddings = truncated_normal(config.max_seq_len, d, INIT_SIGMA, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                query: Linear::new(d, d, INIT_SIGMA, &mut rng),
                key: Linear::new(d, d, INIT_SIGMA, &mut rng),
                value: Linear::new(d, d, INIT_SIGMA, &mut rng),
                output: Linear::new(d, d, INIT_SIGMA, &mut rng),
                attn_norm: LayerNormParams::new(d),
                ffn_in: Linear::new(d, config.ffn_dim, INIT_SIGMA, &mut rng),
                ffn_out: Linear::new(config.ffn_dim, d, INIT_SIGMA, &mut rng),
                ffn_norm: LayerNormParams::new(d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embeddings,
            position_embeddings,
            layers,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Shapes match the config and every value is finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.hidden_dim;
        let check = |name: &str, a: &Array2<T>, shape: (usize, usize)| -> Result<()> {
            if a.dim() != shape {
                return Err(Error::shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    a.dim()
                )));
            }
            Ok(())
        };
        check(
            "token_embeddings",
            &self.token_embeddings,
            (c.vocab_size, d),
        )?;
        check(
            "position_embeddings",
            &self.position_embeddings,
            (c.max_seq_len, d),
        )?;
        if self.layers.len() != c.num_layers {
            return Err(Error::shape("layer count differs from config"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for p in Projection::ALL {
                let (o, inp) = p.dims(c);
                check(&format!("layer {i} {p}"), &l.projection(p).weight, (o, inp))?;
                check(
                    &format!("layer {i} {p} bias"),
                    &l.projection(p).bias,
                    (1, o),
                )?;
            }
        }
        if !self.all_finite() {
            return Err(Error::config(
                "encoder parameters contain non-finite values",
            ));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            token_embeddings: cast_array(&self.token_embeddings),
            position_embeddings: cast_array(&self.position_embeddings),
            layers: self.layers.iter().map(EncoderLayer::cast).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for EncoderParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<T>)) {
        f("encoder.token_embeddings", &self.token_embeddings);
        f("encoder.position_embeddings", &self.position_embeddings);
        for (i, l) in self.layers.iter().enumerate() {
            let p = layer_prefix(i);
            for proj in Projection::ALL {
                l.projection(proj)
                    .visit_named(&format!("{p}.{}", proj.name()), f);
            }
            f(&format!("{p}.attn_norm.gain"), &l.attn_norm.gain);
            f(&format!("{p}.attn_norm.bias"), &l.attn_norm.bias);
            f(&format!("{p}.ffn_norm.gain"), &l.ffn_norm.gain);
            f(&format!("{p}.ffn_norm.bias"), &l.ffn_norm.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        f("encoder.token_embeddings", &mut self.token_embeddings);
        f("encoder.position_embeddings", &mut self.position_embeddings);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = layer_prefix(i);
            for proj in Projection::ALL {
                l.projection_mut(proj)
                    .visit_named_mut(&format!("{p}.{}", proj.name()), f);
            }
            f(&format!("{p}.attn_norm.gain"), &mut l.attn_norm.gain);
            f(&format!("{p}.attn_norm.bias"), &mut l.attn_norm.bias);
            f(&format!("{p}.ffn_norm.gain"), &mut l.ffn_norm.gain);
            f(&format!("{p}.ffn_norm.bias"), &mut l.ffn_norm.bias);
        }
    }
}

/// Train mode carries the dropout RNG; eval mode is a pure function.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut TrainRng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

fn dropout<T: Real>(g: &mut Graph<T>, x: NodeId, rate: f64, mode: &mut Mode<'_>) -> Result<NodeId> {
    let Mode::Train(rng) = mode else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let dim = g.value(x).dim();
    let mask = Array2::from_shape_simple_fn(dim, || {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    g.mul_const(x, mask)
}

fn project<T: Real>(
    g: &mut Graph<T>,
    layer: &EncoderLayer<T>,
    index: usize,
    proj: Projection,
    adapter: Option<&AdapterGroup<T>>,
    x: NodeId,
) -> Result<NodeId> {
    let base =
        layer
            .projection(proj)
            .graph(g, &format!("{}.{}", layer_prefix(index), proj.name()), x)?;
    match adapter.and_then(|a| a.module(index, proj).map(|m| (a, m))) {
        Some((group, module)) if !module.is_merged() => {
            let delta = module.graph(g, &group.module_prefix(index, proj), x)?;
            g.add(base, delta)
        }
        _ => Ok(base),
    }
}

/// Builds the encoder on `g` and returns the `(batch·seq) × hidden` node of
/// final-layer token states. `adapter` is the single LoRA group that takes
/// part in this pass.
pub fn encode_graph<T: Real>(
    g: &mut Graph<T>,
    batch: &TokenBatch,
    params: &EncoderParams<T>,
    adapter: Option<&AdapterGroup<T>>,
    mode: &mut Mode<'_>,
) -> Result<NodeId> {
    let cfg = &params.config;
    batch.validate(cfg)?;
    if let Some(a) = adapter {
        a.check_compatible(cfg)?;
    }
    let (bsz, seq) = batch.dims();
    let ids: Vec<usize> = batch.token_ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();

    let tok_table = g.param("encoder.token_embeddings", &params.token_embeddings);
    let pos_table = g.param("encoder.position_embeddings", &params.position_embeddings);
    let tok = g.gather(tok_table, &ids)?;
    let pos = g.gather(pos_table, &positions)?;
    let mut h = g.add(tok, pos)?;
    h = dropout(g, h, cfg.dropout_rate, mode)?;

    let key_mask: Vec<bool> = batch.attention_mask.iter().map(|&m| m != 0).collect();
    let eps = T::lit(LN_EPS);
    for (i, layer) in params.layers.iter().enumerate() {
        let p = layer_prefix(i);
        let q = project(g, layer, i, Projection::Query, adapter, h)?;
        let k = project(g, layer, i, Projection::Key, adapter, h)?;
        let v = project(g, layer, i, Projection::Value, adapter, h)?;
        let att = g.attention(q, k, v, bsz, seq, cfg.num_heads, &key_mask)?;
        let mut o = project(g, layer, i, Projection::Output, adapter, att)?;
        o = dropout(g, o, cfg.dropout_rate, mode)?;
        let r1 = g.add(h, o)?;
        let gain = g.param(&format!("{p}.attn_norm.gain"), &layer.attn_norm.gain);
        let bias = g.param(&format!("{p}.attn_norm.bias"), &layer.attn_norm.bias);
        let h1 = g.layer_norm(r1, gain, bias, eps);

        let f = project(g, layer, i, Projection::FfnIn, adapter, h1)?;
        let f = g.gelu(f);
        let mut f = project(g, layer, i, Projection::FfnOut, adapter, f)?;
        f = dropout(g, f, cfg.dropout_rate, mode)?;
        let r2 = g.add(h1, f)?;
        let gain = g.param(&format!("{p}.ffn_norm.gain"), &layer.ffn_norm.gain);
        let bias = g.param(&format!("{p}.ffn_norm.bias"), &layer.ffn_norm.bias);
        h = g.layer_norm(r2, gain, bias, eps);

        if g.value(h).iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInstability { layer: i });
        }
    }
    Ok(h)
}

/// Per-token embeddings `batch × seq_len × hidden`.
///
/// When `adapters` is given, `active_task` picks the one group that
/// participates; the other group is not touched.
pub fn encode_tokens<T: Real>(
    batch: &TokenBatch,
    params: &EncoderParams<T>,
    adapters: Option<&TaskPrimaryAdapterSet<T>>,
    active_task: Option<Task>,
    mut mode: Mode<'_>,
) -> Result<Array3<T>> {
    let group = match (adapters, active_task) {
        (Some(set), Some(task)) => set.group(task),
        _ => None,
    };
    encode_with_group(batch, params, group, &mut mode)
}

pub fn encode_with_group<T: Real>(
    batch: &TokenBatch,
    params: &EncoderParams<T>,
    group: Option<&AdapterGroup<T>>,
    mode: &mut Mode<'_>,
) -> Result<Array3<T>> {
    let mut g = Graph::new();
    let h = encode_graph(&mut g, batch, params, group, mode)?;
    let (b, s) = batch.dims();
    let d = params.hidden_dim();
    Ok(g.value(h)
        .clone()
        .into_shape_with_order((b, s, d))
        .expect("row-major layout"))
}

impl Projection {
    /// `(out_dim, in_dim)` of the projection's weight.
    pub fn dims(self, cfg: &EncoderConfig) -> (usize, usize) {
        let d = cfg.hidden_dim;
        match self {
            Projection::FfnIn => (cfg.ffn_dim, d),
            Projection::FfnOut => (d, cfg.ffn_dim),
            _ => (d, d),
        }
    }
}
