//! Transformer networks on top of the [`graph`] autodiff engine.
//!
//! Three networks share one trunk layout (four-way input embedding, pre-norm
//! transformer layers, final layer norm) and differ in their heads:
//!
//! * generator: LM head, bag-of-words head, latent posterior head
//! * selector: coherence head, masked-LM head
//! * discriminator: coherence head

pub mod checkpoint;
pub mod graph;
pub mod inputs;
pub mod losses;
mod network;

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Gradients, Graph, Var};
pub use network::{
    embed_inputs, encoder_forward, generator_forward, generator_sequence, next_token_logits, EncoderOutput,
    LatentInjection, Net,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence length {len} exceeds limit {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("{field} id {id} out of range (table has {size} rows)")]
    IdOutOfRange { field: &'static str, id: u32, size: usize },
    #[error("latent value {z} out of range for K={k}")]
    LatentOutOfRange { z: usize, k: usize },
    #[error("backward needs a 1x1 root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("network `{kind:?}` has no tensor `{name}`")]
    MissingTensor { kind: NetworkKind, name: String },
}

/// Dense `f32` tensor with an optional same-shape gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    #[serde(skip)]
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor shape/value mismatch"
        );
        Self {
            shape: shape.to_vec(),
            values,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// `(rows, cols)` view; vectors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => (1, self.values.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let (_, c) = self.dims2();
        &self.values[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Rows of the position table. Sequences are limited to
    /// `min(max_seq_len, position_embedding_size)`.
    pub position_embedding_size: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub latent_count: usize,
    pub role_count: usize,
    /// Rows of the turn table; one more than the deepest context.
    pub turn_count: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            max_seq_len: 128,
            position_embedding_size: 128,
            hidden_dim: 128,
            ffn_dim: 512,
            layer_count: 2,
            head_count: 4,
            latent_count: 5,
            role_count: 2,
            turn_count: crate::dialogue_graph::DEFAULT_MAX_DEPTH as usize + 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for tests and smoke runs.
    pub fn tiny(vocab_size: usize, latent_count: usize) -> Self {
        Self {
            vocab_size,
            max_seq_len: 64,
            position_embedding_size: 64,
            hidden_dim: 16,
            ffn_dim: 32,
            layer_count: 1,
            head_count: 2,
            latent_count,
            role_count: 2,
            turn_count: 9,
            seed: 0,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_seq_len.min(self.position_embedding_size)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("position_embedding_size", self.position_embedding_size),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("head_count", self.head_count),
            ("latent_count", self.latent_count),
            ("role_count", self.role_count),
            ("turn_count", self.turn_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.head_count) {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} not divisible by head_count {}",
                self.hidden_dim, self.head_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Generator,
    Selector,
    Discriminator,
}

/// A discrete latent value `z` in `[0, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVariable(pub usize);

impl LatentVariable {
    pub fn new(z: usize, k: usize) -> Result<Self, ModelError> {
        if z >= k {
            return Err(ModelError::LatentOutOfRange { z, k });
        }
        Ok(Self(z))
    }

    pub fn value(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Uniform with the given standard deviation.
    Uniform(f32),
}

/// Named tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub kind: NetworkKind,
    pub config: ModelConfig,
    tensors: IndexMap<String, Tensor>,
}

impl Parameters {
    fn layout(kind: NetworkKind, c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let d = c.hidden_dim;
        let emb = Init::Uniform(0.1);
        let lin = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f32).sqrt());
        let resid = Init::Uniform(1.0 / ((c.ffn_dim.max(d) * 2 * c.layer_count.max(1)) as f32).sqrt());
        let mut out = vec![
            ("tok_emb".to_string(), vec![c.vocab_size, d], emb),
            ("role_emb".to_string(), vec![c.role_count, d], emb),
            ("turn_emb".to_string(), vec![c.turn_count, d], emb),
            ("pos_emb".to_string(), vec![c.position_embedding_size, d], emb),
        ];
        for l in 0..c.layer_count {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("ln1.g"), vec![1, d], Init::Ones),
                (p("ln1.b"), vec![1, d], Init::Zeros),
                (p("attn.wq"), vec![d, d], lin(d)),
                (p("attn.bq"), vec![1, d], Init::Zeros),
                (p("attn.wk"), vec![d, d], lin(d)),
                (p("attn.bk"), vec![1, d], Init::Zeros),
                (p("attn.wv"), vec![d, d], lin(d)),
                (p("attn.bv"), vec![1, d], Init::Zeros),
                (p("attn.wo"), vec![d, d], resid),
                (p("attn.bo"), vec![1, d], Init::Zeros),
                (p("ln2.g"), vec![1, d], Init::Ones),
                (p("ln2.b"), vec![1, d], Init::Zeros),
                (p("ffn.w1"), vec![d, c.ffn_dim], lin(d)),
                (p("ffn.b1"), vec![1, c.ffn_dim], Init::Zeros),
                (p("ffn.w2"), vec![c.ffn_dim, d], resid),
                (p("ffn.b2"), vec![1, d], Init::Zeros),
            ]);
        }
        out.push(("ln_f.g".into(), vec![1, d], Init::Ones));
        out.push(("ln_f.b".into(), vec![1, d], Init::Zeros));
        let head = |name: &str, width: usize, init: Init| {
            [
                (format!("{name}.w"), vec![d, width], init),
                (format!("{name}.b"), vec![1, width], Init::Zeros),
            ]
        };
        match kind {
            NetworkKind::Generator => {
                out.extend(head("lm_head", c.vocab_size, lin(d)));
                out.extend(head("bow_head", c.vocab_size, lin(d)));
                out.extend(head("latent_head", c.latent_count, lin(d)));
            }
            NetworkKind::Selector => {
                out.extend(head("coherence_head", 1, Init::Zeros));
                out.extend(head("mlm_head", c.vocab_size, lin(d)));
            }
            NetworkKind::Discriminator => {
                out.extend(head("coherence_head", 1, Init::Zeros));
            }
        }
        out
    }

    /// Seeded random initialization. Coherence heads start at zero, so an
    /// untrained scorer outputs exactly 0.5.
    pub fn init(kind: NetworkKind, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = Self::layout(kind, config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let values = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(std) => {
                        let a = std * 3f32.sqrt();
                        let dist = Uniform::new_inclusive(-a, a);
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                (name, Tensor::from_values(&shape, values))
            })
            .collect();
        Ok(Self {
            kind,
            config: config.clone(),
            tensors,
        })
    }

    /// Every tensor zero, layer-norm gains included.
    pub fn zeros(kind: NetworkKind, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = Self::layout(kind, config)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)))
            .collect();
        Ok(Self {
            kind,
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds from named tensors, checking names and shapes against the layout.
    pub fn from_tensors(
        kind: NetworkKind,
        config: ModelConfig,
        mut tensors: IndexMap<String, Tensor>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut ordered = IndexMap::new();
        for (name, shape, _) in Self::layout(kind, &config) {
            let t = tensors.swap_remove(&name).ok_or_else(|| ModelError::MissingTensor {
                kind,
                name: name.clone(),
            })?;
            if t.shape != shape {
                return Err(ModelError::InvalidInput(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            ordered.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::InvalidInput(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            kind,
            config,
            tensors: ordered,
        })
    }

    /// Copies every tensor whose name and shape match `other` (trunk transfer
    /// between network kinds). Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &Parameters) -> usize {
        let mut n = 0;
        for (name, t) in self.tensors.iter_mut() {
            if let Some(src) = other.tensors.get(name) {
                if src.shape == t.shape {
                    t.values.clone_from(&src.values);
                    n += 1;
                }
            }
        }
        n
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// Binds every tensor as a trainable leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph) -> Net<'a> {
        Net::bind(self, g)
    }

    /// Copies accumulated gradients onto each tensor's `grad` field.
    pub fn store_grads(&mut self, grads: &ParamGrads) {
        for (t, g) in self.tensors.values_mut().zip(&grads.0) {
            t.grad = Some(g.iter().map(|&x| x as f32).collect());
        }
    }

    /// `w -= lr * g` on every tensor.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) {
        for (t, g) in self.tensors.values_mut().zip(&grads.0) {
            for (w, &d) in t.values.iter_mut().zip(g) {
                *w = (*w as f64 - lr * d) as f32;
            }
        }
    }
}

/// Per-tensor `f64` gradient buffers aligned with [`Parameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl ParamGrads {
    pub fn zeros_like(p: &Parameters) -> Self {
        Self(p.tensors.values().map(|t| vec![0.0; t.numel()]).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Builds a scalar objective on a fresh graph and returns its value.
pub fn evaluate<F>(params: &Parameters, build: F) -> Result<f64, ModelError>
where
    F: FnOnce(&mut Graph, &Net) -> Result<Var, ModelError>,
{
    let mut g = Graph::new();
    let net = params.bind(&mut g);
    let root = build(&mut g, &net)?;
    Ok(g.scalar(root))
}

/// Value and parameter gradients of a scalar objective.
pub fn value_and_grad<F>(params: &Parameters, build: F) -> Result<(f64, ParamGrads), ModelError>
where
    F: FnOnce(&mut Graph, &Net) -> Result<Var, ModelError>,
{
    let mut g = Graph::new();
    let net = params.bind(&mut g);
    let root = build(&mut g, &net)?;
    let grads = g.backward(root)?;
    Ok((g.scalar(root), net.collect_grads(&grads)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(300, 3);
        assert!(c.validate().is_ok());
        c.head_count = 3;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
        c.head_count = 2;
        c.latent_count = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn heads_depend_on_kind() {
        let c = ModelConfig::tiny(40, 3);
        let g = Parameters::init(NetworkKind::Generator, &c).unwrap();
        let s = Parameters::init(NetworkKind::Selector, &c).unwrap();
        let d = Parameters::init(NetworkKind::Discriminator, &c).unwrap();
        assert!(g.get("bow_head.w").is_some() && g.get("latent_head.w").unwrap().shape == vec![16, 3]);
        assert!(s.get("mlm_head.w").is_some() && s.get("lm_head.w").is_none());
        assert!(d.get("coherence_head.w").unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::tiny(40, 3);
        let a = Parameters::init(NetworkKind::Generator, &c).unwrap();
        let b = Parameters::init(NetworkKind::Generator, &c).unwrap();
        assert_eq!(a, b);
        let c2 = ModelConfig { seed: 1, ..c };
        assert_ne!(a, Parameters::init(NetworkKind::Generator, &c2).unwrap());
    }

    #[test]
    fn latent_bounds() {
        assert!(LatentVariable::new(2, 3).is_ok());
        assert_eq!(
            LatentVariable::new(3, 3),
            Err(ModelError::LatentOutOfRange { z: 3, k: 3 })
        );
    }
}
