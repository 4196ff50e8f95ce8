use super::graph::{Gradients, Graph, Var};
use super::{LatentVariable, ModelError, NetworkKind, ParamGrads, Parameters, Tensor};
use crate::tokenizer::{EncodedSequence, BOS, FIRST_LATENT};

/// A [`Parameters`] set bound as leaves of one graph.
pub struct Net<'a> {
    params: &'a Parameters,
    vars: Vec<Var>,
}

/// How the latent value enters the generator's lead position.
#[derive(Debug, Clone, Copy)]
pub enum LatentInjection {
    /// Lead token is `<bos>`.
    None,
    /// Lead token is `<z>`.
    Fixed(LatentVariable),
    /// Lead token is the sampled `<z>`; `probs` (`1 x K` posterior) receives
    /// a straight-through gradient via `probs · E_latent`.
    StraightThrough { z: LatentVariable, probs: Var },
}

impl LatentInjection {
    fn lead_token(self) -> u32 {
        match self {
            LatentInjection::None => BOS,
            LatentInjection::Fixed(z) | LatentInjection::StraightThrough { z, .. } => FIRST_LATENT + z.0 as u32,
        }
    }
}

impl<'a> Net<'a> {
    pub(crate) fn bind(params: &'a Parameters, g: &mut Graph) -> Self {
        let vars = params
            .tensors()
            .values()
            .map(|t| {
                let (r, c) = t.dims2();
                g.param(r, c, &t.values)
            })
            .collect();
        Self { params, vars }
    }

    pub fn params(&self) -> &Parameters {
        self.params
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .tensors()
            .get_index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingTensor {
                kind: self.params.kind,
                name: name.to_string(),
            })
    }

    fn v(&self, name: &str) -> Var {
        self.var(name).expect("layout tensor present")
    }

    /// Gradients of every bound tensor, zero where unreached.
    pub fn collect_grads(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads(
            self.params
                .tensors()
                .values()
                .zip(&self.vars)
                .map(|(t, &v)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect(),
        )
    }

    /// Four-way embedding sum, one row per position.
    pub fn embed(&self, g: &mut Graph, seq: &EncodedSequence) -> Result<Var, ModelError> {
        let c = &self.params.config;
        if seq.is_empty() {
            return Err(ModelError::InvalidInput("empty sequence".into()));
        }
        if seq.len() > c.max_len() {
            return Err(ModelError::LengthOverflow {
                len: seq.len(),
                max: c.max_len(),
            });
        }
        let lookups = [
            ("tok_emb", "token", &seq.token_ids, c.vocab_size),
            ("role_emb", "role", &seq.role_ids, c.role_count),
            ("turn_emb", "turn", &seq.turn_ids, c.turn_count),
            ("pos_emb", "position", &seq.position_ids, c.position_embedding_size),
        ];
        let mut sum: Option<Var> = None;
        for (table, field, ids, size) in lookups {
            if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
                return Err(ModelError::IdOutOfRange { field, id, size });
            }
            let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
            let rows = g.gather(self.v(table), &idx);
            sum = Some(match sum {
                None => rows,
                Some(s) => g.add(s, rows),
            });
        }
        Ok(sum.unwrap())
    }

    /// `x · W + b` for the head or projection named `prefix`.
    pub fn linear(&self, g: &mut Graph, x: Var, w: &str, b: &str) -> Var {
        let y = g.matmul(x, self.v(w));
        g.add_row(y, self.v(b))
    }

    pub fn head(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var, ModelError> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        let y = g.matmul(x, w);
        Ok(g.add_row(y, b))
    }

    /// Pre-norm transformer layers followed by the final layer norm.
    pub fn trunk(&self, g: &mut Graph, mut x: Var, causal: bool) -> Var {
        let c = &self.params.config;
        for l in 0..c.layer_count {
            let p = |s: &str| format!("layer{l}.{s}");
            let h = g.layer_norm(x, self.v(&p("ln1.g")), self.v(&p("ln1.b")));
            let q = self.linear(g, h, &p("attn.wq"), &p("attn.bq"));
            let k = self.linear(g, h, &p("attn.wk"), &p("attn.bk"));
            let v = self.linear(g, h, &p("attn.wv"), &p("attn.bv"));
            let a = g.attention(q, k, v, c.head_count, causal);
            let a = self.linear(g, a, &p("attn.wo"), &p("attn.bo"));
            x = g.add(x, a);
            let h = g.layer_norm(x, self.v(&p("ln2.g")), self.v(&p("ln2.b")));
            let h = self.linear(g, h, &p("ffn.w1"), &p("ffn.b1"));
            let h = g.gelu(h);
            let h = self.linear(g, h, &p("ffn.w2"), &p("ffn.b2"));
            x = g.add(x, h);
        }
        g.layer_norm(x, self.v("ln_f.g"), self.v("ln_f.b"))
    }

    /// Causal hidden states over a sequence that already carries its lead token.
    pub fn generator_hidden(
        &self,
        g: &mut Graph,
        seq: &EncodedSequence,
        latent: LatentInjection,
    ) -> Result<Var, ModelError> {
        let mut x = self.embed(g, seq)?;
        if let LatentInjection::StraightThrough { probs, .. } = latent {
            let k = self.params.config.latent_count;
            let ids: Vec<usize> = (0..k).map(|z| FIRST_LATENT as usize + z).collect();
            let table = g.gather(self.v("tok_emb"), &ids);
            let table = g.detach(table);
            let mix = g.matmul(probs, table);
            let frozen = g.detach(mix);
            let delta = g.sub(mix, frozen);
            x = g.add_to_row(x, delta, 0);
        }
        Ok(self.trunk(g, x, true))
    }

    /// Bidirectional hidden states; row 0 is the pooled representation.
    pub fn encoder_hidden(&self, g: &mut Graph, seq: &EncodedSequence) -> Result<Var, ModelError> {
        let x = self.embed(g, seq)?;
        Ok(self.trunk(g, x, false))
    }

    /// Coherence logit (`1 x 1`) of an encoder-layout sequence.
    pub fn coherence_logit(&self, g: &mut Graph, seq: &EncodedSequence) -> Result<Var, ModelError> {
        let h = self.encoder_hidden(g, seq)?;
        let pooled = g.select_rows(h, &[0]);
        self.head(g, pooled, "coherence_head")
    }

    /// Posterior logits (`1 x K`) over latent values from a `[bos] C R` sequence.
    pub fn posterior_logits(&self, g: &mut Graph, seq: &EncodedSequence) -> Result<Var, ModelError> {
        let h = self.encoder_hidden(g, seq)?;
        let pooled = g.select_rows(h, &[0]);
        self.head(g, pooled, "latent_head")
    }
}

/// Lead token, then `context`, then `response_prefix`, as one causal input.
pub fn generator_sequence(context: &EncodedSequence, response_prefix: &EncodedSequence, lead: u32) -> EncodedSequence {
    let role = context
        .role_ids
        .first()
        .or(response_prefix.role_ids.first())
        .copied()
        .unwrap_or(0);
    let mut seq = EncodedSequence::default();
    seq.push(lead, role, 0);
    seq.concat(context).concat(response_prefix)
}

fn to_tensor(g: &Graph, v: Var) -> Tensor {
    let (r, c) = g.shape(v);
    Tensor::from_values(&[r, c], g.value(v).iter().map(|&x| x as f32).collect())
}

/// Four-way embedding sum `[L x hidden]`.
pub fn embed_inputs(p: &Parameters, e: &EncodedSequence) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let net = p.bind(&mut g);
    let x = net.embed(&mut g, e)?;
    Ok(to_tensor(&g, x))
}

fn expect_kind(p: &Parameters, kinds: &[NetworkKind]) -> Result<(), ModelError> {
    if kinds.contains(&p.kind) {
        Ok(())
    } else {
        Err(ModelError::InvalidInput(format!(
            "{:?} network used where {kinds:?} expected",
            p.kind
        )))
    }
}

/// Next-token distributions `[L x vocab]` for every position of
/// `lead ‖ context ‖ response_prefix`, where the lead token is `<z>` when a
/// latent value is given and `<bos>` otherwise.
pub fn generator_forward(
    p: &Parameters,
    context: &EncodedSequence,
    response_prefix: &EncodedSequence,
    z: Option<LatentVariable>,
) -> Result<Tensor, ModelError> {
    expect_kind(p, &[NetworkKind::Generator])?;
    let latent = latent_injection(p, z)?;
    let seq = generator_sequence(context, response_prefix, latent.lead_token());
    let mut g = Graph::new();
    let net = p.bind(&mut g);
    let h = net.generator_hidden(&mut g, &seq, latent)?;
    let logits = net.head(&mut g, h, "lm_head")?;
    let probs = g.softmax(logits);
    Ok(to_tensor(&g, probs))
}

fn latent_injection(p: &Parameters, z: Option<LatentVariable>) -> Result<LatentInjection, ModelError> {
    Ok(match z {
        None => LatentInjection::None,
        Some(z) => LatentInjection::Fixed(LatentVariable::new(z.0, p.config.latent_count)?),
    })
}

/// Logits for the token following `lead ‖ context ‖ response_prefix`.
pub fn next_token_logits(
    p: &Parameters,
    context: &EncodedSequence,
    response_prefix: &EncodedSequence,
    z: Option<LatentVariable>,
) -> Result<Vec<f64>, ModelError> {
    expect_kind(p, &[NetworkKind::Generator])?;
    let latent = latent_injection(p, z)?;
    let seq = generator_sequence(context, response_prefix, latent.lead_token());
    let mut g = Graph::new();
    let net = p.bind(&mut g);
    let h = net.generator_hidden(&mut g, &seq, latent)?;
    let last = g.select_rows(h, &[seq.len() - 1]);
    let logits = net.head(&mut g, last, "lm_head")?;
    Ok(g.value(logits).to_vec())
}

/// Output of [`encoder_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Hidden state at position 0, `[hidden]`.
    pub pooled: Tensor,
    /// `[L x hidden]`.
    pub hidden: Tensor,
}

/// Bidirectional encoding of `sequence`.
pub fn encoder_forward(p: &Parameters, sequence: &EncodedSequence) -> Result<EncoderOutput, ModelError> {
    let mut g = Graph::new();
    let net = p.bind(&mut g);
    let h = net.encoder_hidden(&mut g, sequence)?;
    let hidden = to_tensor(&g, h);
    let d = p.config.hidden_dim;
    let pooled = Tensor::from_values(&[d], hidden.values[..d].to_vec());
    Ok(EncoderOutput { pooled, hidden })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn seq(tokens: &[u32]) -> EncodedSequence {
        let mut s = EncodedSequence::default();
        for &t in tokens {
            s.push(t, 0, 0);
        }
        s
    }

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(40, 3)
    }

    #[test]
    fn zero_embeddings_sum_to_zero() {
        let p = Parameters::zeros(NetworkKind::Generator, &cfg()).unwrap();
        let out = embed_inputs(&p, &seq(&[9, 10, 11])).unwrap();
        assert_eq!(out.shape, vec![3, 16]);
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_table_in_isolation() {
        let mut p = Parameters::zeros(NetworkKind::Generator, &cfg()).unwrap();
        let t = p.get_mut("tok_emb").unwrap();
        for (i, v) in t.values.iter_mut().enumerate() {
            *v = i as f32 * 0.01;
        }
        let out = embed_inputs(&p, &seq(&[9, 2])).unwrap();
        let table = p.get("tok_emb").unwrap();
        assert_eq!(out.row(0), table.row(9));
        assert_eq!(out.row(1), table.row(2));
    }

    #[test]
    fn embedding_rejects_bad_ids_and_length() {
        let p = Parameters::init(NetworkKind::Generator, &cfg()).unwrap();
        assert!(matches!(
            embed_inputs(&p, &seq(&[40])),
            Err(ModelError::IdOutOfRange {
                field: "token",
                id: 40,
                ..
            })
        ));
        let long = seq(&vec![9; 65]);
        assert_eq!(
            embed_inputs(&p, &long),
            Err(ModelError::LengthOverflow { len: 65, max: 64 })
        );
    }

    #[test]
    fn zero_generator_is_uniform() {
        let p = Parameters::zeros(NetworkKind::Generator, &cfg()).unwrap();
        let probs = generator_forward(&p, &seq(&[9, 10]), &seq(&[11]), None).unwrap();
        assert_eq!(probs.shape, vec![4, 40]);
        assert!(probs.values.iter().all(|&v| (v - 1.0 / 40.0).abs() < 1e-7));
    }

    #[test]
    fn rows_are_distributions() {
        let p = Parameters::init(NetworkKind::Generator, &cfg()).unwrap();
        let probs = generator_forward(&p, &seq(&[9, 10, 30]), &seq(&[]), Some(LatentVariable(1))).unwrap();
        for r in 0..4 {
            let s: f64 = probs.row(r).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn next_token_logits_match_last_row() {
        let p = Parameters::init(NetworkKind::Generator, &cfg()).unwrap();
        let ctx = seq(&[9, 10, 30]);
        let probs = generator_forward(&p, &ctx, &seq(&[12]), None).unwrap();
        let mut logits = next_token_logits(&p, &ctx, &seq(&[12]), None).unwrap();
        crate::model::graph::softmax_in_place(&mut logits);
        for (a, b) in probs.row(4).iter().zip(&logits) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_encoder_pools_zero() {
        let p = Parameters::zeros(NetworkKind::Selector, &cfg()).unwrap();
        let out = encoder_forward(&p, &seq(&[1, 9, 2])).unwrap();
        assert_eq!(out.pooled.shape, vec![16]);
        assert_eq!(out.hidden.shape, vec![3, 16]);
        assert!(out.pooled.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_rejects_out_of_range_latent() {
        let p = Parameters::init(NetworkKind::Generator, &cfg()).unwrap();
        assert!(matches!(
            generator_forward(&p, &seq(&[9]), &seq(&[]), Some(LatentVariable(3))),
            Err(ModelError::LatentOutOfRange { .. })
        ));
    }
}
