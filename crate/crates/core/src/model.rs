//! Multimodal encoder-decoder: patch image encoder, cross-attending text
//! encoder, causal question decoder, and the projection head producing `Q_it`.

use std::collections::HashMap;

use convqg_grad::{Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::toyworld::{DEFAULT_GRID, PATCH_DIM};
use crate::vocab::BOS;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_in: usize,
    pub max_patches: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub d_sent: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_in: PATCH_DIM,
            max_patches: DEFAULT_GRID * DEFAULT_GRID,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 32,
            d_sent: 64,
            dropout: 0.0,
        }
    }

    /// Base-size layout: 12 layers of 12 heads over 30x30 patches of a 480px image.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_in: 16 * 16 * 3,
            max_patches: 30 * 30,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            max_len: 40,
            d_sent: 768,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_in", self.d_in),
            ("max_patches", self.max_patches),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("d_sent", self.d_sent),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
}

/// Name, shape and initializer of every trainable tensor, in a fixed order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let small = Init::Normal(0.02);
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    let norm = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        add(format!("{p}.g"), vec![d], Init::Ones);
        add(format!("{p}.b"), vec![d], Init::Zeros);
    };
    let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for w in ["q", "k", "v", "o"] {
            add(format!("{p}.w{w}"), vec![d, d], fan(d));
            add(format!("{p}.b{w}"), vec![d], Init::Zeros);
        }
    };
    let ffn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        add(format!("{p}.w1"), vec![d, c.d_ff], fan(d));
        add(format!("{p}.b1"), vec![c.d_ff], Init::Zeros);
        add(format!("{p}.w2"), vec![c.d_ff, d], fan(c.d_ff));
        add(format!("{p}.b2"), vec![d], Init::Zeros);
    };

    add("tok.emb".into(), vec![c.vocab_size, d], small);

    add("img.patch.w".into(), vec![c.d_in, d], fan(c.d_in));
    add("img.patch.b".into(), vec![d], Init::Zeros);
    add("img.pos".into(), vec![c.max_patches, d], small);
    for l in 0..c.n_layers {
        norm(&mut add, &format!("img.{l}.ln1"));
        attn(&mut add, &format!("img.{l}.self"));
        norm(&mut add, &format!("img.{l}.ln2"));
        ffn(&mut add, &format!("img.{l}.ff"));
    }
    norm(&mut add, "img.ln");

    add("txt.pos".into(), vec![c.max_len, d], small);
    for l in 0..c.n_layers {
        norm(&mut add, &format!("txt.{l}.ln1"));
        attn(&mut add, &format!("txt.{l}.self"));
        norm(&mut add, &format!("txt.{l}.ln2"));
        attn(&mut add, &format!("txt.{l}.cross"));
        norm(&mut add, &format!("txt.{l}.ln3"));
        ffn(&mut add, &format!("txt.{l}.ff"));
    }
    norm(&mut add, "txt.ln");

    add("dec.pos".into(), vec![c.max_len, d], small);
    for l in 0..c.n_layers {
        norm(&mut add, &format!("dec.{l}.ln1"));
        attn(&mut add, &format!("dec.{l}.self"));
        norm(&mut add, &format!("dec.{l}.ln2"));
        attn(&mut add, &format!("dec.{l}.cross"));
        norm(&mut add, &format!("dec.{l}.ln3"));
        ffn(&mut add, &format!("dec.{l}.ff"));
    }
    norm(&mut add, "dec.ln");
    add("dec.out.w".into(), vec![d, c.vocab_size], fan(d));
    add("dec.out.b".into(), vec![c.vocab_size], Init::Zeros);

    add("head.w".into(), vec![d, c.d_sent], fan(d));
    add("head.b".into(), vec![c.d_sent], Init::Zeros);
    specs
}

/// Number of trainable scalars for `config`.
pub fn parameter_count(config: &ModelConfig) -> usize {
    param_specs(config).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Named trainable tensors in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    /// Seeded initialization for `config`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = param_specs(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| F::lit(dist.sample(&mut rng))).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Self::from_parts(names, tensors)
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<F>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Checkpoint("name and tensor counts differ".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor name `{n}`")));
            }
        }
        Ok(Self { names, tensors, index })
    }

    /// Checks names and shapes against the layout `config` expects.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let specs = param_specs(config);
        if specs.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.names.len()
            )));
        }
        for ((name, shape, _), (n, t)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{n}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// One forward pass over a private graph. Parameters are bound lazily, as
/// trainable leaves when `trainable` is set and as constants otherwise.
pub struct Session<'a, F: Real> {
    pub graph: Graph<F>,
    pub config: &'a ModelConfig,
    params: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    trainable: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a, F: Real> Session<'a, F> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore<F>, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            config,
            params,
            bound: vec![None; params.len()],
            trainable,
            dropout_rng: None,
        }
    }

    /// Enables dropout (if configured) with a seeded mask stream.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        if self.config.dropout > 0.0 {
            self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        }
        self
    }

    pub fn param(&mut self, name: &str) -> Var {
        let i = self.params.position(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let t = self.params.tensors[i].clone();
        let v = if self.trainable { self.graph.param(t) } else { self.graph.constant(t) };
        self.bound[i] = Some(v);
        v
    }

    /// Gradients of all parameters after `graph.backward`, zero for unused ones.
    pub fn param_grads(&self) -> Vec<Tensor<F>> {
        self.params
            .tensors
            .iter()
            .zip(&self.bound)
            .map(|(t, b)| {
                let data = b.and_then(|v| self.graph.grad(v)).map(<[F]>::to_vec);
                Tensor::new(t.shape().to_vec(), data.unwrap_or_else(|| vec![F::zero(); t.len()]))
                    .expect("same shape")
            })
            .collect()
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.param(w), self.param(b));
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_bias(y, b)?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"));
        let b = self.param(&format!("{prefix}.b"));
        Ok(self.graph.layer_norm(x, g, b)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = self.dropout_rng.as_mut() else { return Ok(x) };
        let shape = self.graph.shape(x).to_vec();
        let n = shape.iter().product();
        let keep = F::lit(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..n).map(|_| if rng.random_bool(p) { F::zero() } else { keep }).collect();
        let m = self.graph.constant(Tensor::new(shape, mask)?);
        Ok(self.graph.mul(x, m)?)
    }

    /// Multi-head attention of `xq` over `xkv`.
    pub fn attention(&mut self, xq: Var, xkv: Var, prefix: &str, causal: bool) -> Result<Var> {
        let q = self.linear(xq, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(xkv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(xkv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let dh = self.config.head_dim();
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let g = &mut self.graph;
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let a = if causal { g.causal_softmax(s)? } else { g.softmax(s, 1)? };
            heads.push(g.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { self.graph.concat_cols(&heads)? };
        self.linear(cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.graph.gelu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn residual(&mut self, x: Var, update: Var) -> Result<Var> {
        let update = self.dropout(update)?;
        Ok(self.graph.add(x, update)?)
    }

    /// `E_i`: one row per patch.
    pub fn encode_image(&mut self, patches: &Tensor<F>) -> Result<Var> {
        let c = self.config;
        let (n, d_in) = match patches.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::Input(format!("patches must be a matrix, got {s:?}"))),
        };
        if d_in != c.d_in {
            return Err(Error::Input(format!("patch width {d_in} does not match d_in {}", c.d_in)));
        }
        if n > c.max_patches {
            return Err(Error::Input(format!("{n} patches exceed max_patches {}", c.max_patches)));
        }
        let p = self.graph.constant(patches.clone());
        let x = self.linear(p, "img.patch.w", "img.patch.b")?;
        let pos = self.param("img.pos");
        let pos = self.graph.embedding(pos, &(0..n).collect::<Vec<_>>())?;
        let mut x = self.graph.add(x, pos)?;
        for l in 0..c.n_layers {
            let h = self.norm(x, &format!("img.{l}.ln1"))?;
            let h = self.attention(h, h, &format!("img.{l}.self"), false)?;
            x = self.residual(x, h)?;
            let h = self.norm(x, &format!("img.{l}.ln2"))?;
            let h = self.feed_forward(h, &format!("img.{l}.ff"))?;
            x = self.residual(x, h)?;
        }
        self.norm(x, "img.ln")
    }

    fn embed_tokens(&mut self, ids: &[usize], pos_table: &str) -> Result<Var> {
        let c = self.config;
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if ids.len() > c.max_len {
            return Err(Error::Input(format!("{} tokens exceed max_len {}", ids.len(), c.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        let table = self.param("tok.emb");
        let e = self.graph.embedding(table, ids)?;
        let pos = self.param(pos_table);
        let p = self.graph.embedding(pos, &(0..ids.len()).collect::<Vec<_>>())?;
        Ok(self.graph.add(e, p)?)
    }

    /// `E_it`: constraint tokens attending to themselves and to `e_i`.
    pub fn encode_text(&mut self, ids: &[usize], e_i: Var) -> Result<Var> {
        let mut x = self.embed_tokens(ids, "txt.pos")?;
        for l in 0..self.config.n_layers {
            let h = self.norm(x, &format!("txt.{l}.ln1"))?;
            let h = self.attention(h, h, &format!("txt.{l}.self"), false)?;
            x = self.residual(x, h)?;
            let h = self.norm(x, &format!("txt.{l}.ln2"))?;
            let h = self.attention(h, e_i, &format!("txt.{l}.cross"), false)?;
            x = self.residual(x, h)?;
            let h = self.norm(x, &format!("txt.{l}.ln3"))?;
            let h = self.feed_forward(h, &format!("txt.{l}.ff"))?;
            x = self.residual(x, h)?;
        }
        self.norm(x, "txt.ln")
    }

    /// Final decoder hidden states for teacher-forced `input` (starting with BOS).
    pub fn decoder_states(&mut self, e_it: Var, input: &[usize]) -> Result<Var> {
        if input.first() != Some(&BOS) {
            return Err(Error::Input("decoder input must start with [BOS]".into()));
        }
        let mut x = self.embed_tokens(input, "dec.pos")?;
        for l in 0..self.config.n_layers {
            let h = self.norm(x, &format!("dec.{l}.ln1"))?;
            let h = self.attention(h, h, &format!("dec.{l}.self"), true)?;
            x = self.residual(x, h)?;
            let h = self.norm(x, &format!("dec.{l}.ln2"))?;
            let h = self.attention(h, e_it, &format!("dec.{l}.cross"), false)?;
            x = self.residual(x, h)?;
            let h = self.norm(x, &format!("dec.{l}.ln3"))?;
            let h = self.feed_forward(h, &format!("dec.{l}.ff"))?;
            x = self.residual(x, h)?;
        }
        self.norm(x, "dec.ln")
    }

    /// Next-token logits `[T x V]` from decoder states.
    pub fn logits(&mut self, states: Var) -> Result<Var> {
        self.linear(states, "dec.out.w", "dec.out.b")
    }

    /// `Q_it`: the decoder state at the BOS position, projected to the
    /// sentence space and unit-normalized. Causal masking makes it a function
    /// of `E_it` alone, never of the teacher-forced question.
    pub fn question_embedding(&mut self, states: Var) -> Result<Var> {
        let first = self.graph.mean_rows(states, &[0])?;
        let d = self.config.d_model;
        let row = self.graph.reshape(first, &[1, d])?;
        let y = self.linear(row, "head.w", "head.b")?;
        let y = self.graph.reshape(y, &[self.config.d_sent])?;
        Ok(self.graph.l2_normalize(y)?)
    }

    /// Teacher-forced logits for `input`.
    pub fn decode_question(&mut self, e_it: Var, input: &[usize]) -> Result<Var> {
        let s = self.decoder_states(e_it, input)?;
        self.logits(s)
    }
}
