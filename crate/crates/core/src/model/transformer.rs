use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{log_softmax, LanguageModel, ModelConfig, NormPlacement, ParamCounts, PositionalMode};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Extra gain on the output classifiers so a fresh model starts close to
/// uniform over the vocabulary.
const HEAD_INIT_GAIN: f64 = 0.5;
/// Windows per forward graph when scoring many contexts.
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    pos: Option<usize>,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    byte_emb: usize,
    layers: Vec<LayerIdx>,
    final_norm: Option<(usize, usize)>,
    /// `heads[layer][offset - 1] = (weight, bias)`
    heads: Vec<Vec<(usize, usize)>>,
}

/// Which positions of each window get classifier outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positions {
    All,
    /// The last `n` positions.
    Tail(usize),
}

/// Output classifiers to evaluate in a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRequest {
    /// Zero-based layer indices.
    pub layers: Vec<usize>,
    /// Target offsets, `1` meaning the next character.
    pub offsets: Vec<usize>,
    pub positions: Positions,
}

impl HeadRequest {
    /// The inference head only: final layer, next character, last position.
    pub fn inference(config: &ModelConfig) -> Self {
        HeadRequest {
            layers: vec![config.n_layers - 1],
            offsets: vec![1],
            positions: Positions::Tail(1),
        }
    }

    /// Every head of every layer at every position.
    pub fn all(config: &ModelConfig) -> Self {
        HeadRequest {
            layers: (0..config.n_layers).collect(),
            offsets: (1..=config.n_targets).collect(),
            positions: Positions::All,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLogits {
    pub layer: usize,
    pub offset: usize,
    /// Shape `[batch * positions.len(), vocab]`, batch-major.
    pub logits: Var,
}

/// Logits of a forward pass, materialised only for the requested heads.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub batch: usize,
    pub seq_len: usize,
    /// Sequence positions that have logits, ascending.
    pub positions: Vec<usize>,
    pub heads: Vec<HeadLogits>,
    bindings: Vec<(usize, Var)>,
}

impl ForwardOutput {
    pub fn logits(&self, layer: usize, offset: usize) -> Option<Var> {
        self.heads
            .iter()
            .find(|h| h.layer == layer && h.offset == offset)
            .map(|h| h.logits)
    }

    /// Logits of one batch element as `[layer, position, offset, vocab]`,
    /// over the requested layers and offsets in ascending order.
    pub fn stacked<T: Scalar>(&self, g: &Graph<T>, batch_index: usize) -> Result<Tensor<T>> {
        let mut layers: Vec<usize> = self.heads.iter().map(|h| h.layer).collect();
        let mut offsets: Vec<usize> = self.heads.iter().map(|h| h.offset).collect();
        layers.sort_unstable();
        layers.dedup();
        offsets.sort_unstable();
        offsets.dedup();
        if batch_index >= self.batch {
            return Err(Error::Index {
                index: batch_index,
                size: self.batch,
            });
        }
        let npos = self.positions.len();
        let vocab = self
            .heads
            .first()
            .map(|h| g.shape(h.logits)[1])
            .unwrap_or(0);
        let mut data = Vec::with_capacity(layers.len() * npos * offsets.len() * vocab);
        for &l in &layers {
            for p in 0..npos {
                for &k in &offsets {
                    let var = self.logits(l, k).ok_or_else(|| {
                        Error::Contract(format!("head (layer {l}, offset {k}) was not requested"))
                    })?;
                    let row = batch_index * npos + p;
                    data.extend_from_slice(&g.value(var)[row * vocab..(row + 1) * vocab]);
                }
            }
        }
        Tensor::new(&[layers.len(), npos, offsets.len(), vocab], data)
    }
}

/// The full parameter set: byte embedding, per-layer positional tables,
/// transformer blocks and one classifier per (layer, target offset).
///
/// Parameters are stored in a fixed order, which is also the checkpoint
/// order:
///
/// 1. `byte_embedding` `[V, d]`
/// 2. for each layer `l`: `layer{l}.pos` `[L, d]` (learned mode only), then
///    attention `wq bq wk bk wv bv wo bo`, `ln1.gain ln1.bias`, feed-forward
///    `w1 b1 w2 b2`, `ln2.gain ln2.bias`
/// 3. `final_norm.gain final_norm.bias` when enabled
/// 4. `head{l}.{k}.w` `[d, V]` and `.b` `[V]`, layer-major then offset
///
/// Projection weights are stored `[fan_in, fan_out]` and applied as `x·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLM<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    layout: Layout,
}

struct Builder<T: Scalar> {
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    rng: Option<ChaCha8Rng>,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform(f64),
    Normal(f64),
    Zeros,
    Ones,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match (init, self.rng.as_mut()) {
            (_, None) | (Init::Zeros, _) => vec![T::zero(); n],
            (Init::Ones, _) => vec![T::one(); n],
            (Init::Uniform(a), Some(rng)) => {
                (0..n).map(|_| T::from_f64(rng.random_range(-a..a))).collect()
            }
            (Init::Normal(std), Some(rng)) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
            }
        };
        self.params
            .push(Tensor::param(shape, data).expect("shape matches data"));
        self.names.push(name);
        self.params.len() - 1
    }
}

impl<T: Scalar> TransformerLM<T> {
    /// Fresh parameters: fan-in scaled uniform projections, `N(0, 1/√d)`
    /// embeddings, zero biases, unit norm gains. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// All-zero parameters with the layout of `config`; used when loading.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let (d, v, l) = (config.d_model, config.vocab, config.seq_len);
        let dff = config.d_ff;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            rng,
        };
        let emb_std = 1.0 / (d as f64).sqrt();
        let proj = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
        let byte_emb = b.add("byte_embedding".into(), &[v, d], Init::Normal(emb_std));
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("layer{i}.{s}");
            let pos = match config.positional {
                PositionalMode::PerLayerLearned => {
                    Some(b.add(p("pos"), &[l, d], Init::Normal(emb_std)))
                }
                PositionalMode::SinusoidalInputOnly => None,
            };
            layers.push(LayerIdx {
                pos,
                wq: b.add(p("attn.wq"), &[d, d], proj(d)),
                bq: b.add(p("attn.bq"), &[d], Init::Zeros),
                wk: b.add(p("attn.wk"), &[d, d], proj(d)),
                bk: b.add(p("attn.bk"), &[d], Init::Zeros),
                wv: b.add(p("attn.wv"), &[d, d], proj(d)),
                bv: b.add(p("attn.bv"), &[d], Init::Zeros),
                wo: b.add(p("attn.wo"), &[d, d], proj(d)),
                bo: b.add(p("attn.bo"), &[d], Init::Zeros),
                ln1_g: b.add(p("ln1.gain"), &[d], Init::Ones),
                ln1_b: b.add(p("ln1.bias"), &[d], Init::Zeros),
                w1: b.add(p("ff.w1"), &[d, dff], proj(d)),
                b1: b.add(p("ff.b1"), &[dff], Init::Zeros),
                w2: b.add(p("ff.w2"), &[dff, d], proj(dff)),
                b2: b.add(p("ff.b2"), &[d], Init::Zeros),
                ln2_g: b.add(p("ln2.gain"), &[d], Init::Ones),
                ln2_b: b.add(p("ln2.bias"), &[d], Init::Zeros),
            });
        }
        let final_norm = config.final_norm_enabled().then(|| {
            (
                b.add("final_norm.gain".into(), &[d], Init::Ones),
                b.add("final_norm.bias".into(), &[d], Init::Zeros),
            )
        });
        let head_init = Init::Uniform(HEAD_INIT_GAIN / (d as f64).sqrt());
        let heads = (0..config.n_layers)
            .map(|i| {
                (1..=config.n_targets)
                    .map(|k| {
                        let w = b.add(format!("head{i}.{k}.w"), &[d, v], head_init);
                        (w, b.add(format!("head{i}.{k}.b"), &[v], Init::Zeros))
                    })
                    .collect()
            })
            .collect();
        Ok(TransformerLM {
            config,
            params: b.params,
            names: b.names,
            layout: Layout {
                byte_emb,
                layers,
                final_norm,
                heads,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Counts taken from the allocated tensors.
    pub fn param_counts(&self) -> ParamCounts {
        let train: usize = self.params.iter().map(Tensor::numel).sum();
        let n = self.config.n_layers;
        let mut training_only = 0;
        for (l, heads) in self.layout.heads.iter().enumerate() {
            for (k, &(w, b)) in heads.iter().enumerate() {
                if !(l == n - 1 && k == 0) {
                    training_only += self.params[w].numel() + self.params[b].numel();
                }
            }
        }
        let positional = self
            .layout
            .layers
            .iter()
            .filter_map(|l| l.pos)
            .map(|i| self.params[i].numel())
            .sum();
        let (w, b) = self.layout.heads[0][0];
        ParamCounts {
            train,
            inference: train - training_only,
            positional,
            per_head: self.params[w].numel() + self.params[b].numel(),
        }
    }

    /// Index of the `(weight, bias)` pair of the classifier at `layer`
    /// (zero-based) predicting `offset` characters ahead.
    pub fn head_param_indices(&self, layer: usize, offset: usize) -> Option<(usize, usize)> {
        self.layout.heads.get(layer)?.get(offset.checked_sub(1)?).copied()
    }

    pub fn cast<U: Scalar>(&self) -> TransformerLM<U> {
        TransformerLM {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Moves leaf gradients of a finished backward pass into the parameter
    /// tensors, adding to whatever they already hold.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, out: &ForwardOutput) -> Result<()> {
        for &(idx, var) in &out.bindings {
            if let Some(grad) = g.grad(var) {
                self.params[idx].accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Runs the network over a batch of equal-length windows.
    ///
    /// Passing a dropout RNG selects training mode; `None` is evaluation
    /// mode, where dropout is the identity.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        batch: &[&[u32]],
        mut dropout_rng: Option<&mut R>,
        heads: &HeadRequest,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let b = batch.len();
        if b == 0 {
            return Err(Error::Contract("forward needs at least one window".into()));
        }
        let len = batch[0].len();
        if len == 0 {
            return Err(Error::Contract("forward needs non-empty windows".into()));
        }
        if len > cfg.seq_len {
            return Err(Error::Length {
                len,
                max: cfg.seq_len,
            });
        }
        if let Some(w) = batch.iter().find(|w| w.len() != len) {
            return Err(Error::shape("forward batch", &[len], &[w.len()]));
        }
        let ids: Vec<u32> = batch.iter().flat_map(|w| w.iter().copied()).collect();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab) {
            return Err(Error::Vocab {
                id,
                vocab: cfg.vocab,
            });
        }
        let positions: Vec<usize> = match heads.positions {
            Positions::All => (0..len).collect(),
            Positions::Tail(n) if n >= 1 && n <= len => (len - n..len).collect(),
            Positions::Tail(n) => {
                return Err(Error::Contract(format!(
                    "tail of {n} positions requested from windows of length {len}"
                )))
            }
        };
        for &l in &heads.layers {
            if l >= cfg.n_layers {
                return Err(Error::Index {
                    index: l,
                    size: cfg.n_layers,
                });
            }
        }
        for &k in &heads.offsets {
            if k == 0 || k > cfg.n_targets {
                return Err(Error::Contract(format!(
                    "target offset {k} outside 1..={}",
                    cfg.n_targets
                )));
            }
        }

        let mut bindings: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut bind = |g: &mut Graph<T>, idx: usize| -> Var {
            *bindings[idx].get_or_insert_with(|| g.leaf(&self.params[idx]))
        };

        let d = cfg.d_model;
        let table = bind(g, self.layout.byte_emb);
        let mut x = g.embedding(table, &ids, &[b, len])?;
        if cfg.positional == PositionalMode::SinusoidalInputOnly {
            let signal = g.constant(&[len, d], sinusoid_signal(len, d))?;
            x = g.add_broadcast(x, signal)?;
        }

        let max_layer = heads.layers.iter().copied().max();
        let mut layer_outputs: Vec<(usize, Var)> = Vec::new();
        for (li, idx) in self.layout.layers.iter().enumerate() {
            if max_layer.is_some_and(|m| li > m) {
                break;
            }
            let h = match idx.pos {
                Some(p) => {
                    let table = bind(g, p);
                    let pos = g.slice_rows(table, 0, len)?;
                    g.add_broadcast(x, pos)?
                }
                None => x,
            };
            x = self.block(g, &mut bind, idx, h, b, len, dropout_rng.as_deref_mut())?;
            if heads.layers.contains(&li) {
                layer_outputs.push((li, x));
            }
        }

        let mut out_heads = Vec::new();
        let rows: Vec<usize> = (0..b)
            .flat_map(|bi| positions.iter().map(move |&p| bi * len + p))
            .collect();
        for &(li, rep) in &layer_outputs {
            let mut rep = g.reshape(rep, &[b * len, d])?;
            if let Some((gain, bias)) = self.layout.final_norm {
                let (gv, bv) = (bind(g, gain), bind(g, bias));
                rep = g.layer_norm(rep, gv, bv, LN_EPS)?;
            }
            if rows.len() != b * len {
                rep = g.gather_rows(rep, &rows)?;
            }
            for &k in &heads.offsets {
                let (w, bias) = self.layout.heads[li][k - 1];
                let (wv, bv) = (bind(g, w), bind(g, bias));
                let logits = g.matmul(rep, wv)?;
                let logits = g.add_broadcast(logits, bv)?;
                out_heads.push(HeadLogits {
                    layer: li,
                    offset: k,
                    logits,
                });
            }
        }
        // Requested order may differ from layer order; keep the request's.
        let mut ordered = Vec::with_capacity(out_heads.len());
        for &l in &heads.layers {
            for &k in &heads.offsets {
                if let Some(h) = out_heads.iter().find(|h| h.layer == l && h.offset == k) {
                    ordered.push(*h);
                }
            }
        }
        ordered.dedup();

        Ok(ForwardOutput {
            batch: b,
            seq_len: len,
            positions,
            heads: ordered,
            bindings: bindings
                .into_iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i, v)))
                .collect(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bind: &mut impl FnMut(&mut Graph<T>, usize) -> Var,
        idx: &LayerIdx,
        h: Var,
        b: usize,
        len: usize,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let ln = |g: &mut Graph<T>, bind: &mut dyn FnMut(&mut Graph<T>, usize) -> Var, x, gi, bi| {
            let (gv, bv) = (bind(g, gi), bind(g, bi));
            g.layer_norm(x, gv, bv, LN_EPS)
        };
        match self.config.norm {
            NormPlacement::Post => {
                let a = self.attention(g, bind, idx, h, b, len, rng.as_deref_mut())?;
                let r1 = g.add(h, a)?;
                let n1 = ln(g, bind, r1, idx.ln1_g, idx.ln1_b)?;
                let f = self.feed_forward(g, bind, idx, n1, rng)?;
                let r2 = g.add(n1, f)?;
                ln(g, bind, r2, idx.ln2_g, idx.ln2_b)
            }
            NormPlacement::Pre => {
                let n1 = ln(g, bind, h, idx.ln1_g, idx.ln1_b)?;
                let a = self.attention(g, bind, idx, n1, b, len, rng.as_deref_mut())?;
                let r1 = g.add(h, a)?;
                let n2 = ln(g, bind, r1, idx.ln2_g, idx.ln2_b)?;
                let f = self.feed_forward(g, bind, idx, n2, rng)?;
                g.add(r1, f)
            }
        }
    }

    fn linear(
        g: &mut Graph<T>,
        bind: &mut impl FnMut(&mut Graph<T>, usize) -> Var,
        x: Var,
        w: usize,
        bias: usize,
    ) -> Result<Var> {
        let (wv, bv) = (bind(g, w), bind(g, bias));
        let y = g.matmul(x, wv)?;
        g.add_broadcast(y, bv)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bind: &mut impl FnMut(&mut Graph<T>, usize) -> Var,
        idx: &LayerIdx,
        x: Var,
        b: usize,
        len: usize,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (heads, dh) = (cfg.n_heads, cfg.head_dim());
        let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, len, heads, dh])?;
            g.permute(v, &[0, 2, 1, 3])
        };
        let q = Self::linear(g, bind, x, idx.wq, idx.bq)?;
        let k = Self::linear(g, bind, x, idx.wk, idx.bk)?;
        let v = Self::linear(g, bind, x, idx.wv, idx.bv)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.matmul_bt(q, k)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let scores = g.causal_mask(scores)?;
        let weights = g.softmax(scores, 3)?;
        let weights = g.dropout(weights, cfg.keep_attn(), rng)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, len, cfg.d_model])?;
        Self::linear(g, bind, ctx, idx.wo, idx.bo)
    }

    fn feed_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bind: &mut impl FnMut(&mut Graph<T>, usize) -> Var,
        idx: &LayerIdx,
        x: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let h = Self::linear(g, bind, x, idx.w1, idx.b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.config.keep_relu(), rng)?;
        Self::linear(g, bind, h, idx.w2, idx.b2)
    }

    /// Next-character distribution from the final layer at the last
    /// position, in evaluation mode.
    pub fn predict_next(&self, context: &[u32]) -> Result<Vec<f64>> {
        super::predict_next(self, context)
    }
}

impl<T: Scalar> LanguageModel for TransformerLM<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn max_context(&self) -> usize {
        self.config.seq_len
    }

    fn tail_log_probs(&self, windows: &[&[u32]], tail: usize) -> Result<Vec<Vec<f64>>> {
        let request = HeadRequest {
            positions: Positions::Tail(tail),
            ..HeadRequest::inference(&self.config)
        };
        let mut rows: Vec<Option<Vec<Vec<f64>>>> = vec![None; windows.len()];
        // Group equal-length windows so each graph is a rectangular batch.
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.sort_by_key(|&i| windows[i].len());
        for group in order.chunk_by(|&a, &b| windows[a].len() == windows[b].len()) {
            for chunk in group.chunks(EVAL_BATCH) {
                let batch: Vec<&[u32]> = chunk.iter().map(|&i| windows[i]).collect();
                let mut g = Graph::new();
                let out = self.forward(&mut g, &batch, None::<&mut ChaCha8Rng>, &request)?;
                let logits = g.value(out.heads[0].logits);
                let v = self.config.vocab;
                for (bi, &wi) in chunk.iter().enumerate() {
                    let per_window = (0..tail)
                        .map(|j| {
                            let r = bi * tail + j;
                            log_softmax(logits[r * v..(r + 1) * v].iter().map(|x| x.as_f64()))
                        })
                        .collect();
                    rows[wi] = Some(per_window);
                }
            }
        }
        Ok(rows.into_iter().flat_map(|r| r.unwrap_or_default()).collect())
    }
}

/// Sinusoidal timing signal: even channels `sin`, odd channels `cos`, with
/// geometrically spaced wavelengths.
pub(crate) fn sinusoid_signal<T: Scalar>(len: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            out.push(T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}
