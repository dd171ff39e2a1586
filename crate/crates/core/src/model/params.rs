//! Parameter schema, initialization, counting, and graph binding.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;
use rand::SeedableRng as _;

use super::config::{LayerKind, ModelConfig};
use crate::autodiff::{Graph, Rng, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal002,
    Zeros,
    Ones,
    Gate,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
    /// Weight decay applies; gates and norm parameters are excluded.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIx {
    pub w_q: usize,
    pub b_q: usize,
    pub w_k: usize,
    pub b_k: usize,
    pub w_v: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub struct LayerIx {
    pub kind: LayerKind,
    pub norm_attn: NormIx,
    pub self_attn: Option<AttnIx>,
    /// Extra pre-norm for the cross read in the serial combined layer.
    pub norm_cross: Option<NormIx>,
    pub cross_attn: Option<AttnIx>,
    pub gate: Option<usize>,
    pub norm_ffn: NormIx,
    pub ffn: FfnIx,
}

/// Ordered parameter layout for a configuration. Indices point into the
/// parallel value vector of [`Params`] and the vars of [`Bound`].
#[derive(Clone, Debug)]
pub struct Schema {
    pub specs: Vec<ParamSpec>,
    pub embed_tok: usize,
    pub embed_pos: usize,
    pub layers: Vec<LayerIx>,
    pub final_norm: NormIx,
    /// Sentence-head linear stages (empty for decoder variants).
    pub sent_head: Vec<usize>,
}

struct SchemaBuilder {
    specs: Vec<ParamSpec>,
}

impl SchemaBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            rows,
            cols,
            init,
            decay,
        });
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIx {
        NormIx {
            gain: self.push(format!("{}.gain", prefix), 1, d, Init::Ones, false),
            bias: self.push(format!("{}.bias", prefix), 1, d, Init::Zeros, false),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIx {
        let mut mat = |n: &str| self.push(format!("{}.{}", prefix, n), d, d, Init::Normal002, true);
        let w_q = mat("w_q");
        let w_k = mat("w_k");
        let w_v = mat("w_v");
        let w_o = mat("w_o");
        let mut vecp = |n: &str| self.push(format!("{}.{}", prefix, n), 1, d, Init::Zeros, true);
        let b_q = vecp("b_q");
        let b_k = vecp("b_k");
        let b_v = vecp("b_v");
        let b_o = vecp("b_o");
        AttnIx {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, mult: usize) -> FfnIx {
        let h = d * mult;
        FfnIx {
            w1: self.push(format!("{}.w1", prefix), d, h, Init::Normal002, true),
            b1: self.push(format!("{}.b1", prefix), 1, h, Init::Zeros, true),
            w2: self.push(format!("{}.w2", prefix), h, d, Init::Normal002, true),
            b2: self.push(format!("{}.b2", prefix), 1, d, Init::Zeros, true),
        }
    }
}

/// Build the parameter layout for a configuration.
///
/// Every layer carries one feed-forward sub-block; combined self+cross layers
/// add a second attention sub-block (and, in the serial form, its own
/// pre-norm) but share the layer's feed-forward block.
pub fn schema(cfg: &ModelConfig) -> Schema {
    let d = cfg.d_model;
    let mut b = SchemaBuilder { specs: Vec::new() };
    let embed_tok = b.push("embed.tok".into(), cfg.vocab_size, d, Init::Normal002, true);
    let embed_pos = b.push("embed.pos".into(), cfg.position_rows(), d, Init::Normal002, true);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (i, kind) in cfg.layer_plan().into_iter().enumerate() {
        let p = format!("layers.{}", i);
        let norm_attn = b.norm(&format!("{}.norm_attn", p), d);
        let (self_attn, norm_cross, cross_attn, gate) = match kind {
            LayerKind::SelfOnly | LayerKind::SelfWithMemoryPrefix => {
                (Some(b.attn(&format!("{}.self", p), d)), None, None, None)
            }
            LayerKind::CrossOnly => {
                let cross = b.attn(&format!("{}.cross", p), d);
                let gate = b.push(format!("{}.gate", p), 1, 1, Init::Gate, false);
                (None, None, Some(cross), Some(gate))
            }
            LayerKind::SelfThenCross => {
                let sa = b.attn(&format!("{}.self", p), d);
                let nc = b.norm(&format!("{}.norm_cross", p), d);
                let cross = b.attn(&format!("{}.cross", p), d);
                let gate = b.push(format!("{}.gate", p), 1, 1, Init::Gate, false);
                (Some(sa), Some(nc), Some(cross), Some(gate))
            }
            LayerKind::ParallelBoth => {
                let sa = b.attn(&format!("{}.self", p), d);
                let cross = b.attn(&format!("{}.cross", p), d);
                let gate = b.push(format!("{}.gate", p), 1, 1, Init::Gate, false);
                (Some(sa), None, Some(cross), Some(gate))
            }
        };
        let norm_ffn = b.norm(&format!("{}.norm_ffn", p), d);
        let ffn = b.ffn(&format!("{}.ffn", p), d, cfg.ffn_mult);
        layers.push(LayerIx {
            kind,
            norm_attn,
            self_attn,
            norm_cross,
            cross_attn,
            gate,
            norm_ffn,
            ffn,
        });
    }

    let final_norm = b.norm("final_norm", d);
    let mut sent_head = Vec::new();
    if cfg.variant.uses_memory() {
        for k in 0..cfg.sentence_head_depth.max(1) {
            let name = if cfg.sentence_head_depth <= 1 {
                "sent_head.w".to_string()
            } else {
                format!("sent_head.{}.w", k)
            };
            sent_head.push(b.push(name, d, d, Init::Normal002, true));
        }
    }

    Schema {
        specs: b.specs,
        embed_tok,
        embed_pos,
        layers,
        final_norm,
        sent_head,
    }
}

/// Exact non-embedding parameter count: everything except the token embedding
/// and token position tables, including the sentence head, gates, and norms.
///
/// Derivation per layer (d = d_model, f = ffn_mult):
/// attention = 4d^2 + 4d, feed-forward = 2 f d^2 + f d + d, one norm = 2d.
pub fn count_nonembedding_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let f = cfg.ffn_mult;
    let attn = 4 * d * d + 4 * d;
    let ffn = 2 * f * d * d + f * d + d;
    let norm = 2 * d;
    let mut total = 0usize;
    for kind in cfg.layer_plan() {
        total += match kind {
            LayerKind::SelfOnly | LayerKind::SelfWithMemoryPrefix => attn + ffn + 2 * norm,
            LayerKind::CrossOnly => attn + ffn + 2 * norm + 1,
            LayerKind::SelfThenCross => 2 * attn + ffn + 3 * norm + 1,
            LayerKind::ParallelBoth => 2 * attn + ffn + 2 * norm + 1,
        };
    }
    total += norm; // final norm
    if cfg.variant.uses_memory() {
        total += cfg.sentence_head_depth.max(1) * d * d;
    }
    total
}

/// Model parameters: values laid out per [`Schema`]. The output head is tied
/// to the token embedding.
#[derive(Clone)]
pub struct Params<S> {
    pub config: ModelConfig,
    pub schema: Arc<Schema>,
    pub values: Vec<Tensor<S>>,
}

impl<S: Scalar> Params<S> {
    /// Draw weights from Normal(0, 0.02), zero the biases, set norm gains to
    /// one and gates to `gate_init`. Deterministic per seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Params<S>> {
        cfg.validate()?;
        let schema = Arc::new(schema(cfg));
        let mut rng = Rng::seed_from_u64(seed);
        let values = schema
            .specs
            .iter()
            .map(|spec| {
                let mut t = Tensor::zeros(spec.rows, spec.cols);
                match spec.init {
                    Init::Zeros => {}
                    Init::Ones => t.as_mut_slice().fill(S::ONE),
                    Init::Gate => t.as_mut_slice().fill(S::from_f64(cfg.gate_init)),
                    Init::Normal002 => {
                        for v in t.as_mut_slice() {
                            *v = S::from_f64(0.02 * standard_normal(&mut rng));
                        }
                    }
                }
                t
            })
            .collect();
        Ok(Params {
            config: cfg.clone(),
            schema,
            values,
        })
    }

    pub fn value(&self, ix: usize) -> &Tensor<S> {
        &self.values[ix]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.schema
            .specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.values[i])
    }

    /// Total elements across all parameter tensors, embeddings included.
    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Brute-force enumeration of allocated non-embedding extents.
    pub fn enumerate_nonembedding(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.schema.embed_tok && *i != self.schema.embed_pos)
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            config: self.config.clone(),
            schema: Arc::clone(&self.schema),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Current gate values per 1-based layer index.
    pub fn gate_values(&self) -> Vec<(usize, f64)> {
        self.schema
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.gate.map(|g| (i + 1, self.values[g].item().to_f64())))
            .collect()
    }

    /// Register every parameter tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Per-graph handles for every parameter, parallel to the schema order.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, ix: usize) -> Var {
        self.vars[ix]
    }

    /// Collect gradients per schema order, zeros for untouched leaves.
    pub fn collect_grads<S: Scalar>(
        &self,
        g: &Graph<S>,
        grads: &mut crate::autodiff::Gradients<S>,
    ) -> Vec<Tensor<S>> {
        self.vars
            .iter()
            .map(|&v| {
                grads.take(v).unwrap_or_else(|| {
                    let (r, c) = g.shape(v);
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }
}

/// Box-Muller standard normal draw from a uniform RNG.
fn standard_normal(rng: &mut Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Checkpoint lookup table: name -> schema index.
pub fn name_index(schema: &Schema) -> HashMap<&str, usize> {
    schema
        .specs
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect()
}

pub fn validate_grads_shape<S: Scalar>(params: &Params<S>, grads: &[Tensor<S>]) -> Result<()> {
    if grads.len() != params.values.len() {
        return Err(Error::invalid(format!(
            "gradient count {} does not match parameter count {}",
            grads.len(),
            params.values.len()
        )));
    }
    for (i, (g, p)) in grads.iter().zip(&params.values).enumerate() {
        if g.shape() != p.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match parameter `{}` {:?}",
                g.shape(),
                params.schema.specs[i].name,
                p.shape()
            )));
        }
    }
    Ok(())
}
