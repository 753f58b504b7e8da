use hpn_autograd::{BatchNormMode, ParamId, ParamStore, RunningStats, Tape, Tensor, Var};
use rand::Rng;

use super::config::{Aggregator, ClipTarget, ModelConfig};
use super::features::FeatureContext;
use super::{ModelError, Result};
use crate::rng::seeded;
use crate::tsp::Instance;

#[derive(Debug, Clone)]
pub struct EncoderLayerLayout {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub ff1_weight: ParamId,
    pub ff1_bias: ParamId,
    pub ff2_weight: ParamId,
    pub ff2_bias: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
}

/// One step of `X' = γ X W_g + (1 - γ) relu((X / |N|) W_φ + b_φ)`.
#[derive(Debug, Clone)]
pub struct GraphLayerLayout {
    pub weight: ParamId,
    pub phi_weight: ParamId,
    pub phi_bias: ParamId,
    pub gamma: ParamId,
}

/// Gate order in the stacked weights is input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmLayout {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
}

/// `u_j = vᵀ tanh(W_r r_j + W_q q)`.
#[derive(Debug, Clone)]
pub struct DecoderLayout {
    pub ref_weight: ParamId,
    pub query_weight: ParamId,
    pub v: ParamId,
}

#[derive(Debug, Clone)]
pub struct ConcatLayout {
    /// `1 × 2` weights applied to `(u¹_j, u²_j)`.
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub feature_weight: ParamId,
    pub feature_bias: ParamId,
    pub point_weight: ParamId,
    pub point_bias: ParamId,
    pub start_token: ParamId,
    pub placeholder: ParamId,
    pub transformer: Vec<EncoderLayerLayout>,
    pub graph: Vec<GraphLayerLayout>,
    pub lstm: LstmLayout,
    pub decoders: [DecoderLayout; 2],
    pub concat: Option<ConcatLayout>,
}

/// Parameters placed on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

#[derive(Debug, Clone)]
pub struct TransformerPass {
    /// `(n + 1) × d`; row 0 is the start token.
    pub output: Var,
    /// Attention weights, `layers × heads` matrices of `(n + 1) × (n + 1)`.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutputs {
    /// `(n + 1) × d` transformer context, start token first.
    pub transformer_context: Var,
    /// `n × d` graph embedding context.
    pub graph_context: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Decoder logits over the `n` cities, `1 × n`, before masking.
    pub u1: Var,
    pub u2: Var,
    /// Aggregated, clipped logits, `1 × n`, before masking.
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

#[derive(Debug, Clone)]
pub struct HpnModel {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    params: &'a mut ParamStore,
    rng: crate::rng::Rng,
    bound: f64,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let b = self.bound;
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-b..=b)).collect();
        self.params.add(name, Tensor::matrix(rows, cols, data).expect("sized"))
    }

    fn filled(&mut self, name: String, rows: usize, cols: usize, value: f64) -> ParamId {
        self.params.add(name, Tensor::filled(rows, cols, value))
    }
}

impl HpnModel {
    /// Fresh model with projections drawn uniformly from `[-1/√d, 1/√d]`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let ff = cfg.feedforward_dim;
        let mut params = ParamStore::new();
        let mut init = Init {
            params: &mut params,
            rng: seeded(seed),
            bound: 1.0 / (d as f64).sqrt(),
        };
        let feature_weight = init.uniform("feature.weight".into(), 3, d);
        let feature_bias = init.filled("feature.bias".into(), 1, d, 0.0);
        let point_weight = init.uniform("point.weight".into(), 2, d);
        let point_bias = init.filled("point.bias".into(), 1, d, 0.0);
        let start_token = init.uniform("start_token".into(), 1, d);
        let placeholder = init.uniform("placeholder".into(), 1, d);

        let transformer = (0..cfg.transformer_layers)
            .map(|l| {
                let p = |s: &str| format!("transformer.{l}.{s}");
                EncoderLayerLayout {
                    query: init.uniform(p("query"), d, d),
                    key: init.uniform(p("key"), d, d),
                    value: init.uniform(p("value"), d, d),
                    norm1_gamma: init.filled(p("norm1.gamma"), 1, d, 1.0),
                    norm1_beta: init.filled(p("norm1.beta"), 1, d, 0.0),
                    ff1_weight: init.uniform(p("ff1.weight"), d, ff),
                    ff1_bias: init.filled(p("ff1.bias"), 1, ff, 0.0),
                    ff2_weight: init.uniform(p("ff2.weight"), ff, d),
                    ff2_bias: init.filled(p("ff2.bias"), 1, d, 0.0),
                    norm2_gamma: init.filled(p("norm2.gamma"), 1, d, 1.0),
                    norm2_beta: init.filled(p("norm2.beta"), 1, d, 0.0),
                }
            })
            .collect();

        let graph = (0..cfg.graph_layers)
            .map(|l| {
                let p = |s: &str| format!("graph.{l}.{s}");
                GraphLayerLayout {
                    weight: init.uniform(p("weight"), d, d),
                    phi_weight: init.uniform(p("phi.weight"), d, d),
                    phi_bias: init.filled(p("phi.bias"), 1, d, 0.0),
                    gamma: init.filled(p("gamma"), 1, 1, 0.5),
                }
            })
            .collect();

        let mut lstm_bias = vec![0.0; 4 * d];
        lstm_bias[d..2 * d].fill(1.0);
        let lstm = LstmLayout {
            input_weight: init.uniform("lstm.input_weight".into(), d, 4 * d),
            hidden_weight: init.uniform("lstm.hidden_weight".into(), d, 4 * d),
            bias: init
                .params
                .add("lstm.bias", Tensor::matrix(1, 4 * d, lstm_bias).expect("sized")),
        };

        let decoders = [0, 1].map(|k| DecoderLayout {
            ref_weight: init.uniform(format!("decoder.{k}.ref_weight"), d, d),
            query_weight: init.uniform(format!("decoder.{k}.query_weight"), d, d),
            v: init.uniform(format!("decoder.{k}.v"), d, 1),
        });

        let concat = (cfg.aggregator == Aggregator::Concat).then(|| ConcatLayout {
            weight: init.uniform("concat.weight".into(), 1, 2),
            bias: init.filled("concat.bias".into(), 1, 1, 0.0),
        });

        let layout = Layout {
            feature_weight,
            feature_bias,
            point_weight,
            point_bias,
            start_token,
            placeholder,
            transformer,
            graph,
            lstm,
            decoders,
            concat,
        };
        Ok(Self {
            cfg,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.bind(tape))
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, x: Var, w: ParamId, bias: ParamId) -> Result<Var> {
        let h = tape.matmul(x, b.get(w))?;
        Ok(tape.add_row(h, b.get(bias))?)
    }

    /// `n × 3` features to `n × d`.
    pub fn embed_features(&self, tape: &mut Tape, b: &Bound, features: &FeatureContext) -> Result<Var> {
        let x = tape.constant(features.to_tensor());
        self.linear(tape, b, x, self.layout.feature_weight, self.layout.feature_bias)
    }

    /// LSTM input for the step after `current`, or the learned placeholder
    /// on the first step.
    pub fn point_input(&self, tape: &mut Tape, b: &Bound, inst: &Instance, current: Option<usize>) -> Result<Var> {
        match current {
            None => Ok(b.get(self.layout.placeholder)),
            Some(c) => {
                let p = inst.point(c);
                let x = tape.constant(Tensor::row(vec![p.x, p.y]));
                self.linear(tape, b, x, self.layout.point_weight, self.layout.point_bias)
            }
        }
    }

    /// Transformer encoder over the start token followed by the `n`
    /// embedded city rows.
    ///
    /// Each layer is multi-head self-attention, residual, batch norm, a
    /// ReLU feed-forward block, residual, batch norm. Heads split the `d`
    /// columns of Q, K and V and are concatenated back without an output
    /// projection, so one head is plain `softmax(QKᵀ/√d) V`. Batch norm
    /// uses the statistics of the `n + 1` rows being encoded.
    pub fn transformer_encode(&self, tape: &mut Tape, b: &Bound, embedded: Var) -> Result<TransformerPass> {
        let d = self.cfg.hidden_dim;
        let (rows, cols) = tape.value(embedded).dims()?;
        if cols != d || rows == 0 {
            return Err(ModelError::Tensor(hpn_autograd::TensorError::ShapeMismatch {
                op: "transformer_encode",
                left: vec![rows, cols],
                right: vec![rows, d],
            }));
        }
        let mut h = tape.concat_rows(&[b.get(self.layout.start_token), embedded])?;
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(self.layout.transformer.len() * heads);
        for layer in &self.layout.transformer {
            let q = tape.matmul(h, b.get(layer.query))?;
            let k = tape.matmul(h, b.get(layer.key))?;
            let v = tape.matmul(h, b.get(layer.value))?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, head * dh, dh)?,
                        tape.slice_cols(k, head * dh, dh)?,
                        tape.slice_cols(v, head * dh, dh)?,
                    )
                };
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let weights = tape.softmax_rows(scores, None)?;
                attention.push(weights);
                outs.push(tape.matmul(weights, vh)?);
            }
            let att = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let res = tape.add(h, att)?;
            let h1 = self.norm(tape, b, res, layer.norm1_gamma, layer.norm1_beta)?;
            let f = self.linear(tape, b, h1, layer.ff1_weight, layer.ff1_bias)?;
            let f = tape.relu(f);
            let f = self.linear(tape, b, f, layer.ff2_weight, layer.ff2_bias)?;
            let res = tape.add(h1, f)?;
            h = self.norm(tape, b, res, layer.norm2_gamma, layer.norm2_beta)?;
        }
        Ok(TransformerPass { output: h, attention })
    }

    fn norm(&self, tape: &mut Tape, b: &Bound, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let mut scratch = RunningStats::new(self.cfg.hidden_dim);
        Ok(tape.batch_norm(x, b.get(gamma), b.get(beta), BatchNormMode::Train, &mut scratch)?)
    }

    /// Graph embedding over the complete graph, where every city has
    /// `n - 1` neighbours (1 for a single city).
    pub fn graph_embed(&self, tape: &mut Tape, b: &Bound, embedded: Var) -> Result<Var> {
        let n = tape.value(embedded).rows();
        let neighbours = n.saturating_sub(1).max(1) as f64;
        let mut x = embedded;
        for layer in &self.layout.graph {
            let gamma = b.get(layer.gamma);
            let direct = tape.matmul(x, b.get(layer.weight))?;
            let scaled = tape.scale(x, 1.0 / neighbours);
            let agg = self.linear(tape, b, scaled, layer.phi_weight, layer.phi_bias)?;
            let agg = tape.relu(agg);
            let neg = tape.scale(gamma, -1.0);
            let one_minus = tape.add_const(neg, 1.0);
            let left = tape.mul_scalar(direct, gamma)?;
            let right = tape.mul_scalar(agg, one_minus)?;
            x = tape.add(left, right)?;
        }
        Ok(x)
    }

    /// Both context encoders on one feature context.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, features: &FeatureContext) -> Result<EncoderOutputs> {
        let embedded = self.embed_features(tape, b, features)?;
        let transformer_context = self.transformer_encode(tape, b, embedded)?.output;
        let graph_context = self.graph_embed(tape, b, embedded)?;
        Ok(EncoderOutputs {
            transformer_context,
            graph_context,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape) -> LstmState {
        let d = self.cfg.hidden_dim;
        LstmState {
            hidden: tape.constant(Tensor::zeros(1, d)),
            cell: tape.constant(Tensor::zeros(1, d)),
        }
    }

    /// One LSTM cell step on a `1 × d` input.
    pub fn point_encode(&self, tape: &mut Tape, b: &Bound, input: Var, state: LstmState) -> Result<LstmState> {
        let d = self.cfg.hidden_dim;
        let l = &self.layout.lstm;
        let xi = tape.matmul(input, b.get(l.input_weight))?;
        let hh = tape.matmul(state.hidden, b.get(l.hidden_weight))?;
        let gates = tape.add(xi, hh)?;
        let gates = tape.add(gates, b.get(l.bias))?;
        let gate = |tape: &mut Tape, k: usize| tape.slice_cols(gates, k * d, d);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i);
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f);
        let g = gate(tape, 2)?;
        let g = tape.tanh(g);
        let o = gate(tape, 3)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.cell)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed)?;
        Ok(LstmState { hidden, cell })
    }

    /// Pointer logits `1 × n` of one decoder against `reference` (`n × d`).
    fn pointer(&self, tape: &mut Tape, b: &Bound, dec: &DecoderLayout, reference: Var, query: Var) -> Result<Var> {
        let r = tape.matmul(reference, b.get(dec.ref_weight))?;
        let q = tape.matmul(query, b.get(dec.query_weight))?;
        let t = tape.add_row(r, q)?;
        let t = tape.tanh(t);
        let u = tape.matmul(t, b.get(dec.v))?;
        Ok(tape.transpose(u)?)
    }

    fn clip(&self, tape: &mut Tape, u: Var) -> Var {
        let t = tape.tanh(u);
        tape.scale(t, self.cfg.tanh_clip)
    }

    /// Combines two `1 × n` logit vectors with the configured aggregator.
    pub fn aggregate(&self, tape: &mut Tape, b: &Bound, u1: Var, u2: Var) -> Result<Var> {
        Ok(match self.cfg.aggregator {
            Aggregator::Sum => tape.add(u1, u2)?,
            Aggregator::Max => tape.maximum(u1, u2)?,
            Aggregator::Mean => {
                let s = tape.add(u1, u2)?;
                tape.scale(s, 0.5)
            }
            Aggregator::Concat => {
                let c = self.layout.concat.as_ref().expect("concat layout exists");
                let stacked = tape.concat_rows(&[u1, u2])?;
                let mixed = tape.matmul(b.get(c.weight), stacked)?;
                tape.add_scalar(mixed, b.get(c.bias))?
            }
        })
    }

    /// Distribution over the next city. `visited[j]` excludes city `j`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        b: &Bound,
        enc: &EncoderOutputs,
        query: Var,
        visited: &[bool],
    ) -> Result<StepOutput> {
        let n = tape.value(enc.graph_context).rows();
        if visited.len() != n {
            return Err(ModelError::Tensor(hpn_autograd::TensorError::ShapeMismatch {
                op: "decode_step",
                left: vec![n],
                right: vec![visited.len()],
            }));
        }
        if visited.iter().all(|&v| v) {
            return Err(ModelError::AllVisited);
        }
        let cities = tape.slice_rows(enc.transformer_context, 1, n)?;
        let mut u1 = self.pointer(tape, b, &self.layout.decoders[0], cities, query)?;
        let mut u2 = self.pointer(tape, b, &self.layout.decoders[1], enc.graph_context, query)?;
        let logits = match self.cfg.clip_target {
            ClipTarget::PerDecoder => {
                u1 = self.clip(tape, u1);
                u2 = self.clip(tape, u2);
                self.aggregate(tape, b, u1, u2)?
            }
            ClipTarget::Aggregated => {
                let raw = self.aggregate(tape, b, u1, u2)?;
                self.clip(tape, raw)
            }
        };
        let probs = tape.softmax_rows(logits, Some(visited))?;
        let log_probs = tape.log_softmax_rows(logits, Some(visited))?;
        Ok(StepOutput {
            u1,
            u2,
            logits,
            probs,
            log_probs,
        })
    }
}
