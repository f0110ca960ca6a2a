//! Pre-norm Transformer encoder-decoder with tied embeddings.

mod checkpoint;
mod config;

pub use checkpoint::{load_model, save_model, Checkpoint};
pub use config::ModelConfig;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Score given to masked attention slots; small enough that `exp` underflows to 0.
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, f) = (cfg.hidden, cfg.ffn_dim());
    let mut specs = vec![
        ("embed.tokens".to_string(), vec![cfg.vocab_size, h], Init::Normal),
        ("embed.positions".to_string(), vec![cfg.max_positions, h], Init::Normal),
    ];
    let ln = |specs: &mut Vec<_>, p: &str| {
        specs.push((format!("{p}.gain"), vec![h], Init::Ones));
        specs.push((format!("{p}.bias"), vec![h], Init::Zeros));
    };
    let attn = |specs: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        for m in ["q", "k", "v", "o"] {
            specs.push((format!("{p}.w{m}"), vec![h, h], Init::Normal));
            specs.push((format!("{p}.b{m}"), vec![h], Init::Zeros));
        }
    };
    let ffn = |specs: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        specs.push((format!("{p}.w1"), vec![h, f], Init::Normal));
        specs.push((format!("{p}.b1"), vec![f], Init::Zeros));
        specs.push((format!("{p}.w2"), vec![f, h], Init::Normal));
        specs.push((format!("{p}.b2"), vec![h], Init::Zeros));
    };
    for l in 0..cfg.n_layers {
        let p = format!("encoder.{l}");
        ln(&mut specs, &format!("{p}.ln1"));
        attn(&mut specs, &format!("{p}.self_attn"));
        ln(&mut specs, &format!("{p}.ln2"));
        ffn(&mut specs, &format!("{p}.ffn"));
    }
    ln(&mut specs, "encoder.final_ln");
    for l in 0..cfg.n_layers {
        let p = format!("decoder.{l}");
        ln(&mut specs, &format!("{p}.ln1"));
        attn(&mut specs, &format!("{p}.self_attn"));
        ln(&mut specs, &format!("{p}.ln2"));
        attn(&mut specs, &format!("{p}.cross_attn"));
        ln(&mut specs, &format!("{p}.ln3"));
        ffn(&mut specs, &format!("{p}.ffn"));
    }
    ln(&mut specs, "decoder.final_ln");
    specs
}

struct LnVars {
    gain: Var,
    bias: Var,
}

struct AttnVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

struct FfnVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct EncoderLayer {
    ln1: LnVars,
    attn: AttnVars,
    ln2: LnVars,
    ffn: FfnVars,
}

struct DecoderLayer {
    ln1: LnVars,
    self_attn: AttnVars,
    ln2: LnVars,
    cross_attn: AttnVars,
    ln3: LnVars,
    ffn: FfnVars,
}

/// Model parameters registered on a particular tape.
pub struct ModelVars {
    /// One entry per parameter, in [`SeqModel::params`] order.
    pub all: Vec<Var>,
    tokens: Var,
    positions: Var,
    encoder: Vec<EncoderLayer>,
    encoder_ln: LnVars,
    decoder: Vec<DecoderLayer>,
    decoder_ln: LnVars,
}

impl ModelVars {
    /// Reassembles vars registered in [`SeqModel::params`] order.
    pub fn from_vars(all: Vec<Var>, n_layers: usize) -> Self {
        Self::build(all, n_layers)
    }

    fn build(all: Vec<Var>, n_layers: usize) -> Self {
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("parameter layout");
        fn ln(next: &mut dyn FnMut() -> Var) -> LnVars {
            LnVars {
                gain: next(),
                bias: next(),
            }
        }
        fn attn(next: &mut dyn FnMut() -> Var) -> AttnVars {
            AttnVars {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
            }
        }
        fn ffn(next: &mut dyn FnMut() -> Var) -> FfnVars {
            FfnVars {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            }
        }
        let tokens = next();
        let positions = next();
        let encoder = (0..n_layers)
            .map(|_| EncoderLayer {
                ln1: ln(&mut next),
                attn: attn(&mut next),
                ln2: ln(&mut next),
                ffn: ffn(&mut next),
            })
            .collect();
        let encoder_ln = ln(&mut next);
        let decoder = (0..n_layers)
            .map(|_| DecoderLayer {
                ln1: ln(&mut next),
                self_attn: attn(&mut next),
                ln2: ln(&mut next),
                cross_attn: attn(&mut next),
                ln3: ln(&mut next),
                ffn: ffn(&mut next),
            })
            .collect();
        let decoder_ln = ln(&mut next);
        ModelVars {
            all,
            tokens,
            positions,
            encoder,
            encoder_ln,
            decoder,
            decoder_ln,
        }
    }
}

/// Encoder output for one source sequence, reused across decoding steps.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// `[src_len, hidden]`; empty when the source is empty.
    memory: Tensor,
    pad: Vec<bool>,
}

impl EncoderState {
    pub fn src_len(&self) -> usize {
        self.pad.len()
    }
}

/// Per-call switches for the forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Enables dropout, drawing masks from this generator.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqModel {
    cfg: ModelConfig,
    params: Vec<Param>,
}

impl SeqModel {
    /// Draws every weight matrix from `Normal(0, init_std)` with `cfg.seed`;
    /// layer-norm gains start at 1 and all biases at 0.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std)
            .map_err(|e| Error::Validation(format!("init_std: {e}")))?;
        let params = param_specs(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Param {
                    name,
                    value: Tensor::new(shape, data).expect("spec shape"),
                }
            })
            .collect();
        Ok(SeqModel {
            cfg: cfg.clone(),
            params,
        })
    }

    pub(crate) fn from_params(cfg: ModelConfig, params: Vec<Param>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(SeqModel { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let all = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        ModelVars::build(all, self.cfg.n_layers)
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len > self.cfg.max_positions {
            return Err(Error::Range(format!(
                "{what} length {len} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        Ok(())
    }

    /// Teacher-forced log-probabilities `[batch, tgt_len, vocab]` recorded on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &Batch,
        mut opts: ForwardOptions<'_>,
    ) -> Result<Var> {
        self.check_len(batch.src_len, "source")?;
        self.check_len(batch.tgt_len, "target")?;
        self.check_ids(&batch.encoder_ids)?;
        self.check_ids(&batch.decoder_in_ids)?;
        let memory = if batch.src_len > 0 {
            let pad: Vec<bool> = batch.encoder_ids.iter().map(|&id| id == PAD).collect();
            let mem = self.encode_on(tape, vars, &batch.encoder_ids, batch.size, batch.src_len, &pad, &mut opts)?;
            Some((mem, pad))
        } else {
            None
        };
        self.decode_on(
            tape,
            vars,
            memory.as_ref().map(|(m, p)| (*m, p.as_slice())),
            &batch.decoder_in_ids,
            batch.size,
            batch.tgt_len,
            &mut opts,
        )
    }

    /// Log-probabilities for a batch without recording gradients.
    pub fn forward(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = self.forward_on(&mut tape, &vars, batch, ForwardOptions::default())?;
        Ok(tape.value(out).clone())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            Some(id) => Err(Error::Range(format!(
                "token id {id} outside vocabulary of {}",
                self.cfg.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Runs the encoder over one source sequence.
    pub fn encode(&self, src_ids: &[u32]) -> Result<EncoderState> {
        self.check_len(src_ids.len(), "source")?;
        self.check_ids(src_ids)?;
        let pad: Vec<bool> = src_ids.iter().map(|&id| id == PAD).collect();
        if src_ids.is_empty() {
            return Ok(EncoderState {
                memory: Tensor::zeros(&[0, self.cfg.hidden]),
                pad,
            });
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let mem = self.encode_on(
            &mut tape,
            &vars,
            src_ids,
            1,
            src_ids.len(),
            &pad,
            &mut ForwardOptions::default(),
        )?;
        let memory = tape.value(mem).clone().reshaped(vec![src_ids.len(), self.cfg.hidden])?;
        Ok(EncoderState { memory, pad })
    }

    /// Next-token log-probabilities after `prefix` (which starts with BOS).
    pub fn step(&self, state: &EncoderState, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(self.step_many(state, &[prefix.to_vec()])?.remove(0))
    }

    /// [`step`](Self::step) for several equal-length prefixes sharing one source.
    pub fn step_many(&self, state: &EncoderState, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = prefixes.first() else {
            return Ok(Vec::new());
        };
        let len = first.len();
        if len == 0 {
            return Err(Error::Contract("decoding prefix must start with BOS".into()));
        }
        if prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::Contract("prefixes in one step must share a length".into()));
        }
        self.check_len(len, "prefix")?;
        let n = prefixes.len();
        let ids: Vec<u32> = prefixes.iter().flatten().copied().collect();
        self.check_ids(&ids)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let s = state.src_len();
        let pad_rep: Vec<bool>;
        let memory = if s > 0 {
            let mut data = Vec::with_capacity(n * state.memory.numel());
            for _ in 0..n {
                data.extend_from_slice(state.memory.data());
            }
            let mem = tape.constant(Tensor::new(vec![n, s, self.cfg.hidden], data)?);
            pad_rep = state.pad.repeat(n);
            Some((mem, pad_rep.as_slice()))
        } else {
            None
        };
        let out = self.decode_on(&mut tape, &vars, memory, &ids, n, len, &mut ForwardOptions::default())?;
        let v = self.cfg.vocab_size;
        let lp = tape.value(out).data();
        Ok((0..n)
            .map(|r| lp[(r * len + len - 1) * v..(r * len + len) * v].to_vec())
            .collect())
    }

    fn embed(&self, tape: &mut Tape, vars: &ModelVars, ids: &[u32], b: usize, t: usize) -> Result<Var> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather_rows(vars.tokens, &idx, &[b, t])?;
        let pos_ids: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(vars.positions, &pos_ids, &[t])?;
        tape.add(tok, pos)
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        ids: &[u32],
        b: usize,
        s: usize,
        pad: &[bool],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var> {
        let mut x = self.embed(tape, vars, ids, b, s)?;
        let mask = attention_mask(self.cfg.heads, b, s, s, |bi, _, j| pad[bi * s + j]);
        for layer in &vars.encoder {
            let h = layer_norm(tape, &layer.ln1, x)?;
            let a = self.attention(tape, &layer.attn, h, h, b, s, s, &mask)?;
            let a = self.dropout(tape, a, opts)?;
            x = tape.add(x, a)?;
            let h = layer_norm(tape, &layer.ln2, x)?;
            let f = self.feed_forward(tape, &layer.ffn, h, b * s)?;
            let f = self.dropout(tape, f, opts)?;
            x = tape.add(x, f)?;
        }
        layer_norm(tape, &vars.encoder_ln, x)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        memory: Option<(Var, &[bool])>,
        ids: &[u32],
        b: usize,
        t: usize,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var> {
        let mut y = self.embed(tape, vars, ids, b, t)?;
        let causal = attention_mask(self.cfg.heads, b, t, t, |_, i, j| j > i);
        let cross = memory.map(|(mem, pad)| {
            let s = pad.len() / b;
            (mem, s, attention_mask(self.cfg.heads, b, t, s, |bi, _, j| pad[bi * s + j]))
        });
        for layer in &vars.decoder {
            let h = layer_norm(tape, &layer.ln1, y)?;
            let a = self.attention(tape, &layer.self_attn, h, h, b, t, t, &causal)?;
            let a = self.dropout(tape, a, opts)?;
            y = tape.add(y, a)?;
            if let Some((mem, s, mask)) = &cross {
                let h = layer_norm(tape, &layer.ln2, y)?;
                let a = self.attention(tape, &layer.cross_attn, h, *mem, b, t, *s, mask)?;
                let a = self.dropout(tape, a, opts)?;
                y = tape.add(y, a)?;
            }
            let h = layer_norm(tape, &layer.ln3, y)?;
            let f = self.feed_forward(tape, &layer.ffn, h, b * t)?;
            let f = self.dropout(tape, f, opts)?;
            y = tape.add(y, f)?;
        }
        let y = layer_norm(tape, &vars.decoder_ln, y)?;
        let flat = tape.reshape(y, &[b * t, self.cfg.hidden])?;
        let logits = tape.matmul_nt(flat, vars.tokens)?;
        let lp = tape.log_softmax(logits)?;
        tape.reshape(lp, &[b, t, self.cfg.vocab_size])
    }

    /// Multi-head attention of `q_in [b, tq, h]` over `kv_in [b, tk, h]`.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        w: &AttnVars,
        q_in: Var,
        kv_in: Var,
        b: usize,
        tq: usize,
        tk: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let (h, nh, dh) = (self.cfg.hidden, self.cfg.heads, self.cfg.head_dim());
        let q_flat = tape.reshape(q_in, &[b * tq, h])?;
        let kv_flat = if kv_in == q_in {
            q_flat
        } else {
            tape.reshape(kv_in, &[b * tk, h])?
        };
        let split = |tape: &mut Tape, x: Var, wm: Var, bias: Var, len: usize| -> Result<Var> {
            let p = linear(tape, x, wm, bias)?;
            let p = tape.reshape(p, &[b, len, nh, dh])?;
            let p = tape.permute(p, &[0, 2, 1, 3])?;
            tape.reshape(p, &[b * nh, len, dh])
        };
        let q = split(tape, q_flat, w.wq, w.bq, tq)?;
        let k = split(tape, kv_flat, w.wk, w.bk, tk)?;
        let v = split(tape, kv_flat, w.wv, w.bv, tk)?;
        let scores = tape.bmm_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.mask_fill(scores, mask, MASKED)?;
        let probs = tape.softmax(scores)?;
        let ctx = tape.bmm(probs, v)?;
        let ctx = tape.reshape(ctx, &[b, nh, tq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * tq, h])?;
        let out = linear(tape, ctx, w.wo, w.bo)?;
        tape.reshape(out, &[b, tq, h])
    }

    fn feed_forward(&self, tape: &mut Tape, w: &FfnVars, x: Var, rows: usize) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[rows, self.cfg.hidden])?;
        let hdn = linear(tape, flat, w.w1, w.b1)?;
        let hdn = tape.gelu(hdn);
        let out = linear(tape, hdn, w.w2, w.b2)?;
        tape.reshape(out, &shape)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, opts: &mut ForwardOptions<'_>) -> Result<Var> {
        let p = self.cfg.dropout_rate;
        let Some(rng) = opts.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let m: Vec<f64> = (0..n).map(|_| if rng.gen_bool(p) { 0.0 } else { keep }).collect();
        let m = tape.constant(Tensor::new(shape, m)?);
        tape.mul(x, m)
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn layer_norm(tape: &mut Tape, w: &LnVars, x: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS);
    let g = tape.mul(n, w.gain)?;
    tape.add(g, w.bias)
}

/// Boolean mask `[b * heads, tq, tk]`; `blocked(batch, query, key)` marks
/// slots that may not be attended.
fn attention_mask(
    heads: usize,
    b: usize,
    tq: usize,
    tk: usize,
    blocked: impl Fn(usize, usize, usize) -> bool,
) -> Vec<bool> {
    let mut mask = Vec::with_capacity(b * heads * tq * tk);
    for bi in 0..b {
        for _ in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    mask.push(blocked(bi, i, j));
                }
            }
        }
    }
    mask
}
