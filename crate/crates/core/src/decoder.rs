//! GRU caption decoder driven by dynamic modal attention (DMA).
//!
//! At every word step the decoder scores each representation in
//! `(h_v, h_s, h_vs)` with a sigmoid relevance head conditioned on the
//! previous decoder state, normalizes the scores, reweights them by the
//! modality preference `c`, and turns them into attention weights `zeta`
//! with a temperature softmax, optionally perturbed by Gumbel noise. The
//! weighted sum of the projected representations is concatenated with the
//! previous token embedding as the GRU input.

use serde::{Deserialize, Serialize};

use crate::autodiff::{one_hot_argmax, Tape, Var};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::fusion::EncodedRepresentations;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SplitRng;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    V,
    S,
    VS,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::V, Modality::S, Modality::VS];

    pub fn index(self) -> usize {
        match self {
            Modality::V => 0,
            Modality::S => 1,
            Modality::VS => 2,
        }
    }

    pub fn from_index(i: usize) -> Modality {
        Modality::ALL[i]
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::V => "V",
            Modality::S => "S",
            Modality::VS => "V+S",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DmaVariant {
    Softmax,
    Gumbel,
    StGumbel,
}

impl DmaVariant {
    pub fn name(self) -> &'static str {
        match self {
            DmaVariant::Softmax => "softmax",
            DmaVariant::Gumbel => "gumbel",
            DmaVariant::StGumbel => "st-gumbel",
        }
    }

    pub fn uses_noise(self) -> bool {
        !matches!(self, DmaVariant::Softmax)
    }
}

impl std::str::FromStr for DmaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(DmaVariant::Softmax),
            "gumbel" => Ok(DmaVariant::Gumbel),
            "st-gumbel" => Ok(DmaVariant::StGumbel),
            other => Err(Error::Config(format!("unknown DMA variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmaConfig {
    pub variant: DmaVariant,
    pub tau: f64,
    /// Preferences `(c_v, c_s, c_vs)`.
    pub c: [f64; 3],
}

impl Default for DmaConfig {
    fn default() -> Self {
        DmaConfig {
            variant: DmaVariant::Gumbel,
            tau: 0.05,
            c: [1.0, 1.0, 1.5],
        }
    }
}

impl DmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.c.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config(format!("preferences must be positive, got {:?}", self.c)));
        }
        Ok(())
    }
}

/// Whether the decoder attends dynamically or always reads one representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attention {
    Dynamic,
    Fixed(Modality),
}

/// Attention weights and their intermediates for one word step.
#[derive(Debug, Clone, Copy)]
pub struct DmaOutput {
    /// Weights used in the forward pass (one-hot for st-gumbel).
    pub zeta: Var,
    /// Soft weights before any straight-through hardening.
    pub soft: Var,
    pub eta: Var,
    pub pi: Var,
}

/// `zeta` from relevance scores `eta`, with optional fixed Gumbel noise.
pub fn zeta_from_eta(tape: &mut Tape, eta: Var, cfg: &DmaConfig, noise: Option<[f64; 3]>) -> Result<DmaOutput> {
    if tape.shape(eta) != [3] {
        return Err(Error::dim("dma eta", tape.shape(eta), &[3]));
    }
    let eta_sum = tape.sum(eta);
    let rho = tape.div(eta, eta_sum)?;
    let c = tape.constant(Tensor::vector(&cfg.c));
    let c_rho = tape.mul(c, rho)?;
    let c_rho_sum = tape.sum(c_rho);
    let pi = tape.div(c_rho, c_rho_sum)?;
    let log_pi = tape.log(pi);
    let logits = match noise {
        Some(g) => {
            let g = tape.constant(Tensor::vector(&g));
            tape.add(g, log_pi)?
        }
        None => log_pi,
    };
    let soft = tape.softmax(logits, cfg.tau)?;
    let zeta = match cfg.variant {
        DmaVariant::StGumbel => tape.straight_through_one_hot(soft)?,
        _ => soft,
    };
    if !tape.value(zeta).is_finite() {
        return Err(Error::Numeric("dma weights".into()));
    }
    Ok(DmaOutput { zeta, soft, eta, pi })
}

/// Plain-value version of [`zeta_from_eta`] starting from `pi`. Returns the
/// soft weights and the forward weights.
pub fn zeta_from_pi(pi: [f64; 3], cfg: &DmaConfig, noise: Option<[f64; 3]>) -> ([f64; 3], [f64; 3]) {
    let g = noise.unwrap_or([0.0; 3]);
    let logits: Vec<f64> = (0..3).map(|k| g[k] + pi[k].ln()).collect();
    let soft = crate::autodiff::softmax(&logits, cfg.tau);
    let fwd = match cfg.variant {
        DmaVariant::StGumbel => one_hot_argmax(&soft),
        _ => soft.clone(),
    };
    ([soft[0], soft[1], soft[2]], [fwd[0], fwd[1], fwd[2]])
}

/// Plain-value `pi` from `eta` and the preferences.
pub fn pi_from_eta(eta: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let s: f64 = eta.iter().sum();
    let rho = eta.map(|e| e / s);
    let cr: Vec<f64> = (0..3).map(|k| c[k] * rho[k]).collect();
    let t: f64 = cr.iter().sum();
    [cr[0] / t, cr[1] / t, cr[2] / t]
}

pub fn sample_gumbel(rng: &mut SplitRng) -> [f64; 3] {
    [rng.gumbel(), rng.gumbel(), rng.gumbel()]
}

/// Per-modality projections to the common width and relevance heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmaParams {
    pub proj: [ParamId; 3],
    pub rel_w: [ParamId; 3],
    pub rel_b: [ParamId; 3],
}

impl DmaParams {
    fn new(store: &mut ParamStore, dims: [usize; 3], att: usize, dec: usize, rng: &mut SplitRng) -> Self {
        let names = ["v", "s", "vs"];
        let proj = std::array::from_fn(|k| {
            store.add_uniform(format!("dma.proj.{}", names[k]), &[dims[k], att], dims[k], rng)
        });
        let rel_w = std::array::from_fn(|k| {
            let fan = dims[k] + dec;
            store.add_uniform(format!("dma.rel.{}.w", names[k]), &[fan, 1], fan, rng)
        });
        let rel_b = std::array::from_fn(|k| store.add(format!("dma.rel.{}.b", names[k]), Tensor::scalar(0.0)));
        DmaParams { proj, rel_w, rel_b }
    }
}

/// `eta_k = sigmoid(w'_k · (h_k ⊕ state) + b_k)` for all three modalities.
pub fn relevance(tape: &mut Tape, p: &Bound, dma: &DmaParams, z: &EncodedRepresentations, state: Var) -> Result<Var> {
    let mut etas = Vec::with_capacity(3);
    for m in Modality::ALL {
        let k = m.index();
        let x = tape.concat(&[z.get(m), state])?;
        let s = tape.matmul(x, p[dma.rel_w[k]])?;
        let s = tape.add(s, p[dma.rel_b[k]])?;
        etas.push(tape.sigmoid(s));
    }
    tape.concat(&etas)
}

/// DMA weights for one step. Gumbel noise is drawn from `rng` only when one
/// is supplied and the variant is stochastic; otherwise `g = 0`.
pub fn dma_weights(
    tape: &mut Tape,
    p: &Bound,
    dma: &DmaParams,
    z: &EncodedRepresentations,
    state: Var,
    cfg: &DmaConfig,
    rng: Option<&mut SplitRng>,
) -> Result<DmaOutput> {
    cfg.validate()?;
    let eta = relevance(tape, p, dma, z, state)?;
    let noise = match rng {
        Some(r) if cfg.variant.uses_noise() => Some(sample_gumbel(r)),
        _ => None,
    };
    zeta_from_eta(tape, eta, cfg, noise)
}

/// `sum_k zeta_k · (h_k W_k)`.
pub fn dma_mix(tape: &mut Tape, p: &Bound, dma: &DmaParams, z: &EncodedRepresentations, zeta: Var) -> Result<Var> {
    if tape.shape(zeta) != [3] {
        return Err(Error::dim("dma_mix", tape.shape(zeta), &[3]));
    }
    let mut acc: Option<Var> = None;
    for m in Modality::ALL {
        let k = m.index();
        let proj = tape.matmul(z.get(m), p[dma.proj[k]])?;
        let w = tape.slice(zeta, k, 1)?;
        let term = tape.mul(w, proj)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("three modalities"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub vocab: usize,
    pub emb: usize,
    pub hidden: usize,
    pub att: usize,
    /// Widths of `h_v`, `h_s`, `h_vs`.
    pub rep: [usize; 3],
}

/// One attention record per generated word step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub zeta: [f64; 3],
    pub modality: Modality,
    pub token: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_type: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub steps: Vec<TraceStep>,
}

/// Result of one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub logits: Var,
    pub state: Var,
    pub zeta: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_len: usize,
    pub beam: usize,
    /// Draw Gumbel noise during generation from this seed.
    pub sample_noise_seed: Option<u64>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_len: 15,
            beam: 1,
            sample_noise_seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decoder {
    dims: DecoderDims,
    pub attention: Attention,
    embed: ParamId,
    w_x: ParamId,
    w_h: ParamId,
    b_x: ParamId,
    b_h: ParamId,
    w_out: ParamId,
    dma: DmaParams,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, dims: DecoderDims, attention: Attention, rng: &mut SplitRng) -> Self {
        let h = dims.hidden;
        let input = dims.emb + dims.att;
        let embed = store.add_uniform("dec.embed", &[dims.vocab, dims.emb], dims.emb, rng);
        let w_x = store.add_uniform("dec.gru.w_x", &[input, 3 * h], input + h, rng);
        let w_h = store.add_uniform("dec.gru.w_h", &[h, 3 * h], input + h, rng);
        let b_x = store.add("dec.gru.b_x", Tensor::zeros(&[3 * h]));
        let b_h = store.add("dec.gru.b_h", Tensor::zeros(&[3 * h]));
        let w_out = store.add_uniform("dec.w_out", &[h, dims.vocab], h, rng);
        let dma = DmaParams::new(store, dims.rep, dims.att, h, rng);
        Decoder {
            dims,
            attention,
            embed,
            w_x,
            w_h,
            b_x,
            b_h,
            w_out,
            dma,
        }
    }

    pub fn dims(&self) -> DecoderDims {
        self.dims
    }

    pub fn dma_params(&self) -> &DmaParams {
        &self.dma
    }

    pub fn output_weights(&self) -> ParamId {
        self.w_out
    }

    pub fn initial_state(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(&[self.dims.hidden]))
    }

    /// Attention weights and mixed representation for this step.
    fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: &EncodedRepresentations,
        state: Var,
        cfg: &DmaConfig,
        rng: Option<&mut SplitRng>,
    ) -> Result<(Var, Var)> {
        match self.attention {
            Attention::Dynamic => {
                let out = dma_weights(tape, p, &self.dma, z, state, cfg, rng)?;
                let mix = dma_mix(tape, p, &self.dma, z, out.zeta)?;
                Ok((out.zeta, mix))
            }
            Attention::Fixed(m) => {
                let mix = tape.matmul(z.get(m), p[self.dma.proj[m.index()]])?;
                let zeta = tape.constant(Tensor::one_hot(3, m.index())?);
                Ok((zeta, mix))
            }
        }
    }

    /// GRU update on `embed(prev) ⊕ mix`, then vocabulary logits.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prev_token: usize,
        state: Var,
        z: &EncodedRepresentations,
        cfg: &DmaConfig,
        rng: Option<&mut SplitRng>,
    ) -> Result<StepOutput> {
        if prev_token >= self.dims.vocab {
            return Err(Error::Index {
                op: "decode_step",
                index: prev_token,
                len: self.dims.vocab,
            });
        }
        let h = self.dims.hidden;
        let (zeta, mix) = self.attend(tape, p, z, state, cfg, rng)?;
        let emb = tape.embedding_lookup(p[self.embed], prev_token)?;
        let x = tape.concat(&[emb, mix])?;
        let gx = tape.matmul(x, p[self.w_x])?;
        let gx = tape.add(gx, p[self.b_x])?;
        let gh = tape.matmul(state, p[self.w_h])?;
        let gh = tape.add(gh, p[self.b_h])?;

        let rx = tape.slice(gx, 0, h)?;
        let rh = tape.slice(gh, 0, h)?;
        let r = tape.add(rx, rh)?;
        let r = tape.sigmoid(r);
        let ux = tape.slice(gx, h, h)?;
        let uh = tape.slice(gh, h, h)?;
        let u = tape.add(ux, uh)?;
        let u = tape.sigmoid(u);
        let nx = tape.slice(gx, 2 * h, h)?;
        let nh = tape.slice(gh, 2 * h, h)?;
        let rn = tape.mul(r, nh)?;
        let n = tape.add(nx, rn)?;
        let n = tape.tanh(n);
        // (1 - u) * n + u * state == n + u * (state - n)
        let d = tape.sub(state, n)?;
        let ud = tape.mul(u, d)?;
        let new_state = tape.add(n, ud)?;
        let logits = tape.matmul(new_state, p[self.w_out])?;
        Ok(StepOutput {
            logits,
            state: new_state,
            zeta,
        })
    }

    /// Greedy (beam 1) or beam-search decoding from BOS. Returned tokens
    /// exclude BOS and EOS; the trace has one entry per step including the
    /// EOS step when one is emitted.
    pub fn generate(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: &EncodedRepresentations,
        cfg: &DmaConfig,
        opts: &GenerateOptions,
    ) -> Result<(Vec<usize>, AttentionTrace)> {
        if opts.max_len == 0 || opts.beam == 0 {
            return Err(Error::Config("max_len and beam must be at least 1".into()));
        }
        let mut rng = opts.sample_noise_seed.map(SplitRng::new);
        if opts.beam == 1 {
            return self.greedy(tape, p, z, cfg, opts.max_len, rng.as_mut());
        }
        self.beam_search(tape, p, z, cfg, opts, rng.as_mut())
    }

    fn greedy(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: &EncodedRepresentations,
        cfg: &DmaConfig,
        max_len: usize,
        mut rng: Option<&mut SplitRng>,
    ) -> Result<(Vec<usize>, AttentionTrace)> {
        let mut state = self.initial_state(tape);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut trace = AttentionTrace::default();
        for _ in 0..max_len {
            let out = self.decode_step(tape, p, prev, state, z, cfg, rng.as_deref_mut())?;
            let token = tape.value(out.logits).argmax();
            trace.steps.push(trace_step(tape.value(out.zeta).data(), token));
            if token == EOS {
                break;
            }
            tokens.push(token);
            prev = token;
            state = out.state;
        }
        Ok((tokens, trace))
    }

    fn beam_search(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: &EncodedRepresentations,
        cfg: &DmaConfig,
        opts: &GenerateOptions,
        mut rng: Option<&mut SplitRng>,
    ) -> Result<(Vec<usize>, AttentionTrace)> {
        #[derive(Clone)]
        struct Hyp {
            tokens: Vec<usize>,
            trace: Vec<TraceStep>,
            score: f64,
            state: Var,
            done: bool,
        }
        let init = self.initial_state(tape);
        let mut beams = vec![Hyp {
            tokens: Vec::new(),
            trace: Vec::new(),
            score: 0.0,
            state: init,
            done: false,
        }];
        for _ in 0..opts.max_len {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut candidates: Vec<Hyp> = Vec::new();
            for b in &beams {
                if b.done {
                    candidates.push(b.clone());
                    continue;
                }
                let prev = b.tokens.last().copied().unwrap_or(BOS);
                let out = self.decode_step(tape, p, prev, b.state, z, cfg, rng.as_deref_mut())?;
                let logits = tape.value(out.logits).data();
                let logp = log_softmax(logits);
                let zeta = tape.value(out.zeta).data().to_vec();
                let mut order: Vec<usize> = (0..logp.len()).collect();
                order.sort_by(|&a, &c| logp[c].total_cmp(&logp[a]).then(a.cmp(&c)));
                for &tok in order.iter().take(opts.beam) {
                    let mut h = b.clone();
                    h.score += logp[tok];
                    h.trace.push(trace_step(&zeta, tok));
                    h.state = out.state;
                    if tok == EOS {
                        h.done = true;
                    } else {
                        h.tokens.push(tok);
                    }
                    candidates.push(h);
                }
            }
            candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
            candidates.truncate(opts.beam);
            beams = candidates;
        }
        let best = beams
            .into_iter()
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .expect("at least one beam");
        Ok((best.tokens, AttentionTrace { steps: best.trace }))
    }
}

fn trace_step(zeta: &[f64], token: usize) -> TraceStep {
    TraceStep {
        zeta: [zeta[0], zeta[1], zeta[2]],
        modality: Modality::from_index(argmax(zeta)),
        token,
        word_type: None,
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
