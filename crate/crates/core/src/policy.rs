//! Tiny autoregressive categorical policy.
//!
//! The last `W` tokens of the context (left-padded with BOS) are embedded,
//! concatenated, passed through one tanh layer and projected to vocabulary
//! logits. PAD is masked out of every distribution. Gradients are derived by
//! hand; see `accumulate_weighted_logprob_grad`.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Layout, ParamVector};
use crate::rng::Rng;

pub type TokenId = usize;

pub const EMBEDDING: &str = "embedding";
pub const HIDDEN_WEIGHTS: &str = "hidden_weights";
pub const HIDDEN_BIAS: &str = "hidden_bias";
pub const OUTPUT_WEIGHTS: &str = "output_weights";
pub const OUTPUT_BIAS: &str = "output_bias";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub sep: TokenId,
}

impl Vocabulary {
    pub fn new(
        symbols: Vec<String>,
        bos: TokenId,
        eos: TokenId,
        pad: TokenId,
        sep: TokenId,
    ) -> Result<Self> {
        if symbols.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary needs at least 4 symbols, got {}",
                symbols.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = symbols.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate symbol {dup:?}")));
        }
        let specials = [bos, eos, pad, sep];
        if specials.iter().any(|&id| id >= symbols.len()) {
            return Err(Error::InvalidArgument("special token id out of range".into()));
        }
        for i in 0..specials.len() {
            for j in i + 1..specials.len() {
                if specials[i] == specials[j] {
                    return Err(Error::InvalidArgument("special token ids must be distinct".into()));
                }
            }
        }
        Ok(Vocabulary {
            symbols,
            bos,
            eos,
            pad,
            sep,
        })
    }

    /// Shared task alphabet: digits 0-9, separator, BOS, EOS, PAD.
    pub fn digits() -> Self {
        let mut symbols: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        symbols.extend(["|", "<bos>", "<eos>", "<pad>"].map(String::from));
        Vocabulary::new(symbols, 11, 12, 13, 10).expect("static vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id]
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos || id == self.pad || id == self.sep
    }

    /// Token id of the digit `d`, if the vocabulary has one.
    pub fn digit(&self, d: u8) -> Option<TokenId> {
        self.id_of(&d.to_string())
    }

    /// Parses whitespace-separated symbols.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|s| {
                self.id_of(s)
                    .ok_or_else(|| Error::Parse(format!("unknown symbol {s:?}")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbols.get(t).map_or("<?>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArchitecture {
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
}

impl PolicyArchitecture {
    pub fn new(vocab: &Vocabulary, context_window: usize, embed_dim: usize, hidden_dim: usize) -> Result<Self> {
        if context_window == 0 || embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::InvalidArgument(
                "context window and layer sizes must be at least 1".into(),
            ));
        }
        Ok(PolicyArchitecture {
            context_window,
            embed_dim,
            hidden_dim,
            vocab_size: vocab.size(),
            bos: vocab.bos,
            eos: vocab.eos,
            pad: vocab.pad,
        })
    }

    fn input_dim(&self) -> usize {
        self.context_window * self.embed_dim
    }

    pub fn layout(&self) -> Layout {
        Layout::new([
            (EMBEDDING, vec![self.vocab_size, self.embed_dim]),
            (HIDDEN_WEIGHTS, vec![self.hidden_dim, self.input_dim()]),
            (HIDDEN_BIAS, vec![self.hidden_dim]),
            (OUTPUT_WEIGHTS, vec![self.vocab_size, self.hidden_dim]),
            (OUTPUT_BIAS, vec![self.vocab_size]),
        ])
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(Arc::new(self.layout()))
    }

    /// Parameters drawn uniformly from `[-scale, scale]`.
    pub fn init_params(&self, scale: f64, rng: &mut Rng) -> ParamVector {
        let mut p = self.zero_params();
        for v in p.values_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if **params.layout() == self.layout() {
            Ok(())
        } else {
            Err(Error::Shape(
                "parameter layout does not match the policy architecture".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub temperature: f64,
}

/// Intermediate activations of one forward pass, kept for backprop.
struct Activations {
    window: Vec<TokenId>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn window_of(arch: &PolicyArchitecture, context: &[TokenId]) -> Result<Vec<TokenId>> {
    if let Some(&bad) = context.iter().find(|&&t| t >= arch.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab_size: arch.vocab_size,
        });
    }
    let w = arch.context_window;
    let tail = &context[context.len().saturating_sub(w)..];
    let mut window = vec![arch.bos; w - tail.len()];
    window.extend_from_slice(tail);
    Ok(window)
}

fn forward(params: &ParamVector, arch: &PolicyArchitecture, context: &[TokenId]) -> Result<Activations> {
    let window = window_of(arch, context)?;
    let (e_dim, h_dim, v_dim) = (arch.embed_dim, arch.hidden_dim, arch.vocab_size);
    let in_dim = arch.input_dim();
    let emb = params.segment(EMBEDDING);
    let wh = params.segment(HIDDEN_WEIGHTS);
    let bh = params.segment(HIDDEN_BIAS);
    let wo = params.segment(OUTPUT_WEIGHTS);
    let bo = params.segment(OUTPUT_BIAS);

    let mut x = Vec::with_capacity(in_dim);
    for &tok in &window {
        x.extend_from_slice(&emb[tok * e_dim..(tok + 1) * e_dim]);
    }
    let hidden: Vec<f64> = (0..h_dim)
        .map(|h| {
            let row = &wh[h * in_dim..(h + 1) * in_dim];
            let pre: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + bh[h];
            pre.tanh()
        })
        .collect();
    let logits: Vec<f64> = (0..v_dim)
        .map(|v| {
            let row = &wo[v * h_dim..(v + 1) * h_dim];
            row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() + bo[v]
        })
        .collect();
    Ok(Activations {
        window,
        hidden,
        logits,
    })
}

/// Raw output logits for the next token after `context`.
pub fn logits(params: &ParamVector, arch: &PolicyArchitecture, context: &[TokenId]) -> Result<Vec<f64>> {
    Ok(forward(params, arch, context)?.logits)
}

fn distribution_from_logits(logits: Vec<f64>, temperature: f64, pad: TokenId) -> TokenDistribution {
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pad)
        .map(|(_, &z)| z / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pad)
        .map(|(_, &z)| (z / temperature - max).exp())
        .sum();
    let log_norm = max + sum.ln();
    let log_probs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            if i == pad {
                f64::NEG_INFINITY
            } else {
                z / temperature - log_norm
            }
        })
        .collect();
    let probs = log_probs.iter().map(|lp| lp.exp()).collect();
    TokenDistribution {
        probs,
        log_probs,
        logits,
        temperature,
    }
}

/// Softmax of `logits / temperature` with PAD forced to probability 0.
pub fn next_token_distribution(
    params: &ParamVector,
    arch: &PolicyArchitecture,
    context: &[TokenId],
    temperature: f64,
) -> Result<TokenDistribution> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits = forward(params, arch, context)?.logits;
    Ok(distribution_from_logits(logits, temperature, arch.pad))
}

/// Inverse-CDF draw over the fixed vocabulary order. Zero-probability
/// tokens (PAD in particular) are never returned.
pub fn sample_token(dist: &TokenDistribution, rng: &mut Rng) -> TokenId {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_live = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last_live = i;
        if u < cum {
            return i;
        }
    }
    last_live
}

/// Shannon entropy in nats.
pub fn token_entropy(dist: &TokenDistribution) -> f64 {
    dist.probs
        .iter()
        .zip(&dist.log_probs)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &lp)| -p * lp)
        .sum::<f64>()
        .max(0.0)
}

/// Per-token log-probabilities and entropies of `response` under teacher forcing.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
}

pub fn teacher_forced(
    params: &ParamVector,
    arch: &PolicyArchitecture,
    prompt: &[TokenId],
    response: &[TokenId],
    temperature: f64,
) -> Result<TeacherForced> {
    if let Some(pos) = response.iter().position(|&t| t == arch.pad) {
        return Err(Error::PadInResponse(pos));
    }
    let mut context: Vec<TokenId> = Vec::with_capacity(prompt.len() + response.len());
    context.extend_from_slice(prompt);
    let mut logprobs = Vec::with_capacity(response.len());
    let mut entropies = Vec::with_capacity(response.len());
    for &tok in response {
        let dist = next_token_distribution(params, arch, &context, temperature)?;
        if tok >= arch.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: tok,
                vocab_size: arch.vocab_size,
            });
        }
        logprobs.push(dist.log_probs[tok]);
        entropies.push(token_entropy(&dist));
        context.push(tok);
    }
    Ok(TeacherForced {
        logprobs,
        entropies,
    })
}

/// `log pi(response[t] | prompt ++ response[..t])` for every position.
pub fn sequence_logprobs(
    params: &ParamVector,
    arch: &PolicyArchitecture,
    prompt: &[TokenId],
    response: &[TokenId],
    temperature: f64,
) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::InvalidArgument("response must be nonempty".into()));
    }
    Ok(teacher_forced(params, arch, prompt, response, temperature)?.logprobs)
}

/// Gradient of `sum_t weights[t] * log pi(response[t] | ...)`.
pub fn weighted_logprob_grad(
    params: &ParamVector,
    arch: &PolicyArchitecture,
    prompt: &[TokenId],
    response: &[TokenId],
    weights: &[f64],
    temperature: f64,
) -> Result<ParamVector> {
    let mut grad = params.zeros_like();
    accumulate_weighted_logprob_grad(&mut grad, params, arch, prompt, response, weights, temperature)?;
    Ok(grad)
}

/// Adds the weighted log-likelihood gradient into `grad`.
///
/// Positions whose weight is exactly zero are skipped entirely, so they
/// cannot perturb the accumulated sums.
pub fn accumulate_weighted_logprob_grad(
    grad: &mut ParamVector,
    params: &ParamVector,
    arch: &PolicyArchitecture,
    prompt: &[TokenId],
    response: &[TokenId],
    weights: &[f64],
    temperature: f64,
) -> Result<()> {
    if weights.len() != response.len() {
        return Err(Error::Shape(format!(
            "{} weights for a response of {} tokens",
            weights.len(),
            response.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("token weight {i} is {}", weights[i])));
    }
    if !grad.same_shape(params) {
        return Err(Error::Shape("gradient buffer does not match parameters".into()));
    }
    if let Some(pos) = response.iter().position(|&t| t == arch.pad) {
        return Err(Error::PadInResponse(pos));
    }
    let (e_dim, h_dim, v_dim) = (arch.embed_dim, arch.hidden_dim, arch.vocab_size);
    let in_dim = arch.input_dim();
    let layout = params.layout().clone();
    let range = |name: &str| layout.segment(name).expect("policy segment").range();
    let (r_emb, r_wh, r_bh, r_wo, r_bo) = (
        range(EMBEDDING),
        range(HIDDEN_WEIGHTS),
        range(HIDDEN_BIAS),
        range(OUTPUT_WEIGHTS),
        range(OUTPUT_BIAS),
    );
    let wh = params.segment(HIDDEN_WEIGHTS);
    let wo = params.segment(OUTPUT_WEIGHTS);
    let emb = params.segment(EMBEDDING);

    let mut context: Vec<TokenId> = Vec::with_capacity(prompt.len() + response.len());
    context.extend_from_slice(prompt);
    let mut d_logits = vec![0.0; v_dim];
    let mut d_pre = vec![0.0; h_dim];
    let mut d_x = vec![0.0; in_dim];
    let mut x = vec![0.0; in_dim];
    for (&target, &w) in response.iter().zip(weights) {
        if w != 0.0 {
            let act = forward(params, arch, &context)?;
            if target >= v_dim {
                return Err(Error::TokenOutOfRange {
                    token: target,
                    vocab_size: v_dim,
                });
            }
            let dist = distribution_from_logits(act.logits, temperature, arch.pad);
            // d log p_target / d z_v = (1[v = target] - p_v) / temperature
            for v in 0..v_dim {
                d_logits[v] = if v == arch.pad {
                    0.0
                } else {
                    let indicator = if v == target { 1.0 } else { 0.0 };
                    w * (indicator - dist.probs[v]) / temperature
                };
            }
            for (j, &tok) in act.window.iter().enumerate() {
                x[j * e_dim..(j + 1) * e_dim].copy_from_slice(&emb[tok * e_dim..(tok + 1) * e_dim]);
            }

            let g = grad.values_mut();
            d_pre.iter_mut().for_each(|d| *d = 0.0);
            for v in 0..v_dim {
                let dz = d_logits[v];
                if dz == 0.0 {
                    continue;
                }
                g[r_bo.start + v] += dz;
                let g_row = &mut g[r_wo.start + v * h_dim..r_wo.start + (v + 1) * h_dim];
                let w_row = &wo[v * h_dim..(v + 1) * h_dim];
                for h in 0..h_dim {
                    g_row[h] += dz * act.hidden[h];
                    d_pre[h] += dz * w_row[h];
                }
            }
            for h in 0..h_dim {
                d_pre[h] *= 1.0 - act.hidden[h] * act.hidden[h];
            }
            d_x.iter_mut().for_each(|d| *d = 0.0);
            for h in 0..h_dim {
                let dp = d_pre[h];
                g[r_bh.start + h] += dp;
                let g_row = &mut g[r_wh.start + h * in_dim..r_wh.start + (h + 1) * in_dim];
                let w_row = &wh[h * in_dim..(h + 1) * in_dim];
                for i in 0..in_dim {
                    g_row[i] += dp * x[i];
                    d_x[i] += dp * w_row[i];
                }
            }
            for (j, &tok) in act.window.iter().enumerate() {
                let g_row = &mut g[r_emb.start + tok * e_dim..r_emb.start + (tok + 1) * e_dim];
                for e in 0..e_dim {
                    g_row[e] += d_x[j * e_dim + e];
                }
            }
        }
        context.push(target);
    }
    Ok(())
}
