//! Maximum-likelihood and self importance-aware training objectives.
//!
//! Both objectives take teacher-forced log-probabilities `[B, T, V]`, the
//! target ids `[B, T]` and a mask that is false on padding. A sequence's
//! loss is the (weighted) sum of token negative log-likelihoods over its
//! unmasked positions; the batch loss is the mean over sequences.
//!
//! The importance-aware objective scales each token by
//! `w_t = (1 - p_t)^alpha` and each sequence by `w_s = (1 - prod_t p_t)^beta`,
//! so that tokens and whole targets the model already predicts confidently
//! contribute less.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Upper clamp on a sequence's summed log-probability before `w_s` is taken.
const LOG_CONF_CEIL: f64 = -1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiaConfig {
    /// Token-level exponent.
    pub alpha: f64,
    /// Sentence-level exponent.
    pub beta: f64,
    /// Treat the weights as constants when differentiating.
    pub detach_weights: bool,
}

impl Default for SiaConfig {
    fn default() -> Self {
        SiaConfig {
            alpha: 0.2,
            beta: 40.0,
            detach_weights: true,
        }
    }
}

impl SiaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation(format!(
                "alpha {} and beta {} must be finite and non-negative",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Which objective a training stage optimises.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mle,
    Sia(SiaConfig),
}

/// Loss value and the per-token and per-sequence statistics behind it.
///
/// Matrices are `[B, T]` row-major. Padding positions report a confidence
/// of 1 and a token weight of 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_token_conf: Vec<f64>,
    pub sent_conf: Vec<f64>,
    pub w_t: Vec<f64>,
    pub w_s: Vec<f64>,
}

struct Picked {
    b: usize,
    t: usize,
    /// `log p(y_t | y_<t)` with padding zeroed, on the tape.
    masked_lp: Var,
    mask: Var,
    token_lp: Var,
    lp_values: Vec<f64>,
    mask_values: Vec<f64>,
}

fn pick_targets(tape: &mut Tape, log_probs: Var, targets: &[u32], mask: &[bool]) -> Result<Picked> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 3 || targets.len() != shape[0] * shape[1] || mask.len() != targets.len() {
        return Err(Error::Dimension {
            op: "loss",
            lhs: shape,
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    if let Some(bad) = targets.iter().find(|&&id| id as usize >= v) {
        return Err(Error::Range(format!("target id {bad} outside vocabulary of {v}")));
    }
    let ids: Vec<usize> = targets.iter().map(|&id| id as usize).collect();
    let token_lp = tape.pick(log_probs, &ids)?;
    let mask_values: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask_var = tape.constant(Tensor::new(vec![b, t], mask_values.clone())?);
    let masked_lp = tape.mul(token_lp, mask_var)?;
    let lp_values = tape.value(masked_lp).data().to_vec();
    Ok(Picked {
        b,
        t,
        masked_lp,
        mask: mask_var,
        token_lp,
        lp_values,
        mask_values,
    })
}

fn confidences(p: &Picked) -> (Vec<f64>, Vec<f64>) {
    let per_token = p.lp_values.iter().map(|lp| lp.exp()).collect();
    let sent = p
        .lp_values
        .chunks(p.t.max(1))
        .take(p.b)
        .map(|row| row.iter().sum::<f64>().exp())
        .collect();
    (per_token, sent)
}

/// Maximum-likelihood loss recorded on `tape`.
pub fn mle_loss_on(tape: &mut Tape, log_probs: Var, targets: &[u32], mask: &[bool]) -> Result<(Var, LossOutput)> {
    let p = pick_targets(tape, log_probs, targets, mask)?;
    let per_seq = tape.sum_last(p.masked_lp);
    let mean = tape.mean(per_seq);
    let loss = tape.neg(mean);
    let (per_token_conf, sent_conf) = confidences(&p);
    let out = LossOutput {
        loss: tape.value(loss).item(),
        per_token_conf,
        sent_conf,
        w_t: p.mask_values.clone(),
        w_s: vec![1.0; p.b],
    };
    Ok((loss, out))
}

/// Token and sentence weights from per-token confidences `[B, T]`.
///
/// `w_s` is evaluated as `exp(beta * ln(1 - exp(sum_t ln p_t)))` with the
/// log-sum clamped to at most -1e-12, which stays finite for long
/// sequences where the product underflows.
pub fn sia_weights(per_token_conf: &[f64], mask: &[bool], t: usize, cfg: &SiaConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if per_token_conf.len() != mask.len() || t == 0 || mask.len() % t != 0 {
        return Err(Error::Dimension {
            op: "sia_weights",
            lhs: vec![per_token_conf.len()],
            rhs: vec![mask.len(), t],
        });
    }
    if let Some(bad) = per_token_conf
        .iter()
        .zip(mask)
        .find(|(p, m)| **m && !(**p > 0.0 && **p <= 1.0))
    {
        return Err(Error::Domain {
            op: "sia_weights",
            msg: format!("confidence {} outside (0, 1]", bad.0),
        });
    }
    let log_p: Vec<f64> = per_token_conf
        .iter()
        .zip(mask)
        .map(|(p, &m)| if m { p.ln() } else { 0.0 })
        .collect();
    Ok(weights_from_log_p(&log_p, mask, t, cfg))
}

fn weights_from_log_p(log_p: &[f64], mask: &[bool], t: usize, cfg: &SiaConfig) -> (Vec<f64>, Vec<f64>) {
    let w_t = log_p
        .iter()
        .zip(mask)
        .map(|(lp, &m)| if m { (1.0 - lp.exp()).powf(cfg.alpha) } else { 0.0 })
        .collect();
    let w_s = log_p
        .chunks(t)
        .map(|row| sentence_weight(row.iter().sum(), cfg.beta))
        .collect();
    (w_t, w_s)
}

fn sentence_weight(log_conf: f64, beta: f64) -> f64 {
    (beta * (-log_conf.min(LOG_CONF_CEIL).exp()).ln_1p()).exp()
}

/// Importance-aware loss recorded on `tape`.
pub fn sia_loss_on(
    tape: &mut Tape,
    log_probs: Var,
    targets: &[u32],
    mask: &[bool],
    cfg: &SiaConfig,
) -> Result<(Var, LossOutput)> {
    cfg.validate()?;
    let p = pick_targets(tape, log_probs, targets, mask)?;
    let mask_bool: Vec<bool> = p.mask_values.iter().map(|&m| m != 0.0).collect();
    let (w_t_var, w_s_var) = if cfg.detach_weights {
        let (w_t, w_s) = weights_from_log_p(&p.lp_values, &mask_bool, p.t.max(1), cfg);
        let wt = tape.constant(Tensor::new(vec![p.b, p.t], w_t)?);
        let ws = tape.constant(Tensor::new(vec![p.b], w_s)?);
        (wt, ws)
    } else {
        // w_t = (1 - p)^alpha on unmasked positions.
        let prob = tape.exp(p.token_lp);
        let neg = tape.neg(prob);
        let one_minus = tape.add_scalar(neg, 1.0);
        let powed = tape.pow(one_minus, cfg.alpha)?;
        let wt = tape.mul(powed, p.mask)?;
        // w_s = exp(beta * log1p(-exp(min(sum log p, ceil)))).
        let seq_lp = tape.sum_last(p.masked_lp);
        let clamped = tape.clamp_max(seq_lp, LOG_CONF_CEIL);
        let conf = tape.exp(clamped);
        let neg_conf = tape.neg(conf);
        let log_w = tape.log1p(neg_conf)?;
        let scaled = tape.scale(log_w, cfg.beta);
        let ws = tape.exp(scaled);
        (wt, ws)
    };
    let weighted = tape.mul(p.masked_lp, w_t_var)?;
    let per_seq = tape.sum_last(weighted);
    let per_seq = tape.mul(per_seq, w_s_var)?;
    let mean = tape.mean(per_seq);
    let loss = tape.neg(mean);
    let (per_token_conf, sent_conf) = confidences(&p);
    let out = LossOutput {
        loss: tape.value(loss).item(),
        per_token_conf: per_token_conf
            .into_iter()
            .zip(&mask_bool)
            .map(|(c, &m)| if m { c } else { 1.0 })
            .collect(),
        sent_conf,
        w_t: tape.value(w_t_var).data().to_vec(),
        w_s: tape.value(w_s_var).data().to_vec(),
    };
    Ok((loss, out))
}

/// Records `objective` on `tape`.
pub fn loss_on(
    tape: &mut Tape,
    objective: &Objective,
    log_probs: Var,
    targets: &[u32],
    mask: &[bool],
) -> Result<(Var, LossOutput)> {
    match objective {
        Objective::Mle => mle_loss_on(tape, log_probs, targets, mask),
        Objective::Sia(cfg) => sia_loss_on(tape, log_probs, targets, mask, cfg),
    }
}

/// Maximum-likelihood loss of fixed log-probabilities.
pub fn mle_loss(log_probs: &Tensor, targets: &[u32], mask: &[bool]) -> Result<LossOutput> {
    let mut tape = Tape::new();
    let lp = tape.constant(log_probs.clone());
    Ok(mle_loss_on(&mut tape, lp, targets, mask)?.1)
}

/// Importance-aware loss of fixed log-probabilities.
pub fn sia_loss(log_probs: &Tensor, targets: &[u32], mask: &[bool], cfg: &SiaConfig) -> Result<LossOutput> {
    let mut tape = Tape::new();
    let lp = tape.constant(log_probs.clone());
    Ok(sia_loss_on(&mut tape, lp, targets, mask, cfg)?.1)
}
