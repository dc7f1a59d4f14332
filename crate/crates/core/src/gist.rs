//! The Gist token and the fine-tuning objective built around it.
//!
//! A trainable token is appended after positional embedding and the shared
//! head reads it alongside the Class token. Training combines
//! `L_cls + μ·L_gist + λ·L_interaction`, where the interaction term defaults
//! to the bidirectional KL divergence between the temperature-softened
//! CLS and Gist predictions. Prediction only ever uses the CLS logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{ParamGroup, ParamId, Scalar, Tape, Var};
use crate::vit::{Images, SequenceState, TokenRole, Vit, INIT_STD};

pub const GIST_PARAM: &str = "gist.token";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Interaction {
    Bkld,
    Mse,
    Cosine,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GistLossConfig {
    pub enabled: bool,
    pub gist_len: usize,
    pub temperature: f64,
    pub mu: f64,
    pub lambda: f64,
    pub interaction: Interaction,
    /// Extra cross entropy on mean-pooled prompt-token logits.
    pub aux_vpt_loss: bool,
}

impl Default for GistLossConfig {
    /// T = 3, μ = 0.5, λ = 0.75, one Gist token, BKLD interaction.
    fn default() -> Self {
        Self {
            enabled: true,
            gist_len: 1,
            temperature: 3.0,
            mu: 0.5,
            lambda: 0.75,
            interaction: Interaction::Bkld,
            aux_vpt_loss: false,
        }
    }
}

impl GistLossConfig {
    /// The grid λ is searched over.
    pub const LAMBDA_GRID: [f64; 3] = [0.25, 0.5, 0.75];

    /// Traditional framework: no Gist token, CLS cross entropy only.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// `l_cls + μ·l_gist + λ·l_interaction + l_aux`, in the order the
    /// training objective accumulates it.
    pub fn combine(&self, l_cls: f64, l_gist: f64, l_interaction: f64, l_aux: f64) -> f64 {
        l_cls + self.mu * l_gist + self.lambda * l_interaction + l_aux
    }

    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.enabled && self.gist_len == 0 {
            return Err(Error::Config("gist_len must be at least 1".into()));
        }
        if !self.mu.is_finite() || !self.lambda.is_finite() {
            return Err(Error::Config("mu and lambda must be finite".into()));
        }
        if self.interaction == Interaction::None && self.lambda != 0.0 {
            return Err(Error::Config(format!(
                "interaction NONE requires lambda = 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Scalar value of every loss term of one step. Terms that were not
/// computed are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_gist: f64,
    pub l_fkl: f64,
    pub l_rkl: f64,
    pub l_bkl: f64,
    /// The interaction term actually weighted by λ (BKLD, MSE or cosine).
    pub l_interaction: f64,
    pub l_aux_vpt: f64,
    pub l_all: f64,
}

/// Adds a trainable `[gist_len × D]` token to the model.
pub fn attach_gist_token<F: Scalar>(model: &mut Vit<F>, gist_len: usize, seed: u64) -> Result<ParamId> {
    if gist_len == 0 {
        return Err(Error::Config("gist_len must be at least 1".into()));
    }
    if model.gist_len().is_some() {
        return Err(Error::Layout("a Gist token is already attached".into()));
    }
    let mut rng = rng::stream(seed, Stream::GistInit);
    let token = rng::trunc_normal_tensor(&mut rng, &[gist_len, model.config().embed_dim], INIT_STD);
    let id = model.params_mut().insert(GIST_PARAM, token, ParamGroup::Gist)?;
    model.set_gist(Some((id, gist_len)));
    Ok(id)
}

/// Appends the Gist token after the positionally-embedded sequence:
/// `X₀ = [[x_cls; x] + P ; x_gist]`. The Gist slice receives no positional
/// embedding.
pub fn inject_gist<F: Scalar>(tape: &mut Tape<F>, state: &SequenceState, token: Var) -> Result<SequenceState> {
    if state.layout.contains(&TokenRole::Gist) {
        return Err(Error::Layout("Gist token already injected".into()));
    }
    let shape = tape.shape(token).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::dim("inject_gist", &shape, &[]));
    }
    let gist_len = shape[0];
    let tiled = tape.tile(token, state.batch)?;
    let tokens = tape.concat_seq(&[state.tokens, tiled])?;
    let mut layout = state.layout.clone();
    layout.extend(std::iter::repeat_n(TokenRole::Gist, gist_len));
    Ok(SequenceState {
        tokens,
        batch: state.batch,
        layout,
    })
}

/// `(CE(S_cls, y), CE(S_gist, y))`.
pub fn token_losses<F: Scalar>(tape: &mut Tape<F>, s_cls: Var, s_gist: Var, labels: &[usize]) -> Result<(Var, Var)> {
    if tape.shape(s_cls) != tape.shape(s_gist) {
        return Err(Error::dim("token_losses", tape.shape(s_cls), tape.shape(s_gist)));
    }
    Ok((tape.cross_entropy(s_cls, labels)?, tape.cross_entropy(s_gist, labels)?))
}

#[derive(Debug, Clone, Copy)]
pub struct Bkld {
    pub fkl: Var,
    pub rkl: Var,
    pub bkl: Var,
}

/// Forward `KL(S_cls‖S_gist; T)`, reverse `KL(S_gist‖S_cls; T)` and their
/// sum. Neither side is detached.
pub fn bkld<F: Scalar>(tape: &mut Tape<F>, s_cls: Var, s_gist: Var, temperature: F) -> Result<Bkld> {
    let fkl = tape.kl_divergence(s_cls, s_gist, temperature)?;
    let rkl = tape.kl_divergence(s_gist, s_cls, temperature)?;
    let bkl = tape.add(fkl, rkl)?;
    Ok(Bkld { fkl, rkl, bkl })
}

/// MSE over logits, or `1 − mean cosine similarity` (zero rows count as
/// similarity 0).
pub fn interaction_substitute<F: Scalar>(
    tape: &mut Tape<F>,
    s_cls: Var,
    s_gist: Var,
    kind: Interaction,
) -> Result<Var> {
    match kind {
        Interaction::Mse => tape.mse(s_cls, s_gist),
        Interaction::Cosine => tape.cosine_loss(s_cls, s_gist),
        other => Err(Error::Config(format!("{other:?} is not a substitute interaction"))),
    }
}

/// Logits consumed by the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub s_cls: Var,
    pub s_gist: Option<Var>,
    /// Mean-pooled prompt-token logits.
    pub s_vpt: Option<Var>,
    pub labels: &'a [usize],
}

fn aux_term<F: Scalar>(tape: &mut Tape<F>, inputs: &LossInputs<'_>, enabled: bool) -> Result<Option<Var>> {
    if !enabled {
        return Ok(None);
    }
    let s_vpt = inputs
        .s_vpt
        .ok_or_else(|| Error::Config("aux_vpt_loss needs prompt tokens".into()))?;
    Ok(Some(tape.cross_entropy(s_vpt, inputs.labels)?))
}

/// `L_all = L_cls + μ·L_gist + λ·L_interaction` (+ `L_vpt` when enabled).
pub fn overall_loss<F: Scalar>(
    tape: &mut Tape<F>,
    inputs: &LossInputs<'_>,
    cfg: &GistLossConfig,
) -> Result<(Var, LossBreakdown)> {
    if !cfg.enabled {
        return Err(Error::Config(
            "overall_loss requires the Gist objective to be enabled".into(),
        ));
    }
    cfg.validate()?;
    let s_gist = inputs
        .s_gist
        .ok_or_else(|| Error::Layout("overall_loss needs Gist logits".into()))?;
    let (l_cls, l_gist) = token_losses(tape, inputs.s_cls, s_gist, inputs.labels)?;
    let mut out = LossBreakdown {
        l_cls: tape.scalar(l_cls).to_f64(),
        l_gist: tape.scalar(l_gist).to_f64(),
        ..LossBreakdown::default()
    };
    let interaction = match cfg.interaction {
        Interaction::Bkld => {
            let b = bkld(tape, inputs.s_cls, s_gist, F::from_f64(cfg.temperature))?;
            out.l_fkl = tape.scalar(b.fkl).to_f64();
            out.l_rkl = tape.scalar(b.rkl).to_f64();
            out.l_bkl = tape.scalar(b.bkl).to_f64();
            Some(b.bkl)
        }
        Interaction::Mse | Interaction::Cosine => {
            Some(interaction_substitute(tape, inputs.s_cls, s_gist, cfg.interaction)?)
        }
        Interaction::None => None,
    };
    let mut total = l_cls;
    let gist_term = tape.scale(l_gist, F::from_f64(cfg.mu))?;
    total = tape.add(total, gist_term)?;
    if let Some(term) = interaction {
        out.l_interaction = tape.scalar(term).to_f64();
        let weighted = tape.scale(term, F::from_f64(cfg.lambda))?;
        total = tape.add(total, weighted)?;
    }
    if let Some(aux) = aux_term(tape, inputs, cfg.aux_vpt_loss)? {
        out.l_aux_vpt = tape.scalar(aux).to_f64();
        total = tape.add(total, aux)?;
    }
    out.l_all = tape.scalar(total).to_f64();
    Ok((total, out))
}

/// Traditional objective `L_cls` (+ `L_vpt` when requested).
pub fn traditional_loss<F: Scalar>(
    tape: &mut Tape<F>,
    inputs: &LossInputs<'_>,
    aux_vpt_loss: bool,
) -> Result<(Var, LossBreakdown)> {
    let l_cls = tape.cross_entropy(inputs.s_cls, inputs.labels)?;
    let mut out = LossBreakdown {
        l_cls: tape.scalar(l_cls).to_f64(),
        ..LossBreakdown::default()
    };
    let mut total = l_cls;
    if let Some(aux) = aux_term(tape, inputs, aux_vpt_loss)? {
        out.l_aux_vpt = tape.scalar(aux).to_f64();
        total = tape.add(total, aux)?;
    }
    out.l_all = tape.scalar(total).to_f64();
    Ok((total, out))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<F: Scalar>(logits: &[F], num_classes: usize) -> Vec<usize> {
    logits
        .chunks(num_classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Class predictions from the CLS logits alone. The Gist token, when
/// attached, still takes part in attention.
pub fn predict<F: Scalar>(model: &Vit<F>, images: Images<'_>) -> Result<Vec<usize>> {
    let logits = model.cls_logits(images)?;
    Ok(argmax_rows(logits.data(), model.config().num_classes))
}
