//! Micro vision transformer: patch embedding, Class token, positional
//! embedding, pre-norm encoder layers and a shared linear head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::{PeftState, SsfPoint};
use crate::rng::{self, Stream};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("patch_side", self.patch_side),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("backbone.{name} must be positive")));
            }
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::Config(format!(
                "image_side {} is not divisible by patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Number of patches L.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_side;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }
}

/// Role of a sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    Cls,
    Patch,
    Prompt,
    Gist,
}

/// Which token(s) feed the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    Cls,
    /// Mean of all Gist positions.
    Gist,
    /// Mean of all prompt positions.
    PromptPool,
}

impl Readout {
    fn role(self) -> TokenRole {
        match self {
            Readout::Cls => TokenRole::Cls,
            Readout::Gist => TokenRole::Gist,
            Readout::PromptPool => TokenRole::Prompt,
        }
    }
}

/// Token sequence `[batch × seq × dim]` on a tape plus the role of every
/// position.
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub tokens: Var,
    pub batch: usize,
    pub layout: Vec<TokenRole>,
}

impl SequenceState {
    pub fn seq_len(&self) -> usize {
        self.layout.len()
    }

    /// Contiguous span of positions with `role`, if any.
    pub fn span(&self, role: TokenRole) -> Option<(usize, usize)> {
        let start = self.layout.iter().position(|&r| r == role)?;
        let len = self.layout[start..].iter().take_while(|&&r| r == role).count();
        Some((start, len))
    }

    /// Exactly one CLS; roles contiguous; GIST positions, when present, last.
    pub fn validate(&self) -> Result<()> {
        let count = |role| self.layout.iter().filter(|&&r| r == role).count();
        if count(TokenRole::Cls) != 1 {
            return Err(Error::Layout("sequence must hold exactly one CLS token".into()));
        }
        for role in [TokenRole::Prompt, TokenRole::Gist, TokenRole::Patch] {
            if let Some((_, len)) = self.span(role) {
                if len != count(role) {
                    return Err(Error::Layout(format!("{role:?} positions are not contiguous")));
                }
            }
        }
        if let Some((start, len)) = self.span(TokenRole::Gist) {
            if start + len != self.layout.len() {
                return Err(Error::Layout("GIST positions must come last".into()));
            }
        }
        Ok(())
    }
}

/// Image batch `[batch × channels × height × width]`, row-major.
#[derive(Debug, Clone, Copy)]
pub struct Images<'a> {
    pub data: &'a [f32],
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub ln1: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub ln2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Debug, Clone)]
pub(crate) struct BackboneIds {
    pub patch: LinearIds,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub norm: NormIds,
    pub head: LinearIds,
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub state: SequenceState,
    /// Attention node of every layer; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

/// The micro-ViT with its parameters, attached PEFT modules and optional
/// Gist token.
#[derive(Debug, Clone)]
pub struct Vit<F> {
    config: BackboneConfig,
    params: ParamStore<F>,
    ids: BackboneIds,
    pub(crate) peft: PeftState,
    pub(crate) gist: Option<(ParamId, usize)>,
    pub(crate) pretrain_seed: Option<u64>,
}

fn layer_name(l: usize, part: &str) -> String {
    format!("layers.{l}.{part}")
}

impl<F: Scalar> Vit<F> {
    /// Fresh backbone: weights truncated normal(0.02), biases 0, LayerNorm
    /// affine identity, Class token and positional embedding truncated
    /// normal(0.02).
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::BackboneInit);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let bb = ParamGroup::Backbone;
        let mut linear = |store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, group| {
            store.insert(
                format!("{name}.weight"),
                rng::trunc_normal_tensor(&mut rng, &[fan_in, fan_out], INIT_STD),
                group,
            )?;
            store.insert(format!("{name}.bias"), Tensor::zeros([fan_out]), group)?;
            Ok::<_, Error>(())
        };
        linear(&mut store, "patch_embed", config.patch_dim(), d, bb)?;
        store.insert("cls_token", rng::trunc_normal_tensor(&mut rng, &[1, d], INIT_STD), bb)?;
        store.insert(
            "pos_embed",
            rng::trunc_normal_tensor(&mut rng, &[config.num_patches() + 1, d], INIT_STD),
            bb,
        )?;
        for l in 0..config.num_layers {
            let norm = |store: &mut ParamStore<F>, name: String| -> Result<()> {
                store.insert(format!("{name}.gamma"), Tensor::filled([d], F::one()), bb)?;
                store.insert(format!("{name}.beta"), Tensor::zeros([d]), bb)?;
                Ok(())
            };
            norm(&mut store, layer_name(l, "ln1"))?;
            for proj in ["q", "k", "v", "o"] {
                let name = layer_name(l, &format!("attn.{proj}"));
                store.insert(
                    format!("{name}.weight"),
                    rng::trunc_normal_tensor(&mut rng, &[d, d], INIT_STD),
                    bb,
                )?;
                store.insert(format!("{name}.bias"), Tensor::zeros([d]), bb)?;
            }
            norm(&mut store, layer_name(l, "ln2"))?;
            for (name, fi, fo) in [("ffn.fc1", d, config.ffn_hidden), ("ffn.fc2", config.ffn_hidden, d)] {
                let name = layer_name(l, name);
                store.insert(
                    format!("{name}.weight"),
                    rng::trunc_normal_tensor(&mut rng, &[fi, fo], INIT_STD),
                    bb,
                )?;
                store.insert(format!("{name}.bias"), Tensor::zeros([fo]), bb)?;
            }
        }
        store.insert("norm.gamma", Tensor::filled([d], F::one()), bb)?;
        store.insert("norm.beta", Tensor::zeros([d]), bb)?;
        store.insert(
            "head.weight",
            rng::trunc_normal_tensor(&mut rng, &[d, config.num_classes], INIT_STD),
            ParamGroup::Head,
        )?;
        store.insert("head.bias", Tensor::zeros([config.num_classes]), ParamGroup::Head)?;
        Self::from_store(config, store, PeftState::default(), None)
    }

    /// Rebuilds a model from named parameters, checking every backbone
    /// shape.
    pub(crate) fn from_store(
        config: BackboneConfig,
        params: ParamStore<F>,
        peft: PeftState,
        pretrain_seed: Option<u64>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            if params.get(id).shape() != shape {
                return Err(Error::dim("parameter", params.get(id).shape(), shape));
            }
            Ok(id)
        };
        let lin = |name: &str, fi: usize, fo: usize| -> Result<LinearIds> {
            Ok(LinearIds {
                weight: find(&format!("{name}.weight"), &[fi, fo])?,
                bias: find(&format!("{name}.bias"), &[fo])?,
            })
        };
        let norm = |name: &str| -> Result<NormIds> {
            Ok(NormIds {
                gamma: find(&format!("{name}.gamma"), &[d])?,
                beta: find(&format!("{name}.beta"), &[d])?,
            })
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            layers.push(LayerIds {
                ln1: norm(&layer_name(l, "ln1"))?,
                q: lin(&layer_name(l, "attn.q"), d, d)?,
                k: lin(&layer_name(l, "attn.k"), d, d)?,
                v: lin(&layer_name(l, "attn.v"), d, d)?,
                o: lin(&layer_name(l, "attn.o"), d, d)?,
                ln2: norm(&layer_name(l, "ln2"))?,
                fc1: lin(&layer_name(l, "ffn.fc1"), d, config.ffn_hidden)?,
                fc2: lin(&layer_name(l, "ffn.fc2"), config.ffn_hidden, d)?,
            });
        }
        let ids = BackboneIds {
            patch: lin("patch_embed", config.patch_dim(), d)?,
            cls: find("cls_token", &[1, d])?,
            pos: find("pos_embed", &[config.num_patches() + 1, d])?,
            layers,
            norm: norm("norm")?,
            head: lin("head", d, config.num_classes)?,
        };
        let gist = params
            .id(crate::gist::GIST_PARAM)
            .map(|id| (id, params.get(id).shape()[0]));
        Ok(Self {
            config,
            params,
            ids,
            peft,
            gist,
            pretrain_seed,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn peft(&self) -> &PeftState {
        &self.peft
    }

    pub fn pretrain_seed(&self) -> Option<u64> {
        self.pretrain_seed
    }

    pub fn set_pretrain_seed(&mut self, seed: Option<u64>) {
        self.pretrain_seed = seed;
    }

    /// Gist token length, when one is attached.
    pub fn gist_len(&self) -> Option<usize> {
        self.gist.map(|(_, len)| len)
    }

    pub(crate) fn gist_id(&self) -> Option<ParamId> {
        self.gist.map(|(id, _)| id)
    }

    pub(crate) fn set_gist(&mut self, gist: Option<(ParamId, usize)>) {
        self.gist = gist;
    }

    pub fn cls_token_id(&self) -> ParamId {
        self.ids.cls
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.ids.head.weight, self.ids.head.bias)
    }

    /// Re-initializes the head for a downstream task with `num_classes`
    /// outputs: truncated normal(0.02) weight, zero bias.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut rng = rng::stream(seed, Stream::HeadInit);
        let w = rng::trunc_normal_tensor(&mut rng, &[self.config.embed_dim, num_classes], INIT_STD);
        self.params.replace(self.ids.head.weight, w)?;
        self.params.replace(self.ids.head.bias, Tensor::zeros([num_classes]))?;
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Freezes every backbone parameter (patch embedding, Class token,
    /// positional embedding, encoder layers); the head, PEFT parameters and
    /// Gist token stay trainable. Idempotent.
    pub fn set_finetune_freeze(&mut self) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let frozen = self.params.group(id) == ParamGroup::Backbone;
            self.params.set_frozen(id, frozen);
        }
    }

    /// Makes every parameter trainable (pretraining).
    pub fn unfreeze_all(&mut self) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            self.params.set_frozen(id, false);
        }
    }

    fn lin(&self, tape: &mut Tape<F>, x: Var, ids: LinearIds) -> Result<Var> {
        let w = tape.param(&self.params, ids.weight);
        let b = tape.param(&self.params, ids.bias);
        tape.linear(x, w, b)
    }

    fn norm(&self, tape: &mut Tape<F>, x: Var, ids: NormIds) -> Result<Var> {
        let g = tape.param(&self.params, ids.gamma);
        let b = tape.param(&self.params, ids.beta);
        tape.layer_norm(x, g, b, F::from_f64(LN_EPS))
    }

    /// Patchify → linear embed → prepend Class token → add positional
    /// embedding. Layout is `[CLS, PATCH×L]`.
    pub fn build_input(&self, tape: &mut Tape<F>, images: Images<'_>) -> Result<SequenceState> {
        let c = &self.config;
        let expected = [images.batch, c.channels, c.image_side, c.image_side];
        let got = [images.batch, images.channels, images.height, images.width];
        if expected != got || images.data.len() != got.iter().product::<usize>() || images.batch == 0 {
            return Err(Error::dim("build_input", &got, &expected));
        }
        let l = c.num_patches();
        let patches = patchify::<F>(images, c.patch_side);
        let x = tape.constant([images.batch, l, c.patch_dim()], patches)?;
        let emb = self.lin(tape, x, self.ids.patch)?;
        let cls = tape.param(&self.params, self.ids.cls);
        let cls = tape.tile(cls, images.batch)?;
        let seq = tape.concat_seq(&[cls, emb])?;
        let pos = tape.param(&self.params, self.ids.pos);
        let tokens = tape.add_broadcast(seq, pos)?;
        let mut layout = vec![TokenRole::Patch; l + 1];
        layout[0] = TokenRole::Cls;
        Ok(SequenceState {
            tokens,
            batch: images.batch,
            layout,
        })
    }

    fn ssf(&self, tape: &mut Tape<F>, x: Var, layer: Option<usize>, point: SsfPoint) -> Result<Var> {
        match self.peft.ssf_ids(layer, point) {
            Some((scale, shift)) => {
                let s = tape.param(&self.params, scale);
                let b = tape.param(&self.params, shift);
                let y = tape.mul_broadcast(x, s)?;
                tape.add_broadcast(y, b)
            }
            None => Ok(x),
        }
    }

    /// One pre-norm layer: `X' = MHSA(LN(X)) + X`, `X_out = FFN(LN(X')) + X'`,
    /// with PEFT hooks at their attachment points. Returns the new state and
    /// the attention node.
    pub fn encoder_layer(
        &self,
        tape: &mut Tape<F>,
        state: &SequenceState,
        layer: usize,
    ) -> Result<(SequenceState, Var)> {
        let p = self
            .ids
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))?
            .clone();
        let at = Some(layer);
        let x = state.tokens;
        let h = self.norm(tape, x, p.ln1)?;
        let h = self.ssf(tape, h, at, SsfPoint::Ln1)?;
        let q = self.lin(tape, h, p.q)?;
        let q = self.ssf(tape, q, at, SsfPoint::Q)?;
        let k = self.lin(tape, h, p.k)?;
        let k = self.ssf(tape, k, at, SsfPoint::K)?;
        let v = self.lin(tape, h, p.v)?;
        let v = self.ssf(tape, v, at, SsfPoint::V)?;
        let attn = tape.attention(q, k, v, self.config.num_heads)?;
        let o = self.lin(tape, attn, p.o)?;
        let o = self.ssf(tape, o, at, SsfPoint::O)?;
        let x1 = tape.add(x, o)?;

        let h2 = self.norm(tape, x1, p.ln2)?;
        let h2 = self.ssf(tape, h2, at, SsfPoint::Ln2)?;
        let f = self.lin(tape, h2, p.fc1)?;
        let f = tape.gelu(f)?;
        let f = self.lin(tape, f, p.fc2)?;
        let mut f = self.ssf(tape, f, at, SsfPoint::Fc2)?;
        if let Some(adapter) = self.peft.adapter(layer) {
            let down = self.lin(tape, h2, adapter.down)?;
            let act = tape.gelu(down)?;
            let up = self.lin(tape, act, adapter.up)?;
            let branch = tape.scale(up, F::from_f64(self.peft.adapter_scale()))?;
            f = tape.add(f, branch)?;
        }
        let out = tape.add(x1, f)?;
        Ok((
            SequenceState {
                tokens: out,
                batch: state.batch,
                layout: state.layout.clone(),
            },
            attn,
        ))
    }

    /// Final LayerNorm and the shared head on the requested token(s).
    /// Multi-token roles are mean-pooled after normalization.
    pub fn classify(&self, tape: &mut Tape<F>, state: &SequenceState, readout: Readout) -> Result<Var> {
        let (start, len) = state
            .span(readout.role())
            .ok_or_else(|| Error::Layout(format!("no {:?} token in the sequence", readout.role())))?;
        let picked = tape.slice_seq(state.tokens, start, len)?;
        let normed = self.norm(tape, picked, self.ids.norm)?;
        let feat = tape.mean_tokens(normed, 0, len)?;
        let feat = self.ssf(tape, feat, None, SsfPoint::HeadInput)?;
        self.lin(tape, feat, self.ids.head)
    }

    /// Full forward: input construction, prompt insertion, optional Gist
    /// injection and all encoder layers.
    pub fn forward(&self, tape: &mut Tape<F>, images: Images<'_>, with_gist: bool) -> Result<Forward> {
        let mut state = self.build_input(tape, images)?;
        if self.peft.prompt().is_some() {
            state = crate::peft::insert_prompts(self, tape, &state)?;
        }
        if with_gist {
            let id = self
                .gist_id()
                .ok_or_else(|| Error::Layout("no Gist token attached to the model".into()))?;
            let token = tape.param(&self.params, id);
            state = crate::gist::inject_gist(tape, &state, token)?;
        }
        state.validate()?;
        let mut attention = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let (next, attn) = self.encoder_layer(tape, &state, l)?;
            state = next;
            attention.push(attn);
        }
        Ok(Forward { state, attention })
    }

    /// CLS logits for a batch, evaluated on a throwaway tape.
    pub fn cls_logits(&self, images: Images<'_>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, self.gist.is_some())?;
        let logits = self.classify(&mut tape, &out.state, Readout::Cls)?;
        Ok(tape.to_tensor(logits))
    }

    pub fn cast<G: Scalar>(&self) -> Vit<G> {
        Vit {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            peft: self.peft.clone(),
            gist: self.gist,
            pretrain_seed: self.pretrain_seed,
        }
    }
}

/// `[B×C×H×W]` → `[B × L × C·p·p]`, patches in row-major order, features
/// ordered (channel, dy, dx).
pub fn patchify<F: Scalar>(images: Images<'_>, patch: usize) -> Vec<F> {
    let (c, h, w) = (images.channels, images.height, images.width);
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(images.data.len());
    for b in 0..images.batch {
        let img = &images.data[b * c * h * w..(b + 1) * c * h * w];
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    for dy in 0..patch {
                        let row = (ch * h + py * patch + dy) * w + px * patch;
                        out.extend(img[row..row + patch].iter().map(|&v| F::from_f64(v as f64)));
                    }
                }
            }
        }
    }
    out
}
