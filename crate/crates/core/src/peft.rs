//! Parameter-efficient fine-tuning attachments: parallel Adapter, shallow
//! prompt tokens and scale-shift feature modulation.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor};
use crate::vit::{LinearIds, SequenceState, TokenRole, Vit, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PeftKind {
    Adapter,
    Prompt,
    ScaleShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attach {
    PerLayer,
    FirstLayerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftSpec {
    pub kind: PeftKind,
    pub adapter_hidden: usize,
    pub adapter_scale: f64,
    pub prompt_len: usize,
    pub attach: Attach,
}

impl PeftSpec {
    /// Bottleneck 4, scale 0.1, on every layer.
    pub fn adapter() -> Self {
        Self {
            kind: PeftKind::Adapter,
            adapter_hidden: 4,
            adapter_scale: 0.1,
            prompt_len: 20,
            attach: Attach::PerLayer,
        }
    }

    /// 20 shallow prompt tokens.
    pub fn prompt() -> Self {
        Self {
            kind: PeftKind::Prompt,
            attach: Attach::FirstLayerOnly,
            ..Self::adapter()
        }
    }

    pub fn scale_shift() -> Self {
        Self {
            kind: PeftKind::ScaleShift,
            ..Self::adapter()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PeftKind::Adapter if self.adapter_hidden == 0 => {
                Err(Error::Config("adapter_hidden must be at least 1".into()))
            }
            PeftKind::Prompt if self.prompt_len == 0 => Err(Error::Config("prompt_len must be at least 1".into())),
            PeftKind::Prompt if self.attach != Attach::FirstLayerOnly => Err(Error::Config(
                "prompt tokens are shallow: attach must be first_layer_only".into(),
            )),
            _ if !self.adapter_scale.is_finite() => Err(Error::Config("adapter_scale must be finite".into())),
            _ => Ok(()),
        }
    }

    fn layers(&self, num_layers: usize) -> std::ops::Range<usize> {
        match self.attach {
            Attach::PerLayer => 0..num_layers,
            Attach::FirstLayerOnly => 0..num_layers.min(1),
        }
    }
}

/// Insertion points for scale-shift modulation. All are `D`-wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SsfPoint {
    Ln1,
    Q,
    K,
    V,
    O,
    Ln2,
    Fc2,
    /// Token features entering the classification head.
    HeadInput,
}

impl SsfPoint {
    pub const PER_LAYER: [SsfPoint; 7] = [
        SsfPoint::Ln1,
        SsfPoint::Q,
        SsfPoint::K,
        SsfPoint::V,
        SsfPoint::O,
        SsfPoint::Ln2,
        SsfPoint::Fc2,
    ];

    fn tag(self) -> &'static str {
        match self {
            SsfPoint::Ln1 => "ln1",
            SsfPoint::Q => "q",
            SsfPoint::K => "k",
            SsfPoint::V => "v",
            SsfPoint::O => "o",
            SsfPoint::Ln2 => "ln2",
            SsfPoint::Fc2 => "fc2",
            SsfPoint::HeadInput => "head_input",
        }
    }

    fn param_prefix(self, layer: Option<usize>) -> String {
        match layer {
            Some(l) => format!("ssf.{l}.{}", self.tag()),
            None => format!("ssf.{}", self.tag()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AdapterIds {
    pub down: LinearIds,
    pub up: LinearIds,
}

/// PEFT modules attached to a model.
#[derive(Debug, Clone, Default)]
pub struct PeftState {
    specs: Vec<PeftSpec>,
    adapters: Vec<Option<AdapterIds>>,
    adapter_scale: f64,
    prompt: Option<(ParamId, usize)>,
    ssf: HashMap<(Option<usize>, SsfPoint), (ParamId, ParamId)>,
}

impl PeftState {
    pub fn specs(&self) -> &[PeftSpec] {
        &self.specs
    }

    pub(crate) fn adapter(&self, layer: usize) -> Option<AdapterIds> {
        self.adapters.get(layer).copied().flatten()
    }

    pub(crate) fn adapter_scale(&self) -> f64 {
        self.adapter_scale
    }

    pub fn prompt(&self) -> Option<(ParamId, usize)> {
        self.prompt
    }

    pub(crate) fn ssf_ids(&self, layer: Option<usize>, point: SsfPoint) -> Option<(ParamId, ParamId)> {
        self.ssf.get(&(layer, point)).copied()
    }

    fn has(&self, kind: PeftKind) -> bool {
        self.specs.iter().any(|s| s.kind == kind)
    }

    /// Re-links attachments recorded in a checkpoint to loaded parameters.
    pub(crate) fn restore<F: Scalar>(specs: &[PeftSpec], store: &ParamStore<F>, num_layers: usize) -> Result<Self> {
        let find = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks PEFT parameter `{name}`")))
        };
        let lin = |name: String| -> Result<LinearIds> {
            Ok(LinearIds {
                weight: find(format!("{name}.weight"))?,
                bias: find(format!("{name}.bias"))?,
            })
        };
        let mut state = PeftState::default();
        for spec in specs {
            spec.validate()?;
            match spec.kind {
                PeftKind::Adapter => {
                    state.adapters = vec![None; num_layers];
                    state.adapter_scale = spec.adapter_scale;
                    for l in spec.layers(num_layers) {
                        state.adapters[l] = Some(AdapterIds {
                            down: lin(format!("adapter.{l}.down"))?,
                            up: lin(format!("adapter.{l}.up"))?,
                        });
                    }
                }
                PeftKind::Prompt => {
                    let id = find("prompt.tokens".into())?;
                    state.prompt = Some((id, store.get(id).shape()[0]));
                }
                PeftKind::ScaleShift => {
                    for (layer, point) in ssf_points(spec, num_layers) {
                        let prefix = point.param_prefix(layer);
                        let ids = (find(format!("{prefix}.scale"))?, find(format!("{prefix}.shift"))?);
                        state.ssf.insert((layer, point), ids);
                    }
                }
            }
            state.specs.push(spec.clone());
        }
        Ok(state)
    }
}

fn ssf_points(spec: &PeftSpec, num_layers: usize) -> Vec<(Option<usize>, SsfPoint)> {
    let mut points: Vec<_> = spec
        .layers(num_layers)
        .flat_map(|l| SsfPoint::PER_LAYER.iter().map(move |&p| (Some(l), p)))
        .collect();
    points.push((None, SsfPoint::HeadInput));
    points
}

/// Trainable tensors created by one attachment.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftParams {
    pub ids: Vec<ParamId>,
    pub names: Vec<String>,
    pub scalars: usize,
}

fn begin<F: Scalar>(model: &Vit<F>, spec: &PeftSpec, expected: PeftKind) -> Result<()> {
    if spec.kind != expected {
        return Err(Error::Config(format!(
            "expected a {expected:?} spec, got {:?}",
            spec.kind
        )));
    }
    spec.validate()?;
    if model.peft.has(expected) {
        return Err(Error::Config(format!("{expected:?} is already attached")));
    }
    Ok(())
}

fn insert<F: Scalar>(model: &mut Vit<F>, out: &mut PeftParams, name: String, t: Tensor<F>) -> Result<ParamId> {
    out.scalars += t.numel();
    let id = model.params_mut().insert(name.clone(), t, ParamGroup::Peft)?;
    out.ids.push(id);
    out.names.push(name);
    Ok(id)
}

fn empty() -> PeftParams {
    PeftParams {
        ids: Vec::new(),
        names: Vec::new(),
        scalars: 0,
    }
}

/// Parallel bottleneck `down[D×d] → GELU → up[d×D]` beside every FFN
/// sub-block, reading the FFN's LayerNorm output; its output times `s` joins
/// the FFN residual sum. Up-projection starts at zero.
pub fn attach_adapter<F: Scalar, R: Rng + ?Sized>(
    model: &mut Vit<F>,
    spec: &PeftSpec,
    rng: &mut R,
) -> Result<PeftParams> {
    begin(model, spec, PeftKind::Adapter)?;
    let d = model.config().embed_dim;
    let hidden = spec.adapter_hidden;
    let num_layers = model.config().num_layers;
    let mut out = empty();
    let mut adapters = vec![None; num_layers];
    for l in spec.layers(num_layers) {
        let down_w = insert(
            model,
            &mut out,
            format!("adapter.{l}.down.weight"),
            rng::trunc_normal_tensor(rng, &[d, hidden], INIT_STD),
        )?;
        let down_b = insert(
            model,
            &mut out,
            format!("adapter.{l}.down.bias"),
            Tensor::zeros([hidden]),
        )?;
        let up_w = insert(
            model,
            &mut out,
            format!("adapter.{l}.up.weight"),
            Tensor::zeros([hidden, d]),
        )?;
        let up_b = insert(model, &mut out, format!("adapter.{l}.up.bias"), Tensor::zeros([d]))?;
        adapters[l] = Some(AdapterIds {
            down: LinearIds {
                weight: down_w,
                bias: down_b,
            },
            up: LinearIds {
                weight: up_w,
                bias: up_b,
            },
        });
    }
    model.peft.adapters = adapters;
    model.peft.adapter_scale = spec.adapter_scale;
    model.peft.specs.push(spec.clone());
    Ok(out)
}

/// Shallow prompt tokens inserted right after the Class token at the first
/// layer's input, without positional embedding.
pub fn attach_prompt<F: Scalar, R: Rng + ?Sized>(
    model: &mut Vit<F>,
    spec: &PeftSpec,
    rng: &mut R,
) -> Result<PeftParams> {
    begin(model, spec, PeftKind::Prompt)?;
    let d = model.config().embed_dim;
    let mut out = empty();
    let id = insert(
        model,
        &mut out,
        "prompt.tokens".into(),
        rng::trunc_normal_tensor(rng, &[spec.prompt_len, d], INIT_STD),
    )?;
    model.peft.prompt = Some((id, spec.prompt_len));
    model.peft.specs.push(spec.clone());
    Ok(out)
}

/// `y = γ⊙x + β` after every LayerNorm and every `D`-wide projection of
/// each covered layer, plus on the head input. γ starts at 1, β at 0.
pub fn attach_scale_shift<F: Scalar>(model: &mut Vit<F>, spec: &PeftSpec) -> Result<PeftParams> {
    begin(model, spec, PeftKind::ScaleShift)?;
    let d = model.config().embed_dim;
    let mut out = empty();
    for (layer, point) in ssf_points(spec, model.config().num_layers) {
        let prefix = point.param_prefix(layer);
        let scale = insert(
            model,
            &mut out,
            format!("{prefix}.scale"),
            Tensor::filled([d], F::one()),
        )?;
        let shift = insert(model, &mut out, format!("{prefix}.shift"), Tensor::zeros([d]))?;
        model.peft.ssf.insert((layer, point), (scale, shift));
    }
    model.peft.specs.push(spec.clone());
    Ok(out)
}

/// Dispatches on `spec.kind`.
pub fn attach<F: Scalar, R: Rng + ?Sized>(model: &mut Vit<F>, spec: &PeftSpec, rng: &mut R) -> Result<PeftParams> {
    match spec.kind {
        PeftKind::Adapter => attach_adapter(model, spec, rng),
        PeftKind::Prompt => attach_prompt(model, spec, rng),
        PeftKind::ScaleShift => attach_scale_shift(model, spec),
    }
}

/// `[CLS, PATCH…]` → `[CLS, PROMPT×P, PATCH…]`.
pub(crate) fn insert_prompts<F: Scalar>(
    model: &Vit<F>,
    tape: &mut Tape<F>,
    state: &SequenceState,
) -> Result<SequenceState> {
    let (id, len) = model
        .peft
        .prompt
        .ok_or_else(|| Error::Layout("no prompt tokens attached".into()))?;
    if state.layout.first() != Some(&TokenRole::Cls) || state.layout.contains(&TokenRole::Prompt) {
        return Err(Error::Layout("prompts go right after a leading CLS, once".into()));
    }
    let rest = state.seq_len() - 1;
    let cls = tape.slice_seq(state.tokens, 0, 1)?;
    let tail = tape.slice_seq(state.tokens, 1, rest)?;
    let prompts = tape.param(model.params(), id);
    let prompts = tape.tile(prompts, state.batch)?;
    let tokens = tape.concat_seq(&[cls, prompts, tail])?;
    let mut layout = Vec::with_capacity(state.seq_len() + len);
    layout.push(TokenRole::Cls);
    layout.extend(std::iter::repeat_n(TokenRole::Prompt, len));
    layout.extend_from_slice(&state.layout[1..]);
    Ok(SequenceState {
        tokens,
        batch: state.batch,
        layout,
    })
}

/// Trainable scalar counts of a model after attachment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableCount {
    pub with_head: usize,
    pub without_head: usize,
    pub head: usize,
    pub peft: usize,
    pub gist: usize,
}

pub fn trainable_parameter_count<F: Scalar>(model: &Vit<F>) -> TrainableCount {
    let p = model.params();
    let head = p.trainable_count_in(ParamGroup::Head);
    let with_head = p.trainable_count();
    TrainableCount {
        with_head,
        without_head: with_head - head,
        head,
        peft: p.trainable_count_in(ParamGroup::Peft),
        gist: p.trainable_count_in(ParamGroup::Gist),
    }
}
