//! 64-bit finite-difference suite over every differentiable op and the
//! full fine-tuning loss.

use std::time::Instant;

use gist_core::gist::{self, GistLossConfig, LossInputs};
use gist_core::peft::PeftSpec;
use gist_core::tensor::{finite_diff_check, finite_diff_check_params, ParamStore, Tape, Tensor, Var};
use gist_core::trainer::prepare_finetune;
use gist_core::vit::{BackboneConfig, Images, Readout, Vit, LN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

pub const STEP: f64 = 1e-4;
pub const THRESHOLD: f64 = 1e-4;

/// Deliberate bugs used to show the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Adds 0.5 to every cross-entropy input gradient while leaving the
    /// forward value untouched.
    CrossEntropyBackward,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRow {
    pub op: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub threshold: f64,
    pub rows: Vec<CheckRow>,
    pub passed: bool,
    pub elapsed_secs: f64,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<22} {:>14} {:>8}  result\n", "op", "max rel err", "coords");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>14.3e} {:>8}  {}\n",
                r.op,
                r.max_rel_error,
                r.coordinates,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "{} ops, threshold {:.0e}, h {:.0e}, {:.1}s: {}\n",
            self.rows.len(),
            self.threshold,
            self.step,
            self.elapsed_secs,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> gist_core::Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], grad: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("shape matches data")
        .with_requires_grad(grad)
}

/// Scalar probe `Σ w ⊙ y` with fixed pseudo-random weights, so every
/// output coordinate reaches the gradient with a distinct sensitivity.
fn probe(tape: &mut Tape<f64>, y: Var) -> gist_core::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 23) as f64 / 23.0).collect();
    let w = tape.constant(shape, w)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn op_cases(fault: Option<Fault>) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    let mut r = |shape: &[usize]| random(&mut rng, shape, true);
    let labels = [2usize, 0, 3];
    let mut cases: Vec<Case> = vec![
        Case {
            name: "matmul",
            inputs: vec![r(&[2, 3, 4]), r(&[4, 5])],
            f: Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y)
            }),
        },
        Case {
            name: "linear",
            inputs: vec![r(&[3, 4]), r(&[4, 2]), r(&[2])],
            f: Box::new(|t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                probe(t, y)
            }),
        },
        Case {
            name: "add_broadcast",
            inputs: vec![r(&[2, 3, 4]), r(&[4])],
            f: Box::new(|t, v| {
                let y = t.add_broadcast(v[0], v[1])?;
                probe(t, y)
            }),
        },
        Case {
            name: "mul_broadcast",
            inputs: vec![r(&[2, 3, 4]), r(&[3, 4])],
            f: Box::new(|t, v| {
                let y = t.mul_broadcast(v[0], v[1])?;
                probe(t, y)
            }),
        },
        Case {
            name: "add",
            inputs: vec![r(&[3, 4]), r(&[3, 4])],
            f: Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                probe(t, y)
            }),
        },
        Case {
            name: "sub",
            inputs: vec![r(&[3, 4]), r(&[3, 4])],
            f: Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                probe(t, y)
            }),
        },
        Case {
            name: "mul",
            inputs: vec![r(&[3, 4]), r(&[3, 4])],
            f: Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                probe(t, y)
            }),
        },
        Case {
            name: "scale",
            inputs: vec![r(&[3, 4])],
            f: Box::new(|t, v| {
                let y = t.scale(v[0], -1.7)?;
                probe(t, y)
            }),
        },
        Case {
            name: "gelu",
            inputs: vec![random_scaled(&[4, 5], 3.0, 1)],
            f: Box::new(|t, v| {
                let y = t.gelu(v[0])?;
                probe(t, y)
            }),
        },
        Case {
            name: "layer_norm",
            inputs: vec![r(&[2, 3, 6]), r(&[6]), r(&[6])],
            f: Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], LN_EPS)?;
                probe(t, y)
            }),
        },
        Case {
            name: "softmax_t",
            inputs: vec![random_scaled(&[3, 5], 2.0, 2)],
            f: Box::new(|t, v| {
                let y = t.softmax_t(v[0], 3.0)?;
                probe(t, y)
            }),
        },
        Case {
            name: "attention",
            inputs: vec![r(&[2, 4, 6]), r(&[2, 4, 6]), r(&[2, 4, 6])],
            f: Box::new(|t, v| {
                let y = t.attention(v[0], v[1], v[2], 2)?;
                probe(t, y)
            }),
        },
        Case {
            name: "tile",
            inputs: vec![r(&[2, 3])],
            f: Box::new(|t, v| {
                let y = t.tile(v[0], 3)?;
                probe(t, y)
            }),
        },
        Case {
            name: "concat_seq",
            inputs: vec![r(&[2, 1, 3]), r(&[2, 4, 3]), r(&[2, 2, 3])],
            f: Box::new(|t, v| {
                let y = t.concat_seq(v)?;
                probe(t, y)
            }),
        },
        Case {
            name: "slice_seq",
            inputs: vec![r(&[2, 5, 3])],
            f: Box::new(|t, v| {
                let y = t.slice_seq(v[0], 1, 3)?;
                probe(t, y)
            }),
        },
        Case {
            name: "mean_tokens",
            inputs: vec![r(&[2, 5, 3])],
            f: Box::new(|t, v| {
                let y = t.mean_tokens(v[0], 2, 3)?;
                probe(t, y)
            }),
        },
        Case {
            name: "reshape",
            inputs: vec![r(&[2, 6])],
            f: Box::new(|t, v| {
                let y = t.reshape(v[0], vec![3, 4])?;
                probe(t, y)
            }),
        },
        Case {
            name: "sum",
            inputs: vec![r(&[3, 4])],
            f: Box::new(|t, v| {
                let y = t.sum(v[0])?;
                probe(t, y)
            }),
        },
        Case {
            name: "mean",
            inputs: vec![r(&[3, 4])],
            f: Box::new(|t, v| {
                let y = t.mean(v[0])?;
                probe(t, y)
            }),
        },
        Case {
            name: "cross_entropy",
            inputs: vec![random_scaled(&[3, 4], 2.0, 3)],
            f: match fault {
                None => Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
                Some(Fault::CrossEntropyBackward) => Box::new(move |t, v| {
                    let ce = t.cross_entropy(v[0], &labels)?;
                    // s − stop_grad(s) is zero forward, one backward.
                    let s = t.sum(v[0])?;
                    let frozen = t.constant(vec![1], t.value(s).to_vec())?;
                    let zero = t.sub(s, frozen)?;
                    let bump = t.scale(zero, 0.5)?;
                    t.add(ce, bump)
                }),
            },
        },
        Case {
            name: "kl_divergence",
            inputs: vec![random_scaled(&[3, 4], 2.0, 4), random_scaled(&[3, 4], 2.0, 5)],
            f: Box::new(|t, v| t.kl_divergence(v[0], v[1], 3.0)),
        },
        Case {
            name: "mse",
            inputs: vec![r(&[3, 4]), r(&[3, 4])],
            f: Box::new(|t, v| t.mse(v[0], v[1])),
        },
        Case {
            name: "cosine_loss",
            inputs: vec![r(&[3, 4]), r(&[3, 4])],
            f: Box::new(|t, v| t.cosine_loss(v[0], v[1])),
        },
    ];
    cases.push(Case {
        name: "bkld",
        inputs: vec![random_scaled(&[3, 5], 2.0, 6), random_scaled(&[3, 5], 2.0, 7)],
        f: Box::new(|t, v| Ok(gist::bkld(t, v[0], v[1], 3.0)?.bkl)),
    });
    cases
}

fn random_scaled(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = random(&mut rng, shape, true);
    t.data_mut().iter_mut().for_each(|x| *x *= scale);
    t
}

/// Model used for the whole-loss checks: 8×8 single-channel images,
/// patch 4, D = 16, two layers.
pub fn check_model_config() -> BackboneConfig {
    BackboneConfig {
        image_side: 8,
        patch_side: 4,
        channels: 1,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_hidden: 32,
        num_classes: 3,
    }
}

struct LossCase {
    name: &'static str,
    peft: Vec<PeftSpec>,
    loss: GistLossConfig,
}

fn loss_cases() -> Vec<LossCase> {
    let with_aux = GistLossConfig {
        aux_vpt_loss: true,
        ..GistLossConfig::default()
    };
    vec![
        LossCase {
            name: "full_loss",
            peft: vec![PeftSpec::adapter()],
            loss: GistLossConfig::default(),
        },
        LossCase {
            name: "full_loss_prompt_ssf",
            peft: vec![PeftSpec::prompt(), PeftSpec::scale_shift()],
            loss: with_aux,
        },
    ]
}

fn check_loss(case: &LossCase, h: f64) -> CliResult<gist_core::tensor::GradCheckReport> {
    let cfg = check_model_config();
    let mut model = Vit::<f64>::new(cfg.clone(), 11)?;
    prepare_finetune(&mut model, cfg.num_classes, &case.peft, &case.loss, 12)?;
    // Every parameter, frozen or not, gets checked.
    model.unfreeze_all();
    // Nonzero adapter up-projections and prompts so every branch carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let t = model.params_mut().get_mut(id);
        for x in t.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let batch = 3;
    let pixels: Vec<f32> = (0..batch * cfg.image_side * cfg.image_side)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let labels = [0usize, 2, 1];
    let loss_cfg = case.loss.clone();
    let base = model.clone();
    let f = move |store: &ParamStore<f64>, tape: &mut Tape<f64>| -> gist_core::Result<Var> {
        let mut m = base.clone();
        *m.params_mut() = store.clone();
        let images = Images {
            data: &pixels,
            batch,
            channels: 1,
            height: 8,
            width: 8,
        };
        let fwd = m.forward(tape, images, true)?;
        let s_cls = m.classify(tape, &fwd.state, Readout::Cls)?;
        let s_gist = m.classify(tape, &fwd.state, Readout::Gist)?;
        let s_vpt = if loss_cfg.aux_vpt_loss {
            Some(m.classify(tape, &fwd.state, Readout::PromptPool)?)
        } else {
            None
        };
        let inputs = LossInputs {
            s_cls,
            s_gist: Some(s_gist),
            s_vpt,
            labels: &labels,
        };
        Ok(gist::overall_loss(tape, &inputs, &loss_cfg)?.0)
    };
    Ok(finite_diff_check_params(model.params(), f, h)?)
}

/// Runs every case once; `fault` swaps in a known-bad implementation.
pub fn run_suite(fault: Option<Fault>) -> CliResult<GradcheckReport> {
    let started = Instant::now();
    let mut rows = Vec::new();
    let row = |op: &str, report: gist_core::tensor::GradCheckReport| CheckRow {
        op: op.to_string(),
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
        passed: report.max_rel_error < THRESHOLD,
    };
    for case in op_cases(fault) {
        let report = finite_diff_check(&case.f, &case.inputs, STEP)?;
        rows.push(row(case.name, report));
    }
    for case in loss_cases() {
        rows.push(row(case.name, check_loss(&case, STEP)?));
    }
    let passed = rows.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        step: STEP,
        threshold: THRESHOLD,
        rows,
        passed,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}
