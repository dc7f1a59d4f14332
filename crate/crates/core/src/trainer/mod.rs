//! Deterministic pretraining and fine-tuning loops.
//!
//! Data order comes from a Fisher–Yates shuffle drawn from the ChaCha
//! stream `(seed, epoch)`. There is no gradient clipping and no early
//! stopping: a non-finite loss aborts the run, and the final-epoch model is
//! the one reported.

mod optim;

pub use optim::{adamw_step, lr_at, AdamState, OptimSpec};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::gist::{self, argmax_rows, GistLossConfig, LossBreakdown, LossInputs};
use crate::peft::{self, PeftSpec};
use crate::rng::{self, Stream};
use crate::tensor::{ParamStore, Scalar, Tape};
use crate::vit::{Images, Readout, Vit};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// CLS accuracy on this step's batch, before the update.
    pub batch_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub test_acc: f64,
    pub elapsed_secs: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    Test {
        seed: u64,
        config_hash: &'a str,
        test_acc: f64,
    },
}

impl TrainRecord {
    /// Metrics stream: one JSON object per line, each epoch's steps
    /// followed by its epoch summary and a final test line. Wall time is
    /// left out so identical runs give identical bytes.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: MetricLine<'_>| {
            out.push_str(&serde_json::to_string(&line).expect("metrics serialize"));
            out.push('\n');
        };
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch == e.epoch) {
                push(MetricLine::Step(s));
            }
            push(MetricLine::Epoch(e));
        }
        for s in steps {
            push(MetricLine::Step(s));
        }
        push(MetricLine::Test {
            seed: self.seed,
            config_hash: &self.config_hash,
            test_acc: self.test_acc,
        });
        out
    }

    /// Equality ignoring wall time.
    pub fn same_metrics(&self, other: &TrainRecord) -> bool {
        self.metrics_jsonl() == other.metrics_jsonl()
    }
}

/// What one step exposes to an observer: gradients are populated in
/// `params`, the update has not been applied yet.
pub struct StepView<'a, F> {
    pub step: usize,
    pub lr: f64,
    pub loss: &'a LossBreakdown,
    pub params: &'a ParamStore<F>,
}

#[derive(Debug, Clone, Copy)]
enum Objective<'a> {
    Traditional { aux_vpt_loss: bool },
    Gist(&'a GistLossConfig),
}

/// Fraction of correct CLS predictions.
pub fn evaluate<F: Scalar>(model: &Vit<F>, data: &Dataset) -> Result<f64> {
    let preds = predictions(model, data)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// CLS-based predictions for every sample, in order.
pub fn predictions<F: Scalar>(model: &Vit<F>, data: &Dataset) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let m = data.image_len();
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let images = Images {
            data: &data.images[start * m..end * m],
            batch: end - start,
            channels: data.channels,
            height: data.side,
            width: data.side,
        };
        out.extend(gist::predict(model, images)?);
    }
    Ok(out)
}

/// Readies a pretrained model for a downstream task: fresh head, PEFT
/// attachments, the Gist token when enabled, backbone frozen.
pub fn prepare_finetune<F: Scalar>(
    model: &mut Vit<F>,
    num_classes: usize,
    peft_specs: &[PeftSpec],
    gist_cfg: &GistLossConfig,
    seed: u64,
) -> Result<()> {
    gist_cfg.validate()?;
    model.reset_head(num_classes, seed)?;
    let mut rng = rng::stream(seed, Stream::PeftInit);
    for spec in peft_specs {
        peft::attach(model, spec, &mut rng)?;
    }
    if gist_cfg.enabled {
        gist::attach_gist_token(model, gist_cfg.gist_len, seed)?;
    }
    model.set_finetune_freeze();
    Ok(())
}

/// Supervised training of every parameter on the source task.
pub fn pretrain<F: Scalar>(
    model: &mut Vit<F>,
    data: &Splits,
    optim: &OptimSpec,
    seed: u64,
    config_hash: &str,
) -> Result<TrainRecord> {
    model.unfreeze_all();
    let record = run(
        model,
        Objective::Traditional { aux_vpt_loss: false },
        data,
        optim,
        seed,
        config_hash,
        &mut |_| {},
    )?;
    model.set_pretrain_seed(Some(seed));
    Ok(record)
}

/// Fine-tunes a prepared model. With `gist_cfg.enabled == false` the run
/// is the traditional framework and touches no Gist code path.
pub fn finetune<F: Scalar>(
    model: &mut Vit<F>,
    gist_cfg: &GistLossConfig,
    data: &Splits,
    optim: &OptimSpec,
    seed: u64,
    config_hash: &str,
) -> Result<TrainRecord> {
    finetune_observed(model, gist_cfg, data, optim, seed, config_hash, &mut |_| {})
}

/// [`finetune`] with a hook called after every backward pass.
pub fn finetune_observed<F: Scalar>(
    model: &mut Vit<F>,
    gist_cfg: &GistLossConfig,
    data: &Splits,
    optim: &OptimSpec,
    seed: u64,
    config_hash: &str,
    observer: &mut dyn FnMut(&StepView<'_, F>),
) -> Result<TrainRecord> {
    gist_cfg.validate()?;
    if gist_cfg.enabled != model.gist_len().is_some() {
        return Err(Error::Config(
            "Gist token attachment does not match gist.enabled; call prepare_finetune".into(),
        ));
    }
    if let (true, Some(len)) = (gist_cfg.enabled, model.gist_len()) {
        if len != gist_cfg.gist_len {
            return Err(Error::Config(format!(
                "model carries {len} Gist tokens, config asks for {}",
                gist_cfg.gist_len
            )));
        }
    }
    let objective = if gist_cfg.enabled {
        Objective::Gist(gist_cfg)
    } else {
        Objective::Traditional {
            aux_vpt_loss: gist_cfg.aux_vpt_loss,
        }
    };
    run(model, objective, data, optim, seed, config_hash, observer)
}

fn run<F: Scalar>(
    model: &mut Vit<F>,
    objective: Objective<'_>,
    data: &Splits,
    optim: &OptimSpec,
    seed: u64,
    config_hash: &str,
    observer: &mut dyn FnMut(&StepView<'_, F>),
) -> Result<TrainRecord> {
    optim.validate()?;
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    if train.num_classes != model.config().num_classes {
        return Err(Error::Config(format!(
            "task has {} classes, head has {}",
            train.num_classes,
            model.config().num_classes
        )));
    }
    let started = Instant::now();
    let bs = optim.batch_size;
    let steps_per_epoch = train.len().div_ceil(bs);
    let mut state = AdamState::new();
    let mut steps = Vec::with_capacity(steps_per_epoch * optim.total_epochs);
    let mut epochs = Vec::with_capacity(optim.total_epochs);
    let k = model.config().num_classes;
    let mut step = 0;
    for epoch in 0..optim.total_epochs {
        let order = rng::epoch_permutation(seed, epoch as u64, train.len());
        let mut correct = 0usize;
        for batch in order.chunks(bs) {
            let (px, labels) = train.gather(batch);
            let images = Images {
                data: &px,
                batch: batch.len(),
                channels: train.channels,
                height: train.side,
                width: train.side,
            };
            let mut tape = Tape::new();
            let with_gist = matches!(objective, Objective::Gist(_));
            let fwd = model.forward(&mut tape, images, with_gist)?;
            let s_cls = model.classify(&mut tape, &fwd.state, Readout::Cls)?;
            let aux = match objective {
                Objective::Traditional { aux_vpt_loss } => aux_vpt_loss,
                Objective::Gist(cfg) => cfg.aux_vpt_loss,
            };
            let s_vpt = if aux {
                Some(model.classify(&mut tape, &fwd.state, Readout::PromptPool)?)
            } else {
                None
            };
            let computed = match objective {
                Objective::Traditional { aux_vpt_loss } => {
                    let inputs = LossInputs {
                        s_cls,
                        s_gist: None,
                        s_vpt,
                        labels: &labels,
                    };
                    gist::traditional_loss(&mut tape, &inputs, aux_vpt_loss)
                }
                Objective::Gist(cfg) => {
                    let s_gist = model.classify(&mut tape, &fwd.state, Readout::Gist)?;
                    let inputs = LossInputs {
                        s_cls,
                        s_gist: Some(s_gist),
                        s_vpt,
                        labels: &labels,
                    };
                    gist::overall_loss(&mut tape, &inputs, cfg)
                }
            };
            let (loss, breakdown) = match computed {
                Err(Error::Numeric(message)) => return Err(Error::Diverged { step, message }),
                other => other?,
            };
            if !breakdown.l_all.is_finite() {
                return Err(Error::Diverged {
                    step,
                    message: format!("loss is {} ({breakdown:?})", breakdown.l_all),
                });
            }
            let preds = argmax_rows(tape.value(s_cls), k);
            let hits = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            correct += hits;

            let lr = lr_at(step, optim, steps_per_epoch);
            let params = model.params_mut();
            params.zero_grad();
            tape.backward_into(loss, params)?;
            observer(&StepView {
                step,
                lr,
                loss: &breakdown,
                params,
            });
            adamw_step(params, &mut state, optim, lr)?;
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: breakdown,
                batch_acc: hits as f64 / batch.len() as f64,
            });
            step += 1;
        }
        let val_acc = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(model, &data.val)?)
        };
        epochs.push(EpochRecord {
            epoch,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        });
    }
    model.params_mut().zero_grad();
    let test_acc = evaluate(model, &data.test)?;
    Ok(TrainRecord {
        seed,
        config_hash: config_hash.to_owned(),
        steps,
        epochs,
        test_acc,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}
