//! Acceptance suite. Each test checks one criterion and writes a single
//! `criterion N ... PASS|FAIL` line straight to stderr, so the verdicts
//! show up even when test output is captured.
//!
//! Tests hold a shared lock: the benchmark's wall-clock budget is only
//! meaningful when nothing else is running.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use gist_cli::ablate::{ablate, AblationTable, Grid};
use gist_cli::config::{ExperimentConfig, Mode};
use gist_cli::gradcheck::{self, Fault, GradcheckReport};
use gist_cli::run::{self, FinetuneSummary, CHECKPOINT_FILE, SOURCE_TEST_FILE};
use gist_core::data::{decode_dataset, encode_dataset, make_splits, GeneratorKind, SplitSpec, TaskSpec};
use gist_core::gist::{self, argmax_rows, attach_gist_token, GistLossConfig};
use gist_core::peft::{attach_adapter, attach_prompt, trainable_parameter_count, PeftSpec};
use gist_core::rng::epoch_permutation;
use gist_core::tensor::{ParamGroup, Tape};
use gist_core::trainer::{
    adamw_step, evaluate, finetune, finetune_observed, lr_at, predictions, prepare_finetune, AdamState, OptimSpec,
};
use gist_core::vit::{load_checkpoint, save_checkpoint, BackboneConfig, Images, Readout, Vit};
use gist_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "\ncriterion {n} {name}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn repo_path(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn load_config(rel: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&repo_path(rel)).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn micro_config(num_classes: usize) -> BackboneConfig {
    BackboneConfig {
        image_side: 8,
        patch_side: 4,
        channels: 1,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_hidden: 32,
        num_classes,
    }
}

fn micro_task(kind: GeneratorKind, k: usize) -> TaskSpec {
    TaskSpec {
        kind,
        image_side: 8,
        channels: 1,
        num_classes: k,
        noise_std: 0.05,
        seed: 7,
    }
}

fn micro_optim(epochs: usize, batch_size: usize) -> OptimSpec {
    OptimSpec {
        base_lr: 5e-3,
        total_epochs: epochs,
        warmup_epochs: 1,
        batch_size,
        ..OptimSpec::default()
    }
}

// ---- criterion 1 --------------------------------------------------------

const EXPECTED_OPS: [&str; 26] = [
    "matmul",
    "linear",
    "add_broadcast",
    "mul_broadcast",
    "add",
    "sub",
    "mul",
    "scale",
    "gelu",
    "layer_norm",
    "softmax_t",
    "attention",
    "tile",
    "concat_seq",
    "slice_seq",
    "mean_tokens",
    "reshape",
    "sum",
    "mean",
    "cross_entropy",
    "kl_divergence",
    "mse",
    "cosine_loss",
    "bkld",
    "full_loss",
    "full_loss_prompt_ssf",
];

#[test]
fn criterion_1_gradient_suite() {
    let _guard = serial();
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_gistlab"))
        .args(["gradcheck", "--json"])
        .output()
        .unwrap();
    let elapsed = started.elapsed();
    let report: GradcheckReport = serde_json::from_slice(&out.stdout).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.op.as_str()).collect();
    let worst = report.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);

    let faulty = gradcheck::run_suite(Some(Fault::CrossEntropyBackward)).unwrap();
    let caught: Vec<&str> = faulty.failures().map(|r| r.op.as_str()).collect();

    let ok = out.status.success()
        && report.passed
        && report.step == 1e-4
        && worst < 1e-4
        && names == EXPECTED_OPS
        && elapsed < Duration::from_secs(60)
        && !faulty.passed
        && caught == ["cross_entropy"];
    verdict(
        1,
        "gradient suite",
        ok,
        &format!(
            "{} ops, max rel err {worst:.2e}, {:.1}s, corrupted CE caught: {}",
            names.len(),
            elapsed.as_secs_f64(),
            caught == ["cross_entropy"]
        ),
    );
    assert!(ok);
}

// ---- criterion 2 --------------------------------------------------------

fn softened(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| ((x - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Direct summation of `KL(p‖q) + KL(q‖p)` over softened distributions.
fn bkld_oracle(a: &[f64], b: &[f64], t: f64) -> f64 {
    let (p, q) = (softened(a, t), softened(b, t));
    p.iter().zip(&q).map(|(x, y)| x * (x / y).ln() + y * (y / x).ln()).sum()
}

fn bkld_value(a: &[f64], b: &[f64], t: f64) -> f64 {
    let k = a.len();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, k], a.to_vec()).unwrap();
    let y = tape.constant(vec![1, k], b.to_vec()).unwrap();
    let b = gist::bkld(&mut tape, x, y, t).unwrap();
    tape.scalar(b.bkl)
}

#[test]
fn criterion_2_bkld_properties() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut negatives, mut asym, mut zero_fail, mut max_dev, mut checked) = (0, 0, 0, 0.0f64, 0);
    for t in [0.5, 1.0, 3.0, 10.0] {
        for _ in 0..1000 {
            let k = rng.random_range(2..=8);
            let scale = rng.random_range(0.1..6.0);
            let a: Vec<f64> = (0..k).map(|_| rng.random_range(-scale..scale)).collect();
            let b: Vec<f64> = (0..k).map(|_| rng.random_range(-scale..scale)).collect();
            let v = bkld_value(&a, &b, t);
            checked += 1;
            if v < 0.0 {
                negatives += 1;
            }
            if v.to_bits() != bkld_value(&b, &a, t).to_bits() {
                asym += 1;
            }
            max_dev = max_dev.max((v - bkld_oracle(&a, &b, t)).abs());
            // Zero exactly when the softened distributions agree.
            let shift = rng.random_range(-3.0..3.0);
            let shifted: Vec<f64> = a.iter().map(|x| x + shift).collect();
            if bkld_value(&a, &a, t) > 1e-7 || bkld_value(&a, &shifted, t) > 1e-7 {
                zero_fail += 1;
            }
            let (p, q) = (softened(&a, t), softened(&b, t));
            let tv: f64 = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum();
            if tv > 1e-3 && v <= 1e-7 {
                zero_fail += 1;
            }
        }
    }
    let ok = negatives == 0 && asym == 0 && zero_fail == 0 && max_dev < 1e-8;
    verdict(
        2,
        "BKLD properties",
        ok,
        &format!("{checked} pairs, negatives {negatives}, asymmetric {asym}, zero-iff failures {zero_fail}, max oracle dev {max_dev:.1e}"),
    );
    assert!(ok);
}

// ---- criterion 3 --------------------------------------------------------

struct StepTrace {
    loss_bits: u64,
    grads: Vec<Vec<u32>>,
    params: Vec<Vec<u32>>,
}

fn trace_store(store: &gist_core::tensor::ParamStore<f32>) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let grads = store
        .iter()
        .map(|(_, _, t, _)| {
            t.grad()
                .map_or_else(Vec::new, |g| g.iter().map(|x| x.to_bits()).collect())
        })
        .collect();
    let params = store
        .iter()
        .map(|(_, _, t, _)| t.data().iter().map(|x| x.to_bits()).collect())
        .collect();
    (grads, params)
}

/// Fine-tuning written from scratch on tape primitives: shuffled batches,
/// CLS cross entropy, AdamW. No trainer and no Gist code.
fn plain_finetune(
    model: &mut Vit<f32>,
    data: &gist_core::data::Splits,
    optim: &OptimSpec,
    seed: u64,
) -> (Vec<StepTrace>, Vec<f64>, f64) {
    let train = &data.train;
    let steps_per_epoch = train.len().div_ceil(optim.batch_size);
    let k = model.config().num_classes;
    let mut state = AdamState::new();
    let mut traces = Vec::new();
    let mut train_accs = Vec::new();
    let mut step = 0;
    for epoch in 0..optim.total_epochs {
        let mut correct = 0;
        for batch in epoch_permutation(seed, epoch as u64, train.len()).chunks(optim.batch_size) {
            let (px, labels) = train.gather(batch);
            let images = Images {
                data: &px,
                batch: batch.len(),
                channels: train.channels,
                height: train.side,
                width: train.side,
            };
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, images, false).unwrap();
            let logits = model.classify(&mut tape, &fwd.state, Readout::Cls).unwrap();
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            correct += argmax_rows(tape.value(logits), k)
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            let params = model.params_mut();
            params.zero_grad();
            tape.backward_into(loss, params).unwrap();
            let (grads, snapshot) = trace_store(params);
            traces.push(StepTrace {
                loss_bits: (tape.scalar(loss) as f64).to_bits(),
                grads,
                params: snapshot,
            });
            adamw_step(params, &mut state, optim, lr_at(step, optim, steps_per_epoch)).unwrap();
            step += 1;
        }
        train_accs.push(correct as f64 / train.len() as f64);
    }
    model.params_mut().zero_grad();
    let test = evaluate(model, &data.test).unwrap();
    (traces, train_accs, test)
}

#[test]
fn criterion_3_baseline_equivalence() {
    let _guard = serial();
    let task = micro_task(GeneratorKind::Blobs, 3);
    let data = make_splits(
        std::slice::from_ref(&task),
        &SplitSpec {
            train_n: 80,
            val_n: 0,
            test_n: 60,
            few_shot: None,
        },
    )
    .unwrap();
    let optim = micro_optim(5, 8);
    let seed = 5;
    let mut base = Vit::<f32>::new(micro_config(3), 1).unwrap();
    let off = GistLossConfig::disabled();
    prepare_finetune(&mut base, 3, &[PeftSpec::adapter()], &off, seed).unwrap();

    let mut framework = base.clone();
    let mut seen = Vec::new();
    let record = finetune_observed(&mut framework, &off, &data, &optim, seed, "h", &mut |v| {
        let (grads, params) = trace_store(v.params);
        seen.push(StepTrace {
            loss_bits: v.loss.l_all.to_bits(),
            grads,
            params,
        });
    })
    .unwrap();

    let mut plain = base.clone();
    let (traces, train_accs, test_acc) = plain_finetune(&mut plain, &data, &optim, seed);

    let steps = seen.len();
    let same_steps = steps == 50
        && traces.len() == 50
        && seen
            .iter()
            .zip(&traces)
            .all(|(a, b)| a.loss_bits == b.loss_bits && a.grads == b.grads && a.params == b.params);
    let record_accs: Vec<f64> = record.epochs.iter().map(|e| e.train_acc).collect();
    let same_metrics = record_accs == train_accs && record.test_acc.to_bits() == test_acc.to_bits();
    let same_final = trace_store(framework.params()) == trace_store(plain.params());
    let ok = same_steps && same_metrics && same_final;
    verdict(
        3,
        "baseline equivalence",
        ok,
        &format!("{steps} steps; losses/grads/params identical: {same_steps}; metrics identical: {same_metrics}"),
    );
    assert!(ok);
}

// ---- criterion 4 --------------------------------------------------------

#[test]
fn criterion_4_frozen_parameter_audit() {
    let _guard = serial();
    let task = micro_task(GeneratorKind::Stripes, 2);
    let data = make_splits(
        std::slice::from_ref(&task),
        &SplitSpec {
            train_n: 32,
            val_n: 8,
            test_n: 16,
            few_shot: None,
        },
    )
    .unwrap();
    let pretrained = Vit::<f32>::new(micro_config(2), 3).unwrap();
    let backbone: Vec<(String, Vec<u32>)> = pretrained
        .params()
        .iter()
        .filter(|(_, _, _, g)| *g == ParamGroup::Backbone)
        .map(|(_, n, t, _)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect();
    let aux = GistLossConfig {
        aux_vpt_loss: true,
        ..GistLossConfig::default()
    };
    let setups: Vec<(&str, Vec<PeftSpec>, GistLossConfig)> = vec![
        (
            "adapter/traditional",
            vec![PeftSpec::adapter()],
            GistLossConfig::disabled(),
        ),
        ("adapter/gist", vec![PeftSpec::adapter()], GistLossConfig::default()),
        ("prompt/gist+aux", vec![PeftSpec::prompt()], aux),
        ("ssf/gist", vec![PeftSpec::scale_shift()], GistLossConfig::default()),
        ("linear-probe/gist", vec![], GistLossConfig::default()),
    ];
    let mut changed = Vec::new();
    let mut moved_trainable = true;
    for (name, peft, loss) in &setups {
        let mut m = pretrained.clone();
        prepare_finetune(&mut m, 2, peft, loss, 9).unwrap();
        let before = m.params().clone();
        finetune(&mut m, loss, &data, &micro_optim(3, 8), 9, "h").unwrap();
        for (pname, bits) in &backbone {
            let id = m.params().id(pname).unwrap();
            let now: Vec<u32> = m.params().get(id).data().iter().map(|x| x.to_bits()).collect();
            if &now != bits {
                changed.push(format!("{name}:{pname}"));
            }
        }
        moved_trainable &= m
            .params()
            .ids()
            .filter(|&id| !m.params().is_frozen(id))
            .any(|id| m.params().get(id).data() != before.get(id).data());
    }
    let cls_name = pretrained.params().name(pretrained.cls_token_id());
    let has_cls = backbone.iter().any(|(n, _)| n == cls_name);
    let ok = changed.is_empty() && has_cls && moved_trainable;
    verdict(
        4,
        "frozen-parameter audit",
        ok,
        &format!(
            "{} backbone tensors (incl. cls: {has_cls}) × {} setups, changed: {changed:?}",
            backbone.len(),
            setups.len()
        ),
    );
    assert!(ok);
}

// ---- criterion 5 --------------------------------------------------------

#[test]
fn criterion_5_parameter_accounting() {
    let _guard = serial();
    let d = 768;
    let layers = 12;
    // Token count and FFN width do not enter PEFT or Gist counts.
    let cfg = BackboneConfig {
        image_side: 1,
        patch_side: 1,
        channels: 1,
        embed_dim: d,
        num_layers: layers,
        num_heads: 12,
        ffn_hidden: 4,
        num_classes: 10,
    };
    let mut m = Vit::<f32>::new(cfg, 0).unwrap();
    m.set_finetune_freeze();
    let base = trainable_parameter_count(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let adapter = attach_adapter(&mut m, &PeftSpec::adapter(), &mut rng).unwrap();
    let hidden = 4;
    // down weight + bias, up weight + bias, per layer
    let adapter_closed = layers * ((d * hidden + hidden) + (hidden * d + d));
    attach_prompt(&mut m, &PeftSpec::prompt(), &mut rng).unwrap();
    m.set_finetune_freeze();
    let with_peft = trainable_parameter_count(&m);
    attach_gist_token(&mut m, 1, 0).unwrap();
    m.set_finetune_freeze();
    let with_gist = trainable_parameter_count(&m);

    let gist_added = with_gist.with_head - with_peft.with_head;
    let prompt_added = with_peft.peft - adapter.scalars;
    let ok = gist_added == d
        && gist_added == 768
        && prompt_added == 20 * d
        && adapter.scalars == adapter_closed
        && adapter.scalars == 82_992
        && with_peft.with_head - base.with_head == adapter_closed + 20 * d;
    verdict(
        5,
        "parameter accounting",
        ok,
        &format!(
            "gist +{gist_added}, prompt +{prompt_added}, adapter {} (closed form {adapter_closed})",
            adapter.scalars
        ),
    );
    assert!(ok);
}

// ---- criteria 6 and 7 ---------------------------------------------------

struct Benchmark {
    summary: FinetuneSummary,
    losses: AblationTable,
    elapsed: Duration,
    pretrain_acc: f64,
}

fn benchmark() -> &'static Benchmark {
    static BENCH: OnceLock<Benchmark> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config("configs/benchmark.json", dir.path());
        let started = Instant::now();
        let pre = run::pretrain(&cfg).unwrap();
        let summary = run::finetune(&cfg).unwrap();
        let losses = ablate(&cfg, Grid::LossTerms).unwrap();
        Benchmark {
            summary,
            losses,
            elapsed: started.elapsed(),
            pretrain_acc: pre.test_acc,
        }
    })
}

#[test]
fn criterion_6_direction_of_effect() {
    let _guard = serial();
    let b = benchmark();
    let trad = b.summary.overall(Mode::Traditional).unwrap();
    let gist = b.summary.overall(Mode::Gist).unwrap();
    let trad_runs: Vec<_> = b.summary.runs(Mode::Traditional).collect();
    let gist_runs: Vec<_> = b.summary.runs(Mode::Gist).collect();
    let cells = trad_runs.len();
    let wins = trad_runs
        .iter()
        .zip(&gist_runs)
        .filter(|(t, g)| {
            assert_eq!((&t.task, t.seed), (&g.task, g.seed));
            g.test_acc > t.test_acc
        })
        .count();
    let ok = cells == 20
        && gist.mean >= trad.mean - 0.005
        && wins * 10 >= cells * 6
        && b.elapsed < Duration::from_secs(15 * 60);
    verdict(
        6,
        "direction of effect",
        ok,
        &format!(
            "traditional {:.2}%, GIST {:.2}%, GIST higher on {wins}/{cells} cells, pretrain test {:.1}%, benchmark {:.0}s",
            100.0 * trad.mean,
            100.0 * gist.mean,
            100.0 * b.pretrain_acc,
            b.elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_ablation_ordering() {
    let _guard = serial();
    let b = benchmark();
    let mean = |cell: &str| b.losses.row(cell).unwrap().stats.mean;
    let full = mean("cls+gist+bkl");
    let variants = ["cls", "cls+gist", "cls+bkl"];
    let ok = variants.iter().all(|v| full >= mean(v) - 0.005) && b.elapsed < Duration::from_secs(15 * 60);
    let detail: Vec<String> = ["cls", "cls+gist", "cls+bkl", "cls+gist+bkl"]
        .iter()
        .map(|c| format!("{c} {:.2}%", 100.0 * mean(c)))
        .collect();
    verdict(7, "ablation ordering", ok, &detail.join(", "));
    assert!(ok);
}

// ---- criterion 8 --------------------------------------------------------

#[test]
fn criterion_8_determinism_and_persistence() {
    let _guard = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg_a = load_config("configs/smoke.json", a.path());
    let cfg_b = load_config("configs/smoke.json", b.path());
    run::pretrain(&cfg_a).unwrap();
    run::pretrain(&cfg_b).unwrap();
    let sum_a = run::finetune(&cfg_a).unwrap();
    let sum_b = run::finetune(&cfg_b).unwrap();

    let read = |cfg: &ExperimentConfig, rel: &Path| std::fs::read(cfg.output_dir.join(rel)).unwrap();
    let pre = run::pretrain_dir(&cfg_a).strip_prefix(a.path()).unwrap().to_path_buf();
    let mut identical = read(&cfg_a, &pre.join(CHECKPOINT_FILE)) == read(&cfg_b, &pre.join(CHECKPOINT_FILE))
        && read(&cfg_a, &pre.join("metrics.jsonl")) == read(&cfg_b, &pre.join("metrics.jsonl"));
    for r in sum_a.tasks.iter().flat_map(|t| &t.modes).flat_map(|m| &m.runs) {
        let dir = run::run_dir(&cfg_a, &r.run_hash)
            .strip_prefix(a.path())
            .unwrap()
            .to_path_buf();
        identical &= read(&cfg_a, &dir.join(CHECKPOINT_FILE)) == read(&cfg_b, &dir.join(CHECKPOINT_FILE));
        identical &= read(&cfg_a, &dir.join("metrics.jsonl")) == read(&cfg_b, &dir.join("metrics.jsonl"));
    }
    identical &= serde_json::to_string(&sum_a).unwrap() == serde_json::to_string(&sum_b).unwrap();

    // Round trips.
    let ckpt = read(&cfg_a, &pre.join(CHECKPOINT_FILE));
    let (model, meta) = load_checkpoint::<f32>(&ckpt).unwrap();
    let ckpt_round = save_checkpoint(&model, meta.config_hash.as_deref()).unwrap() == ckpt;
    let ds = read(&cfg_a, &pre.join(SOURCE_TEST_FILE));
    let (data, header) = decode_dataset(&ds).unwrap();
    let data_round = encode_dataset(&data, &header.specs, header.config_hash.as_deref()).unwrap() == ds;
    let hashes_embedded = meta.config_hash.as_deref() == Some(cfg_a.pretrain_hash().as_str())
        && header.config_hash.as_deref() == Some(cfg_a.pretrain_hash().as_str());

    // Corruption is rejected with a byte offset.
    let positioned = |r: Result<(), Error>, at: Option<usize>| match r {
        Err(Error::Format { offset, .. }) => at.is_none_or(|a| a == offset),
        _ => false,
    };
    let mut bad_magic = ckpt.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = ds.clone();
    bad_version[8] ^= 0x01;
    let corrupt = positioned(load_checkpoint::<f32>(&bad_magic).map(|_| ()), Some(0))
        && positioned(load_checkpoint::<f32>(&ckpt[..ckpt.len() - 3]).map(|_| ()), None)
        && positioned(decode_dataset(&bad_version).map(|_| ()), Some(8))
        && positioned(decode_dataset(&ds[..ds.len() / 2]).map(|_| ()), None);

    // The CLI refuses a corrupted pretrained checkpoint with a runtime error.
    std::fs::write(cfg_b.output_dir.join(&pre).join(CHECKPOINT_FILE), &bad_magic).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gistlab"))
        .args(["finetune", "--config"])
        .arg(repo_path("configs/smoke.json"))
        .arg("--out")
        .arg(b.path())
        .args(["--seeds", "42"])
        .output()
        .unwrap();
    let cli_rejects = out.status.code() == Some(2) && String::from_utf8_lossy(&out.stderr).contains("at byte 0");

    let ok = identical && ckpt_round && data_round && hashes_embedded && corrupt && cli_rejects;
    verdict(
        8,
        "determinism & persistence",
        ok,
        &format!(
            "identical reruns {identical}, checkpoint round trip {ckpt_round}, dataset round trip {data_round}, hashes {hashes_embedded}, corruption rejected {corrupt}, CLI exit 2 {cli_rejects}"
        ),
    );
    assert!(ok);
}

// ---- criterion 9 --------------------------------------------------------

#[test]
fn criterion_9_inference_rule() {
    let _guard = serial();
    let task = micro_task(GeneratorKind::Blobs, 3);
    let data = make_splits(
        std::slice::from_ref(&task),
        &SplitSpec {
            train_n: 64,
            val_n: 0,
            test_n: 200,
            few_shot: None,
        },
    )
    .unwrap();
    let mut m = Vit::<f32>::new(micro_config(3), 4).unwrap();
    let cfg = GistLossConfig::default();
    prepare_finetune(&mut m, 3, &[PeftSpec::adapter()], &cfg, 4).unwrap();
    finetune(&mut m, &cfg, &data, &micro_optim(6, 16), 4, "h").unwrap();

    // Evaluation path with the Gist head application in place.
    let test = &data.test;
    let images = test.images();
    let mut tape = Tape::new();
    let fwd = m.forward(&mut tape, images, true).unwrap();
    let s_cls = m.classify(&mut tape, &fwd.state, Readout::Cls).unwrap();
    let s_gist = m.classify(&mut tape, &fwd.state, Readout::Gist).unwrap();
    let with_gist_head = argmax_rows(tape.value(s_cls), 3);
    let gist_preds = argmax_rows(tape.value(s_gist), 3);
    // The same path with that application deleted.
    let mut tape = Tape::new();
    let fwd = m.forward(&mut tape, images, true).unwrap();
    let s_cls = m.classify(&mut tape, &fwd.state, Readout::Cls).unwrap();
    let without = argmax_rows(tape.value(s_cls), 3);
    let reported = predictions(&m, test).unwrap();

    let changed = with_gist_head.iter().zip(&without).filter(|(a, b)| a != b).count();
    let gist_disagrees = gist_preds.iter().zip(&without).filter(|(a, b)| a != b).count();
    let ok = changed == 0 && reported == without;
    verdict(
        9,
        "inference rule",
        ok,
        &format!(
            "{} test samples, changed predictions {changed}; Gist readout alone would differ on {gist_disagrees}",
            test.len()
        ),
    );
    assert!(ok);
}
