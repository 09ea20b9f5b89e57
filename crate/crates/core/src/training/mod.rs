//! Losses and the gated adversarial training loop.
//!
//! Each step runs one forward pass over a mini-batch of conversations. For
//! every response turn the generator produces teacher-forced logits, a
//! sampled response `y_i` is drawn from them, and the discriminators score
//! both the gold and the sampled response given the same context state.
//! The word-level discriminator accuracy then decides which updates fire:
//!
//! | accuracy            | discriminators | generator            |
//! |---------------------|----------------|----------------------|
//! | `>= acc_d_threshold` | skipped        | full                 |
//! | `[acc_g, acc_d)`     | updated        | full                 |
//! | `< acc_g_threshold`  | updated        | MLE only             |
//!
//! Discriminator updates move `shared.*`, `adversary.*` and `attribute.*`
//! parameters; generator updates move `shared.*` and `generator.*`. Both
//! gradients are taken from the same forward pass.

mod eval;
pub mod losses;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use eval::{attribute_accuracy, teacher_forced_nll, NllTotals};
pub use losses::{adv_loss_a, adv_loss_d, att_loss, mle_loss, P_MIN};
pub use optim::Sgd;

use crate::checkpoint::{CheckpointError, Snapshot};
use crate::config::{ConfigError, TrainConfig, Variant};
use crate::corpus::{make_batches, Conversation, ConversationBatch, TurnBatch, EOS};
use crate::model::{adv_accuracy, sample_noise, ContextState, PhredModel};
use crate::tensor::{Graph, ParamGrads, SeededEngine, TensorError, Var};

/// RNG stream for sampling during training.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no conversation with at least two turns to train on")]
    EmptyCorpus,
    #[error("non-finite {what} at step {step}{}", checkpoint.as_ref().map(|p| format!("; state saved to {}", p.display())).unwrap_or_default())]
    Diverged { step: u64, what: String, checkpoint: Option<PathBuf> },
}

/// How the generator is updated in one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    MleOnly,
    Full,
    /// No generator update (the step was aborted).
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdatePlan {
    pub discriminator: bool,
    pub generator: GeneratorMode,
}

/// The gate: which updates fire for a measured discriminator accuracy.
/// `accuracy` is ignored (and may be absent) for `phred`, which is always
/// trained by MLE alone.
pub fn plan_updates(variant: Variant, accuracy: Option<f64>, cfg: &TrainConfig) -> UpdatePlan {
    match (variant, accuracy) {
        (Variant::Phred, _) | (_, None) => UpdatePlan { discriminator: false, generator: GeneratorMode::MleOnly },
        (_, Some(acc)) => UpdatePlan {
            discriminator: acc < cfg.acc_d_threshold,
            generator: if acc < cfg.acc_g_threshold { GeneratorMode::MleOnly } else { GeneratorMode::Full },
        },
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub mle_loss: f64,
    pub d_adv_loss: Option<f64>,
    pub g_adv_loss: Option<f64>,
    pub d_att_loss: Option<f64>,
    pub g_att_loss: Option<f64>,
    pub adv_accuracy: Option<f64>,
    pub discriminator_update: bool,
    pub generator_mode: GeneratorMode,
    pub generator_grad_norm: f64,
    pub discriminator_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_mle(&self) -> Option<f64> {
        self.steps.last().map(|s| s.mle_loss)
    }
}

/// Scalar losses of one forward pass, averaged over response turns.
#[derive(Debug, Clone, Copy)]
pub struct BatchLosses {
    pub mle: Var,
    pub d_adv: Option<Var>,
    pub g_adv: Option<Var>,
    pub d_att: Option<Var>,
    pub g_att: Option<Var>,
    /// Word-level discriminator accuracy over gold and sampled responses.
    pub accuracy: Option<f64>,
}

fn softmax_row(row: &[f32]) -> Vec<f32> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = row.iter().map(|&x| ((x - m) as f64).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&v| (v / z) as f32).collect()
}

/// Draws `y_i` position by position from teacher-forced distributions,
/// stopping each row at its first `EOS` or at the gold row's length.
fn sample_responses(g: &Graph, logits: &[Var], gold: &TurnBatch, rng: &mut SeededEngine) -> TurnBatch {
    let b = gold.batch_size();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    for (t, &l) in logits.iter().enumerate() {
        let lt = g.value(l);
        for row in 0..b {
            if done[row] || t >= gold.lengths[row] {
                continue;
            }
            let tok = rng.categorical(&softmax_row(lt.row(row)));
            rows[row].push(tok);
            done[row] = tok == EOS;
        }
    }
    TurnBatch::from_rows(&rows, gold.source_attrs.clone(), gold.target_attrs.clone())
}

fn pairs(v: &[(Vec<f32>, Vec<f32>)]) -> Vec<(&[f32], &[f32])> {
    v.iter().map(|(p, m)| (p.as_slice(), m.as_slice())).collect()
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>, TensorError> {
    let Some((&first, rest)) = terms.split_first() else { return Ok(None) };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f32)?))
}

/// Builds every loss of the model's variant for one mini-batch on `g`.
pub fn batch_losses(g: &mut Graph, model: &PhredModel, batch: &ConversationBatch, rng: &mut SeededEngine) -> Result<BatchLosses, TensorError> {
    if batch.turns.len() < 2 {
        return Err(TensorError::InvalidArgument { op: "batch_losses", msg: "a conversation needs at least two turns".into() });
    }
    let variant = model.variant();
    let gen = &model.generator;
    let spec = gen.noise;
    let mut state = ContextState::zero(g, gen, batch.batch_size());
    let (mut mle, mut d_adv, mut g_adv, mut d_att, mut g_att) = (vec![], vec![], vec![], vec![], vec![]);
    let mut gt_probs: Vec<(Vec<f32>, Vec<f32>)> = Vec::new();
    let mut gen_probs: Vec<(Vec<f32>, Vec<f32>)> = Vec::new();
    for i in 0..batch.turns.len() - 1 {
        state = gen.encode_turn(g, &state, &batch.turns[i])?;
        let response = &batch.turns[i + 1];
        if response.lengths.iter().all(|&l| l == 0) {
            continue;
        }
        let targets = batch.turns[i].target_attrs.clone().expect("every turn but the last has a successor");
        let noise = sample_noise(&spec, response.batch_size(), response.width, rng);
        let logits = gen.teacher_forced_logits(g, &state, response, &targets, &noise)?;
        mle.push(mle_loss(g, &logits, response)?);
        let Some(adv) = &model.adversary else { continue };
        let sampled = sample_responses(g, &logits, response, rng);
        let attrs = adv.conditioned().then_some(targets.as_slice());
        let p_gt = adv.word_probs(g, &state.hidden, response, attrs)?;
        let p_gen = adv.word_probs(g, &state.hidden, &sampled, attrs)?;
        gt_probs.push((g.value(p_gt).data().to_vec(), response.mask.clone()));
        gen_probs.push((g.value(p_gen).data().to_vec(), sampled.mask.clone()));
        let (d, gl) = losses::adv_losses(g, p_gt, &response.mask, p_gen, &sampled.mask)?;
        d_adv.push(d);
        g_adv.push(gl);
        if let Some(att) = &model.attribute_discriminator {
            let dist_gt = att.predict(g, &state.hidden, response)?;
            let dist_gen = att.predict(g, &state.hidden, &sampled)?;
            let (d, gl) = att_loss(g, dist_gt, dist_gen, &targets, &response.present())?;
            d_att.push(d);
            g_att.push(gl);
        }
    }
    let (gt_refs, gn_refs) = (pairs(&gt_probs), pairs(&gen_probs));
    let accuracy = if variant.has_adversary() { adv_accuracy(&gt_refs, &gn_refs) } else { None };
    let mle = mean_of(g, &mle)?.ok_or_else(|| TensorError::InvalidArgument {
        op: "batch_losses",
        msg: "no response turn in batch".into(),
    })?;
    Ok(BatchLosses {
        mle,
        d_adv: mean_of(g, &d_adv)?,
        g_adv: mean_of(g, &g_adv)?,
        d_att: mean_of(g, &d_att)?,
        g_att: mean_of(g, &g_att)?,
        accuracy,
    })
}

/// `λ_M·MLE`, plus `λ_G_adv·g_adv + λ_G_att·g_att` under a full update.
pub fn generator_objective(
    g: &mut Graph,
    losses: &BatchLosses,
    cfg: &TrainConfig,
    variant: Variant,
    mode: GeneratorMode,
) -> Result<Var, TensorError> {
    let mut total = g.scale(losses.mle, cfg.lambda_m)?;
    if mode == GeneratorMode::Full {
        if let Some(adv) = losses.g_adv {
            let t = g.scale(adv, cfg.lambda_g_adv)?;
            total = g.add(total, t)?;
        }
        let lambda_att = cfg.lambda_g_att(variant);
        if let (Some(att), true) = (losses.g_att, lambda_att != 0.0) {
            let t = g.scale(att, lambda_att)?;
            total = g.add(total, t)?;
        }
    }
    Ok(total)
}

/// Sum of the discriminator losses, if the variant has discriminators.
pub fn discriminator_objective(g: &mut Graph, losses: &BatchLosses) -> Result<Option<Var>, TensorError> {
    match (losses.d_adv, losses.d_att) {
        (Some(a), Some(b)) => Ok(Some(g.add(a, b)?)),
        (Some(a), None) => Ok(Some(a)),
        _ => Ok(None),
    }
}

fn scalar(g: &Graph, v: Option<Var>) -> Option<f64> {
    v.map(|v| g.value(v).item() as f64)
}

/// Runs one gated update on `batch`. `scripted_accuracy`, when given,
/// replaces the measured accuracy in the gate.
pub fn train_step(
    model: &mut PhredModel,
    cfg: &TrainConfig,
    batch: &ConversationBatch,
    rng: &mut SeededEngine,
    scripted_accuracy: Option<f64>,
) -> Result<StepRecord, TrainError> {
    let variant = model.variant();
    if !model.store.all_finite() {
        return Err(TrainError::Diverged { step: 0, what: "parameters".into(), checkpoint: None });
    }
    let (record, mut d_grads, mut g_grads) = {
        let mut g = Graph::new(&model.store);
        let losses = batch_losses(&mut g, model, batch, rng)?;
        let accuracy = if variant.has_adversary() { scripted_accuracy.or(losses.accuracy) } else { None };
        let plan = plan_updates(variant, accuracy, cfg);
        let mut record = StepRecord {
            step: 0,
            epoch: 0,
            mle_loss: g.value(losses.mle).item() as f64,
            d_adv_loss: scalar(&g, losses.d_adv),
            g_adv_loss: scalar(&g, losses.g_adv),
            d_att_loss: scalar(&g, losses.d_att),
            g_att_loss: scalar(&g, losses.g_att),
            adv_accuracy: accuracy,
            discriminator_update: plan.discriminator,
            generator_mode: plan.generator,
            generator_grad_norm: 0.0,
            discriminator_grad_norm: None,
        };
        let named = [
            ("mle_loss", Some(record.mle_loss)),
            ("d_adv_loss", record.d_adv_loss),
            ("g_adv_loss", record.g_adv_loss),
            ("d_att_loss", record.d_att_loss),
            ("g_att_loss", record.g_att_loss),
        ];
        if let Some((what, _)) = named.iter().find(|(_, v)| v.is_some_and(|x| !x.is_finite())) {
            return Err(TrainError::Diverged { step: 0, what: what.to_string(), checkpoint: None });
        }
        let d_grads = match (plan.discriminator, discriminator_objective(&mut g, &losses)?) {
            (true, Some(d)) => {
                g.backward(d)?;
                let mut grads = g.param_grads();
                grads.retain(|id| model.group(id).in_discriminator_update());
                g.zero_grad();
                Some(grads)
            }
            _ => None,
        };
        let objective = generator_objective(&mut g, &losses, cfg, variant, plan.generator)?;
        g.backward(objective)?;
        let mut g_grads = g.param_grads();
        g_grads.retain(|id| model.group(id).in_generator_update());
        record.generator_mode = plan.generator;
        (record, d_grads, g_grads)
    };
    let mut record = record;
    let check = |grads: &ParamGrads, what: &str| {
        if grads.all_finite() {
            Ok(())
        } else {
            Err(TrainError::Diverged { step: 0, what: what.to_string(), checkpoint: None })
        }
    };
    check(&g_grads, "generator gradient")?;
    if let Some(d) = &d_grads {
        check(d, "discriminator gradient")?;
    }
    let sgd = Sgd::new(cfg.learning_rate, cfg.clip_norm);
    if let Some(d) = d_grads.as_mut() {
        record.discriminator_grad_norm = Some(sgd.step(&mut model.store, d));
    }
    record.generator_grad_norm = sgd.step(&mut model.store, &mut g_grads);
    if !model.store.all_finite() {
        return Err(TrainError::Diverged { step: 0, what: "parameters".into(), checkpoint: None });
    }
    Ok(record)
}

/// Conversations that can produce at least one (context, response) pair.
pub fn trainable(conversations: &[Conversation]) -> Vec<Conversation> {
    conversations.iter().filter(|c| c.turns.len() >= 2).cloned().collect()
}

/// Where [`train`] writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Root for `train_log.jsonl`, `checkpoints/` and `snapshot/`.
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn snapshot_dir(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("snapshot"))
    }
}

/// Trains `snapshot.model` for `snapshot.train.epochs` epochs.
pub fn train(snapshot: &mut Snapshot, conversations: &[Conversation], outputs: &TrainOutputs) -> Result<TrainReport, TrainError> {
    let started = Instant::now();
    let cfg = snapshot.train.clone();
    cfg.validate(snapshot.model.variant())?;
    snapshot.model.config.validate()?;
    let data = trainable(conversations);
    if data.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut log = match &outputs.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.clone(), source })?;
            let p = dir.join("train_log.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|source| TrainError::Io { path: p.clone(), source })?), p))
        }
        None => None,
    };
    let mut report = TrainReport::default();
    let mut rng = SeededEngine::with_stream(cfg.seed, TRAIN_STREAM);
    let (max_turns, max_len) = (snapshot.model.config.max_turns, snapshot.model.config.max_len);
    for epoch in 0..cfg.epochs {
        let batches = make_batches(&data, cfg.batch_size, max_turns, max_len, cfg.seed, epoch as u64);
        for batch in &batches {
            let step = snapshot.step + 1;
            let mut record = match train_step(&mut snapshot.model, &cfg, batch, &mut rng, None) {
                Ok(r) => r,
                Err(TrainError::Diverged { what, .. }) => {
                    let checkpoint = match &outputs.dir {
                        Some(dir) => {
                            let p = dir.join("diverged");
                            snapshot.save(&p)?;
                            Some(p)
                        }
                        None => None,
                    };
                    log::error!("training diverged at step {step}: non-finite {what}");
                    return Err(TrainError::Diverged { step, what, checkpoint });
                }
                Err(e) => return Err(e),
            };
            snapshot.step = step;
            record.step = step;
            record.epoch = epoch;
            log::debug!("step {step}: mle {:.4} acc {:?} mode {:?}", record.mle_loss, record.adv_accuracy, record.generator_mode);
            if let Some((w, p)) = log.as_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(w, "{line}").map_err(|source| TrainError::Io { path: p.clone(), source })?;
            }
            report.steps.push(record);
        }
        let last = report.steps.last().map_or(f64::NAN, |s| s.mle_loss);
        log::info!("epoch {} done: {} steps, last mle {last:.4}", epoch + 1, batches.len());
        if let (Some(dir), true) = (&outputs.dir, cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            let p = dir.join("checkpoints").join(format!("epoch-{:04}", epoch + 1));
            snapshot.save(&p)?;
            report.checkpoints.push(p);
        }
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|source| TrainError::Io { path: p, source })?;
    }
    if let Some(p) = outputs.snapshot_dir() {
        snapshot.save(&p)?;
        report.checkpoints.push(p);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| TrainError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}
