mod common;

use common::*;
use phredgan::config::{NoiseMode, TrainConfig, Variant};
use phredgan::corpus::{make_batches, ConversationBatch};
use phredgan::model::{ContextState, ParamGroup, PhredModel};
use phredgan::tensor::{Graph, ParamGrads, SeededEngine};
use phredgan::training::{
    batch_losses, generator_objective, read_log, teacher_forced_nll, train, train_step, GeneratorMode, TrainError, TrainOutputs,
};

fn first_batch(convs: &[phredgan::corpus::Conversation], m: &PhredModel, size: usize) -> ConversationBatch {
    make_batches(convs, size, m.config.max_turns, m.config.max_len, 1, 0).remove(0)
}

fn group_snapshot(m: &PhredModel, group: ParamGroup) -> Vec<Vec<u32>> {
    m.store.iter().filter(|(id, _, _)| m.group(*id) == group).map(|(_, _, t)| bits(t.data())).collect()
}

#[test]
fn scripted_accuracies_drive_the_gate() {
    let cfg = TrainConfig::default();
    for (acc, d_fires, mode) in [(0.995, false, GeneratorMode::Full), (0.80, true, GeneratorMode::Full), (0.50, true, GeneratorMode::MleOnly)] {
        let (mut snap, convs) = toy_snapshot(Variant::PhredganD, cfg.clone());
        let batch = first_batch(&convs, &snap.model, 4);
        let adv_before = group_snapshot(&snap.model, ParamGroup::Adversary);
        let att_before = group_snapshot(&snap.model, ParamGroup::AttributeDiscriminator);
        let gen_before = group_snapshot(&snap.model, ParamGroup::Generator);
        let rec = train_step(&mut snap.model, &cfg, &batch, &mut SeededEngine::new(0), Some(acc)).unwrap();
        assert_eq!(rec.adv_accuracy, Some(acc));
        assert_eq!(rec.discriminator_update, d_fires, "acc {acc}");
        assert_eq!(rec.generator_mode, mode, "acc {acc}");
        assert_eq!(group_snapshot(&snap.model, ParamGroup::Adversary) != adv_before, d_fires);
        assert_eq!(group_snapshot(&snap.model, ParamGroup::AttributeDiscriminator) != att_before, d_fires);
        assert_ne!(group_snapshot(&snap.model, ParamGroup::Generator), gen_before);
    }
}

#[test]
fn mle_only_update_ignores_adversarial_terms() {
    // Under an MLE-only update the adversarial weights must not matter.
    let run = |lambda: f32| {
        let cfg = TrainConfig { lambda_g_adv: lambda, lambda_g_att: Some(lambda), ..TrainConfig::default() };
        let (mut snap, convs) = toy_snapshot(Variant::PhredganD, cfg.clone());
        let batch = first_batch(&convs, &snap.model, 4);
        train_step(&mut snap.model, &cfg, &batch, &mut SeededEngine::new(3), Some(0.5)).unwrap();
        group_snapshot(&snap.model, ParamGroup::Generator)
    };
    assert_eq!(run(1.0), run(7.0));
}

fn grads_of(model: &PhredModel, batch: &ConversationBatch, f: impl Fn(&mut Graph, &phredgan::training::BatchLosses) -> phredgan::tensor::Var) -> ParamGrads {
    let mut g = Graph::new(&model.store);
    let losses = batch_losses(&mut g, model, batch, &mut SeededEngine::new(17)).unwrap();
    let l = f(&mut g, &losses);
    g.backward(l).unwrap();
    let mut grads = g.param_grads();
    grads.retain(|id| model.group(id).in_generator_update());
    grads
}

#[test]
fn full_generator_gradient_is_the_weighted_sum_of_terms() {
    let (lm, la, lt) = (0.7f32, 1.3f32, 0.4f32);
    let cfg = TrainConfig { lambda_m: lm, lambda_g_adv: la, lambda_g_att: Some(lt), ..TrainConfig::default() };
    let (snap, convs) = toy_snapshot(Variant::PhredganD, cfg.clone());
    let m = &snap.model;
    let batch = first_batch(&convs, m, 3);
    let full = grads_of(m, &batch, |g, l| generator_objective(g, l, &cfg, Variant::PhredganD, GeneratorMode::Full).unwrap());
    let mle = grads_of(m, &batch, |_, l| l.mle);
    let adv = grads_of(m, &batch, |_, l| l.g_adv.unwrap());
    let att = grads_of(m, &batch, |_, l| l.g_att.unwrap());
    let mut checked = 0;
    for (id, gf) in full.iter() {
        for (k, &v) in gf.iter().enumerate() {
            let part = |p: &ParamGrads| p.get(id).map_or(0.0, |x| x[k] as f64);
            let expect = lm as f64 * part(&mle) + la as f64 * part(&adv) + lt as f64 * part(&att);
            assert!((v as f64 - expect).abs() <= 1e-5 * (1.0 + expect.abs()), "{}[{k}]: {v} vs {expect}", m.store.name(id));
            checked += 1;
        }
    }
    assert!(checked > 100);
    // The adversarial and attribute terms do reach the generator.
    assert!(adv.l2_norm() > 0.0 && att.l2_norm() > 0.0);
}

#[test]
fn discriminator_update_on_shared_encoder_reaches_generator() {
    // Zero generator objective: only the discriminator step moves anything.
    let cfg = TrainConfig { lambda_m: 0.0, lambda_g_adv: 0.0, lambda_g_att: Some(0.0), ..TrainConfig::default() };
    let (mut snap, convs) = toy_snapshot(Variant::PhredganD, cfg.clone());
    let batch = first_batch(&convs, &snap.model, 4);
    let hidden_of = |m: &PhredModel| {
        let mut g = Graph::inference(&m.store);
        let s0 = ContextState::zero(&mut g, &m.generator, batch.batch_size());
        let s1 = m.generator.encode_turn(&mut g, &s0, &batch.turns[0]).unwrap();
        bits(g.value(s1.hidden[0]).data())
    };
    let before = hidden_of(&snap.model);
    let shared_before = group_snapshot(&snap.model, ParamGroup::Shared);
    let gen_before = group_snapshot(&snap.model, ParamGroup::Generator);
    let rec = train_step(&mut snap.model, &cfg, &batch, &mut SeededEngine::new(0), Some(0.8)).unwrap();
    assert!(rec.discriminator_update);
    assert_eq!(group_snapshot(&snap.model, ParamGroup::Generator), gen_before);
    assert_ne!(group_snapshot(&snap.model, ParamGroup::Shared), shared_before);
    assert_ne!(hidden_of(&snap.model), before);
}

#[test]
fn attribute_variant_never_builds_attribute_losses() {
    let cfg = TrainConfig::default();
    let (mut snap, convs) = toy_snapshot(Variant::PhredganA, cfg.clone());
    let batch = first_batch(&convs, &snap.model, 4);
    let rec = train_step(&mut snap.model, &cfg, &batch, &mut SeededEngine::new(0), None).unwrap();
    assert!(rec.d_att_loss.is_none() && rec.g_att_loss.is_none());
    assert!(rec.d_adv_loss.is_some());
    let bad = TrainConfig { lambda_g_att: Some(1.0), ..TrainConfig::default() };
    snap.train = bad;
    assert!(matches!(train(&mut snap, &convs, &TrainOutputs::default()), Err(TrainError::Config(_))));
}

#[test]
fn every_step_records_one_generator_mode() {
    let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
    let (mut snap, convs) = toy_snapshot(Variant::Hredgan, cfg);
    let report = train(&mut snap, &convs, &TrainOutputs::default()).unwrap();
    assert!(!report.steps.is_empty());
    for s in &report.steps {
        assert!(matches!(s.generator_mode, GeneratorMode::MleOnly | GeneratorMode::Full));
        let acc = s.adv_accuracy.unwrap();
        assert_eq!(s.discriminator_update, acc < 0.99);
        assert_eq!(s.generator_mode == GeneratorMode::Full, acc >= 0.75);
    }
}

#[test]
fn same_seed_same_loss_curve() {
    let cfg = TrainConfig { epochs: 3, batch_size: 3, seed: 9, ..TrainConfig::default() };
    let run = || {
        let (mut snap, convs) = toy_snapshot(Variant::PhredganD, cfg.clone());
        let r = train(&mut snap, &convs, &TrainOutputs::default()).unwrap();
        (r.steps, snap.model.store.iter().map(|(_, _, t)| bits(t.data())).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
    let (mut snap, convs) = toy_snapshot(Variant::PhredganD, TrainConfig { seed: 10, ..cfg.clone() });
    let other = train(&mut snap, &convs, &TrainOutputs::default()).unwrap();
    assert_ne!(other.steps, run().0);
}

#[test]
fn log_and_snapshot_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 5, checkpoint_every: 1, ..TrainConfig::default() };
    let (mut snap, convs) = toy_snapshot(Variant::PhredganA, cfg);
    let report = train(&mut snap, &convs, &TrainOutputs::in_dir(dir.path())).unwrap();
    let log = read_log(&dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log, report.steps);
    assert_eq!(report.checkpoints.len(), 3);
    for p in &report.checkpoints {
        assert!(p.join("manifest.json").is_file(), "{}", p.display());
    }
    assert!(dir.path().join("snapshot").join("params").is_dir());
}

#[test]
fn divergence_aborts_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (mut snap, convs) = toy_snapshot(Variant::Phred, TrainConfig { epochs: 1, ..TrainConfig::default() });
    let id = snap.model.generator.output.weight;
    snap.model.store.get_mut(id).data_mut()[0] = f32::NAN;
    match train(&mut snap, &convs, &TrainOutputs::in_dir(dir.path())) {
        Err(TrainError::Diverged { step, checkpoint: Some(p), .. }) => {
            assert_eq!(step, 1);
            assert!(p.join("manifest.json").is_file());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn phred_memorizes_toy_corpus() {
    let started = std::time::Instant::now();
    let cfg = TrainConfig { epochs: 500, batch_size: 10, learning_rate: 1.0, ..TrainConfig::default() };
    let (mut snap, convs) = toy_snapshot(Variant::Phred, cfg);
    snap.model = PhredModel::new(
        &phredgan::config::ModelConfig {
            embedding_dim: 16,
            attribute_dim: 8,
            hidden_size: 48,
            attention_dim: 32,
            noise_mode: NoiseMode::Utterance,
            max_turns: 5,
            max_len: 20,
            ..snap.model.config.clone()
        },
        snap.vocab.len(),
        snap.attributes.len(),
        7,
    )
    .unwrap();
    train(&mut snap, &convs, &TrainOutputs::default()).unwrap();
    let ppl = teacher_forced_nll(&snap.model, &convs, 10, true, 1).unwrap().perplexity().unwrap();
    assert!(ppl < 1.5, "perplexity {ppl}");
    assert!(started.elapsed().as_secs() < 600);
}
