mod common;

use common::*;
use phredgan::checkpoint::{decode_blob, CheckpointError, Snapshot};
use phredgan::config::{TrainConfig, Variant};
use phredgan::inference::{generate, ContextTurn, GenerateRequest};
use phredgan::training::{teacher_forced_nll, train, TrainOutputs};

fn outputs(snap: &Snapshot, convs: &[phredgan::corpus::Conversation]) -> (u64, Vec<Vec<usize>>, Vec<u64>) {
    let nll = teacher_forced_nll(&snap.model, convs, 4, true, 2).unwrap();
    let c = &convs[3];
    let req = GenerateRequest {
        context: c.turns[..2].iter().map(|t| ContextTurn { attribute: t.attribute, tokens: t.tokens.clone() }).collect(),
        target: c.turns[2].attribute,
        num_candidates: 5,
        max_len: None,
        alpha: None,
        seed: 7,
    };
    let cands = generate(&snap.model, &req).unwrap();
    (nll.nll.to_bits(), cands.iter().map(|c| c.tokens.clone()).collect(), cands.iter().map(|c| c.rank_score.to_bits()).collect())
}

#[test]
fn save_load_reproduces_outputs_bitwise() {
    for variant in Variant::ALL {
        let (mut snap, convs) = toy_snapshot(variant, TrainConfig { epochs: 2, batch_size: 5, ..TrainConfig::default() });
        train(&mut snap, &convs, &TrainOutputs::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap");
        snap.save(&path).unwrap();
        let loaded = Snapshot::load(&path).unwrap();
        assert_eq!(loaded.step, snap.step);
        assert_eq!(loaded.run_config(), snap.run_config());
        assert_eq!(loaded.vocab, snap.vocab);
        for ((_, na, ta), (_, nb, tb)) in snap.model.store.iter().zip(loaded.model.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(bits(ta.data()), bits(tb.data()), "{na}");
        }
        assert_eq!(outputs(&snap, &convs), outputs(&loaded, &convs), "{variant}");
        // Saving over an existing snapshot replaces it.
        snap.save(&path).unwrap();
        Snapshot::load(&path).unwrap();
    }
}

#[test]
fn tampering_is_detected() {
    let (snap, _) = toy_snapshot(Variant::PhredganD, TrainConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap");
    snap.save(&path).unwrap();
    let blob = path.join("params").join("generator.output.weight.bin");
    let bytes = std::fs::read(&blob).unwrap();
    assert!(decode_blob(&bytes).is_ok());

    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Snapshot::load(&path), Err(CheckpointError::Blob(_))));
    std::fs::write(&blob, &bytes).unwrap();

    let attrs = path.join("attributes.txt");
    let text = std::fs::read_to_string(&attrs).unwrap();
    std::fs::write(&attrs, "helper\nquestioner\n").unwrap();
    assert!(matches!(Snapshot::load(&path), Err(CheckpointError::Mismatch(_))));
    std::fs::write(&attrs, text).unwrap();

    let vocab = path.join("vocab.txt");
    let text = std::fs::read_to_string(&vocab).unwrap();
    std::fs::write(&vocab, text.replacen("mount", "mount2", 1)).unwrap();
    assert!(matches!(Snapshot::load(&path), Err(CheckpointError::Mismatch(_))));
    std::fs::write(&vocab, text).unwrap();

    let manifest = path.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["extra"] = serde_json::json!(1);
    std::fs::write(&manifest, v.to_string()).unwrap();
    assert!(matches!(Snapshot::load(&path), Err(CheckpointError::Manifest(_))));
    std::fs::write(&manifest, &text).unwrap();

    std::fs::remove_file(path.join("params").join("generator.output.bias.bin")).unwrap();
    assert!(matches!(Snapshot::load(&path), Err(CheckpointError::Io { .. })));
}
