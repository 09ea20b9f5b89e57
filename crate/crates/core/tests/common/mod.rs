#![allow(dead_code)]

use phredgan::checkpoint::Snapshot;
use phredgan::config::{ModelConfig, NoiseMode, TrainConfig, Variant};
use phredgan::corpus::{encode_raw, tokenize, AttributeVocabulary, Conversation, RawConversation, RawTurn, Vocabulary};
use phredgan::model::PhredModel;

pub const TOY: [[&str; 3]; 10] = [
    ["how do i mount a drive", "use the mount command", "thanks that worked"],
    ["my wifi is broken", "which card do you have", "an intel one"],
    ["where is the config file", "look in etc", "found it"],
    ["can i upgrade without reboot", "not the kernel", "ok i will reboot"],
    ["sound stopped working", "restart pulseaudio", "it plays again"],
    ["how to list files", "type ls", "that shows them"],
    ["apt says locked", "another install is running", "i will wait"],
    ["what shell is default", "bash on most systems", "good to know"],
    ["screen is too dark", "adjust the brightness key", "much better now"],
    ["who owns this folder", "run ls with l", "root owns it"],
];

pub fn toy_raw() -> Vec<RawConversation> {
    TOY.iter()
        .enumerate()
        .map(|(k, turns)| RawConversation {
            id: format!("toy{k}"),
            turns: turns
                .iter()
                .enumerate()
                .map(|(i, t)| RawTurn { speaker: Some(["questioner", "helper"][i % 2].into()), text: t.to_string() })
                .collect(),
        })
        .collect()
}

pub fn roles() -> AttributeVocabulary {
    AttributeVocabulary::new(vec!["questioner".into(), "helper".into()]).unwrap()
}

pub fn toy_corpus(attributes: &AttributeVocabulary) -> (Vocabulary, Vec<Conversation>) {
    let raw = toy_raw();
    let tokens: Vec<String> = raw.iter().flat_map(|c| c.turns.iter().flat_map(|t| tokenize(&t.text))).collect();
    let vocab = Vocabulary::build(tokens.iter().map(String::as_str), 200).unwrap();
    let (convs, _) = encode_raw(raw, &vocab, attributes).unwrap();
    (vocab, convs)
}

pub fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        embedding_dim: 8,
        attribute_dim: 4,
        hidden_size: 12,
        layers: 1,
        attention_dim: 8,
        noise_mode: NoiseMode::Word,
        noise_std: 1.0,
        max_len: 10,
        max_turns: 3,
        ..ModelConfig::default()
    }
}

pub fn toy_snapshot(variant: Variant, train: TrainConfig) -> (Snapshot, Vec<Conversation>) {
    let attributes = roles();
    let (vocab, convs) = toy_corpus(&attributes);
    let model = PhredModel::new(&small_config(variant), vocab.len(), attributes.len(), 5).unwrap();
    (Snapshot { model, train, vocab, attributes, step: 0 }, convs)
}

pub fn bits(data: &[f32]) -> Vec<u32> {
    data.iter().map(|x| x.to_bits()).collect()
}
