//! The persona HRED generator and its discriminators over one parameter
//! store.
//!
//! Parameters are grouped by name prefix:
//!
//! * `shared.*` — word and attribute embeddings, the utterance encoder, its
//!   summary projection and the context RNN. The discriminators read these
//!   through the same [`ParamId`]s the generator uses, so an update made on
//!   behalf of either side is seen by both.
//! * `generator.*` — attention, decoder and output projection.
//! * `adversary.*` — word-level adversarial discriminator.
//! * `attribute.*` — utterance-level attribute discriminator.

mod discriminators;
mod generator;

pub use discriminators::{adv_accuracy, AdvDiscriminator, AttDiscriminator};
pub use generator::{sample_noise, ContextState, Generator, NoiseDraw};

use crate::config::{ModelConfig, Variant};
use crate::tensor::{ParamId, ParameterStore, SeededEngine, TensorError};

/// Which optimizer update a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Shared,
    Generator,
    Adversary,
    AttributeDiscriminator,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("shared") => ParamGroup::Shared,
            Some("generator") => ParamGroup::Generator,
            Some("adversary") => ParamGroup::Adversary,
            Some("attribute") => ParamGroup::AttributeDiscriminator,
            _ => panic!("parameter `{name}` has no group prefix"),
        }
    }

    /// Groups moved by the generator update.
    pub fn in_generator_update(self) -> bool {
        matches!(self, ParamGroup::Shared | ParamGroup::Generator)
    }

    /// Groups moved by the discriminator update.
    pub fn in_discriminator_update(self) -> bool {
        matches!(self, ParamGroup::Shared | ParamGroup::Adversary | ParamGroup::AttributeDiscriminator)
    }
}

#[derive(Debug, Clone)]
pub struct PhredModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub num_attributes: usize,
    pub store: ParameterStore,
    pub generator: Generator,
    pub adversary: Option<AdvDiscriminator>,
    pub attribute_discriminator: Option<AttDiscriminator>,
}

impl PhredModel {
    /// Fresh Xavier-initialized parameters for `vocab_size` words and
    /// `num_attributes` attributes.
    pub fn new(config: &ModelConfig, vocab_size: usize, num_attributes: usize, seed: u64) -> Result<Self, TensorError> {
        if vocab_size <= crate::corpus::RESERVED.len() || num_attributes == 0 {
            return Err(TensorError::InvalidArgument {
                op: "PhredModel::new",
                msg: format!("vocabulary {vocab_size} / attributes {num_attributes} too small"),
            });
        }
        let mut rng = SeededEngine::with_stream(seed, 0x696e_6974);
        let mut store = ParameterStore::new();
        let generator = Generator::new(&mut store, config, vocab_size, num_attributes, &mut rng)?;
        let variant = config.variant;
        let adversary = if variant.has_adversary() {
            Some(AdvDiscriminator::new(&mut store, config, &generator, variant.adversary_conditioned(), &mut rng)?)
        } else {
            None
        };
        let attribute_discriminator = if variant.has_attribute_discriminator() {
            Some(AttDiscriminator::new(&mut store, config, &generator, num_attributes, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            vocab_size,
            num_attributes,
            store,
            generator,
            adversary,
            attribute_discriminator,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        ParamGroup::of(self.store.name(id))
    }
}
