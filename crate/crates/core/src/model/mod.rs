pub mod cache;
pub mod corpus;
pub mod mask;
pub mod planted;
pub mod spec;
pub mod tiny;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use cache::KVCache;
pub use mask::SkipMask;
pub use planted::PlantedModel;
pub use spec::{Backend, DomainLayout, ModelSpec, EOS_TOKEN};
pub use tiny::TinyTransformer;

/// Independent deterministic RNG stream: every weight tensor, corpus, and
/// sampler draws from its own stream of the model seed, so adding one
/// consumer never shifts the values another one sees.
pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Logits per processed position plus the residual-stream state at the last
/// position (the "last hidden vector" routing works on).
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f32>>,
    pub last_hidden: Vec<f32>,
}

/// A hidden state tagged with the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenVector {
    pub values: Vec<f32>,
    pub source_prompt_id: String,
}

#[derive(Debug, Clone)]
pub enum Model {
    Tiny(TinyTransformer),
    Planted(PlantedModel),
}

pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    match spec.backend {
        Backend::TinyTransformer => Ok(Model::Tiny(TinyTransformer::build(spec)?)),
        Backend::Planted => Ok(Model::Planted(PlantedModel::build(spec)?)),
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            Model::Tiny(m) => m.spec(),
            Model::Planted(m) => m.spec(),
        }
    }

    pub fn num_sublayers(&self) -> usize {
        self.spec().num_sublayers()
    }

    /// The all-zeros mask: nothing skipped, the verification model.
    pub fn full_mask(&self) -> SkipMask {
        SkipMask::zeros(self.num_sublayers())
    }

    pub fn new_cache(&self, mask: SkipMask) -> KVCache {
        KVCache::new(mask, self.spec().num_blocks)
    }

    /// Vocabulary layout of the planted backend, if that is what this is.
    pub fn layout(&self) -> Option<&DomainLayout> {
        match self {
            Model::Tiny(_) => None,
            Model::Planted(m) => Some(m.layout()),
        }
    }

    /// Process `tokens` after the cache's current prefix, computing only the
    /// sublayers the mask retains.
    pub fn forward(
        &self,
        tokens: &[u32],
        mask: &SkipMask,
        cache: &mut KVCache,
    ) -> Result<ForwardOutput> {
        match self {
            Model::Tiny(m) => m.forward(tokens, mask, cache),
            Model::Planted(m) => m.forward(tokens, mask, cache),
        }
    }

    /// Test diagnostic; see the backend implementations.
    pub fn perturb_sublayer(&mut self, i: usize, delta: f32) {
        match self {
            Model::Tiny(m) => m.perturb_sublayer(i, delta),
            Model::Planted(m) => m.perturb_sublayer(i, delta),
        }
    }
}

/// First index achieving the maximum. Every decode path in this crate picks
/// tokens through this one function so tie-breaking can never diverge.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Token-by-token full-model argmax continuation: the reference output that
/// speculative decoding must reproduce exactly. Stops early when the model
/// emits EOS; the EOS token itself is not part of the continuation.
pub fn greedy_decode(model: &Model, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mask = model.full_mask();
    let mut cache = model.new_cache(mask.clone());
    let mut out = Vec::new();
    let mut logits = model
        .forward(prompt, &mask, &mut cache)?
        .logits
        .pop()
        .expect("nonempty forward");
    for _ in 0..max_new {
        let next = argmax(&logits);
        if next == EOS_TOKEN {
            break;
        }
        out.push(next);
        logits = model
            .forward(&[next], &mask, &mut cache)?
            .logits
            .pop()
            .expect("nonempty forward");
    }
    Ok(out)
}

/// Full-model residual state at the last prompt token: the vector the router
/// clusters and matches on.
pub fn extract_last_hidden(model: &Model, prompt: &corpus::Prompt) -> Result<HiddenVector> {
    if prompt.tokens.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mask = model.full_mask();
    let mut cache = model.new_cache(mask.clone());
    let out = model.forward(&prompt.tokens, &mask, &mut cache)?;
    if out.last_hidden.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("last hidden vector"));
    }
    Ok(HiddenVector {
        values: out.last_hidden,
        source_prompt_id: prompt.prompt_id.clone(),
    })
}

/// Ground-truth mask for a planted domain: skip exactly its gated sublayers.
pub fn planted_optimal_mask(model: &Model, domain: usize) -> Result<SkipMask> {
    match model {
        Model::Tiny(_) => Err(Error::NotPlanted),
        Model::Planted(m) => m.optimal_mask(domain),
    }
}
