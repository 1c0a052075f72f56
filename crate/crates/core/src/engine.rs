//! Draft-then-verify speculative decoding.
//!
//! The draft model is the target model with some sublayers skipped, so a
//! draft costs a fraction of a full forward. Verification runs the full
//! model once over the whole draft, accepts the longest prefix that matches
//! the full model's own argmax choices, and takes the argmax at the first
//! mismatch as a free "bonus" token. Because every emitted token is, by
//! construction, exactly what full-model greedy decoding would have picked,
//! the output sequence is bit-identical to [`greedy_decode`] — the only
//! thing speculation changes is how many forward passes it took.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{argmax, KVCache, Model, SkipMask, EOS_TOKEN};

/// How the drafting loop decides to stop proposing tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraftMode {
    /// Always draft `max_draft_len` tokens (unless EOS or budget intervenes).
    Fixed,
    /// Stop after the first token whose top softmax probability falls below
    /// `confidence_threshold`: a shaky draft model shouldn't dig deeper.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DraftConfig {
    /// Draft window γ: upper bound on tokens proposed per verification pass.
    pub max_draft_len: usize,
    /// Confidence floor τ for adaptive mode, in [0, 1].
    pub confidence_threshold: f64,
    pub mode: DraftMode,
}

impl Default for DraftConfig {
    fn default() -> Self {
        Self::adaptive(8, 0.4)
    }
}

impl DraftConfig {
    pub fn fixed(max_draft_len: usize) -> Self {
        Self {
            max_draft_len,
            confidence_threshold: 0.0,
            mode: DraftMode::Fixed,
        }
    }

    pub fn adaptive(max_draft_len: usize, confidence_threshold: f64) -> Self {
        Self {
            max_draft_len,
            confidence_threshold,
            mode: DraftMode::Adaptive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_draft_len == 0 {
            return Err(Error::InvalidParam("max_draft_len must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidParam(format!(
                "confidence_threshold must be in [0,1], got {}",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Counters for one or more decoding sessions.
///
/// `emitted_tokens` counts everything a verification pass produced,
/// including a terminating EOS; the returned token sequence excludes EOS.
/// Every pass emits its accepted prefix plus exactly one target-chosen
/// token, so `emitted_tokens == accepted_tokens + target_forward_passes`
/// always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub drafted_tokens: u64,
    pub accepted_tokens: u64,
    pub target_forward_passes: u64,
    pub emitted_tokens: u64,
    pub wallclock_draft: Duration,
    pub wallclock_verify: Duration,
}

impl DecodeStats {
    /// Mean generated length M = emitted / passes. `None` before any pass.
    pub fn mean_accepted_len(&self) -> Option<f64> {
        (self.target_forward_passes > 0)
            .then(|| self.emitted_tokens as f64 / self.target_forward_passes as f64)
    }

    /// Acceptance rate α = accepted / drafted, bonus tokens excluded.
    /// `None` when nothing was drafted (e.g. plain autoregressive runs).
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.drafted_tokens > 0).then(|| self.accepted_tokens as f64 / self.drafted_tokens as f64)
    }

    pub fn merge(&mut self, other: &DecodeStats) {
        self.drafted_tokens += other.drafted_tokens;
        self.accepted_tokens += other.accepted_tokens;
        self.target_forward_passes += other.target_forward_passes;
        self.emitted_tokens += other.emitted_tokens;
        self.wallclock_draft += other.wallclock_draft;
        self.wallclock_verify += other.wallclock_verify;
    }
}

#[derive(Debug, Clone)]
pub struct SpecResult {
    /// The continuation, EOS excluded — bit-identical to full-model greedy.
    pub tokens: Vec<u32>,
    pub stats: DecodeStats,
}

/// Top softmax probability of a logit vector, in f64 for stability.
fn top_probability(logits: &[f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let total: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    1.0 / total
}

/// Propose up to `budget` tokens with the masked model, continuing from the
/// cache. The cache ends one token behind the proposal tip (the final draft
/// token is returned but never processed). EOS is never proposed: wanting it
/// ends the draft, and the verifier gets to decide about stopping.
fn draft_with_cache(
    model: &Model,
    pending: &[u32],
    mask: &SkipMask,
    cache: &mut KVCache,
    cfg: &DraftConfig,
    budget: usize,
) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(budget);
    if budget == 0 {
        // Only happens on a one-token final round; the verifier handles it.
        return Ok(out);
    }
    let mut logits = model
        .forward(pending, mask, cache)?
        .logits
        .pop()
        .expect("nonempty forward");
    loop {
        let confidence = top_probability(&logits);
        let next = argmax(&logits);
        if next == EOS_TOKEN {
            break;
        }
        out.push(next);
        if out.len() == budget {
            break;
        }
        if cfg.mode == DraftMode::Adaptive && confidence < cfg.confidence_threshold {
            break;
        }
        logits = model
            .forward(&[next], mask, cache)?
            .logits
            .pop()
            .expect("nonempty forward");
    }
    Ok(out)
}

/// Standalone drafting: argmax continuation of `context` under the masked
/// model, length ≤ γ, with the adaptive early exit if configured.
pub fn draft(
    model: &Model,
    context: &[u32],
    mask: &SkipMask,
    cfg: &DraftConfig,
) -> Result<Vec<u32>> {
    if context.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    cfg.validate()?;
    let mut cache = model.new_cache(mask.clone());
    draft_with_cache(model, context, mask, &mut cache, cfg, cfg.max_draft_len)
}

/// Standalone verification: one full-model pass over `context ++ draft`.
/// Returns the length of the longest draft prefix matching the full model's
/// argmax at each position, and the full model's argmax at the first
/// mismatch (or after the draft) — the bonus token every pass emits.
pub fn verify(model: &Model, context: &[u32], draft_tokens: &[u32]) -> Result<(usize, u32)> {
    if context.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if draft_tokens.is_empty() {
        return Err(Error::EmptyInput("verify needs at least one draft token"));
    }
    let mask = model.full_mask();
    let mut cache = model.new_cache(mask.clone());
    let chunk: Vec<u32> = context.iter().chain(draft_tokens).copied().collect();
    let out = model.forward(&chunk, &mask, &mut cache)?;
    let base = context.len() - 1;
    let mut accepted = 0;
    while accepted < draft_tokens.len() {
        if argmax(&out.logits[base + accepted]) != draft_tokens[accepted] {
            break;
        }
        accepted += 1;
    }
    Ok((accepted, argmax(&out.logits[base + accepted])))
}

/// Speculative generation: repeat draft→verify until `max_new` tokens are
/// out or the full model chooses EOS. Both models keep KV caches across
/// rounds; rejected draft positions are rolled back, never recomputed.
pub fn speculative_generate(
    model: &Model,
    prompt: &[u32],
    mask: &SkipMask,
    draft_cfg: &DraftConfig,
    max_new: usize,
) -> Result<SpecResult> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    draft_cfg.validate()?;
    let mut stats = DecodeStats::default();
    if max_new == 0 {
        return Ok(SpecResult {
            tokens: Vec::new(),
            stats,
        });
    }

    let full = model.full_mask();
    let mut draft_cache = model.new_cache(mask.clone());
    let mut verify_cache = model.new_cache(full.clone());
    // Prompt plus everything emitted so far: the context both models see.
    let mut seq: Vec<u32> = prompt.to_vec();
    let mut out: Vec<u32> = Vec::with_capacity(max_new);

    loop {
        let remaining = max_new - out.len();
        // A pass emits at most draft+1 tokens; keep that within budget.
        let budget = draft_cfg.max_draft_len.min(remaining.saturating_sub(1));

        let t0 = Instant::now();
        let pending_draft = &seq[draft_cache.len()..];
        let proposal = draft_with_cache(
            model,
            pending_draft,
            mask,
            &mut draft_cache,
            draft_cfg,
            budget,
        )?;
        stats.wallclock_draft += t0.elapsed();
        stats.drafted_tokens += proposal.len() as u64;

        // One target pass over everything the verify cache hasn't seen:
        // previously emitted tokens (at least one) plus the proposal.
        let t1 = Instant::now();
        let chunk: Vec<u32> = seq[verify_cache.len()..]
            .iter()
            .chain(&proposal)
            .copied()
            .collect();
        let logits = model.forward(&chunk, &full, &mut verify_cache)?.logits;
        stats.wallclock_verify += t1.elapsed();
        stats.target_forward_passes += 1;

        let base = chunk.len() - proposal.len() - 1;
        let mut accepted = 0;
        while accepted < proposal.len() {
            if argmax(&logits[base + accepted]) != proposal[accepted] {
                break;
            }
            accepted += 1;
        }
        let bonus = argmax(&logits[base + accepted]);

        stats.accepted_tokens += accepted as u64;
        stats.emitted_tokens += accepted as u64 + 1;
        seq.extend_from_slice(&proposal[..accepted]);
        out.extend_from_slice(&proposal[..accepted]);

        // Roll both caches back to the accepted context. The verify cache
        // stays one token short of `seq` so the next pass has input.
        draft_cache.truncate(seq.len());
        verify_cache.truncate(seq.len());
        if bonus == EOS_TOKEN {
            break;
        }
        seq.push(bonus);
        out.push(bonus);
        if out.len() >= max_new {
            break;
        }
    }

    debug_assert_eq!(
        stats.emitted_tokens,
        stats.accepted_tokens + stats.target_forward_passes
    );
    Ok(SpecResult { tokens: out, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::{default_planted_spec, default_tiny_spec, ModelSpec};
    use crate::model::{build_model, corpus::synth_corpus, greedy_decode, planted_optimal_mask};
    use rand::Rng;

    fn tiny_model() -> Model {
        build_model(&ModelSpec {
            num_blocks: 3,
            hidden_dim: 16,
            ..default_tiny_spec(23)
        })
        .unwrap()
    }

    fn planted_model() -> Model {
        build_model(&default_planted_spec(3, 31).unwrap()).unwrap()
    }

    fn domain_prompt(model: &Model, domain: usize) -> Vec<u32> {
        let layout = model.layout().unwrap();
        synth_corpus(layout, domain, 1, 8, 77).unwrap()[0]
            .tokens
            .clone()
    }

    #[test]
    fn zero_mask_draft_equals_greedy_prefix() {
        let model = planted_model();
        let prompt = domain_prompt(&model, 0);
        let mask = model.full_mask();
        let d = draft(&model, &prompt, &mask, &DraftConfig::fixed(5)).unwrap();
        let g = greedy_decode(&model, &prompt, 5).unwrap();
        assert_eq!(d, g);
    }

    #[test]
    fn gamma_one_drafts_exactly_one_token() {
        let model = tiny_model();
        let prompt = [9u32, 100, 7];
        let d = draft(
            &model,
            &prompt,
            &model.full_mask(),
            &DraftConfig::adaptive(1, 0.0),
        )
        .unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn threshold_one_stops_after_first_token() {
        let model = tiny_model();
        let prompt = [9u32, 100, 7];
        let d = draft(
            &model,
            &prompt,
            &model.full_mask(),
            &DraftConfig::adaptive(6, 1.0),
        )
        .unwrap();
        // An untrained softmax over 256 tokens never puts probability 1.0
        // on anything, so adaptive mode bails right after the first token.
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn verify_accepts_greedy_draft_fully() {
        let model = tiny_model();
        let prompt = [12u32, 50, 31, 4];
        let g = greedy_decode(&model, &prompt, 4).unwrap();
        assert_eq!(g.len(), 4, "test needs an EOS-free continuation");
        let (accepted, bonus) = verify(&model, &prompt, &g).unwrap();
        assert_eq!(accepted, 4);
        assert_eq!(bonus, greedy_decode(&model, &prompt, 5).unwrap()[4]);
    }

    #[test]
    fn verify_rejects_at_first_mismatch() {
        let model = tiny_model();
        let prompt = [12u32, 50, 31, 4];
        let g = greedy_decode(&model, &prompt, 1).unwrap();
        let wrong = if g[0] == 1 { 2 } else { 1 };
        let (accepted, bonus) = verify(&model, &prompt, &[wrong, 5, 5]).unwrap();
        assert_eq!(accepted, 0);
        assert_eq!(bonus, g[0]);
    }

    #[test]
    fn matched_planted_mask_gets_full_acceptance() {
        let model = planted_model();
        let mask = planted_optimal_mask(&model, 1).unwrap();
        let prompt = domain_prompt(&model, 1);
        let res = speculative_generate(&model, &prompt, &mask, &DraftConfig::fixed(4), 40).unwrap();
        assert_eq!(res.tokens, greedy_decode(&model, &prompt, 40).unwrap());
        assert_eq!(res.stats.acceptance_rate(), Some(1.0));
        assert_eq!(res.stats.mean_accepted_len(), Some(5.0));
        assert_eq!(res.stats.drafted_tokens, 32);
        assert_eq!(res.stats.target_forward_passes, 8);
    }

    #[test]
    fn mismatched_mask_is_still_lossless() {
        let model = planted_model();
        let wrong = planted_optimal_mask(&model, 2).unwrap();
        let prompt = domain_prompt(&model, 0);
        let res =
            speculative_generate(&model, &prompt, &wrong, &DraftConfig::fixed(4), 24).unwrap();
        assert_eq!(res.tokens, greedy_decode(&model, &prompt, 24).unwrap());
        let alpha = res.stats.acceptance_rate().unwrap();
        assert!(
            alpha < 1.0,
            "wrong-domain mask should reject some drafts, α={alpha}"
        );
    }

    #[test]
    fn random_masks_are_lossless_on_tiny_backend() {
        let model = tiny_model();
        let mut rng = crate::model::substream(5150, 0);
        for case in 0..12 {
            let bits: Vec<bool> = (0..model.num_sublayers())
                .map(|_| rng.random_range(0..3) == 0)
                .collect();
            let mask = SkipMask::from_bits(bits);
            let prompt: Vec<u32> = (0..6).map(|_| rng.random_range(1..256)).collect();
            let cfg = if case % 2 == 0 {
                DraftConfig::fixed(3)
            } else {
                DraftConfig::adaptive(5, 0.3)
            };
            let res = speculative_generate(&model, &prompt, &mask, &cfg, 16).unwrap();
            let greedy = greedy_decode(&model, &prompt, 16).unwrap();
            assert_eq!(res.tokens, greedy, "case {case} mask {mask}");
            assert_eq!(
                res.stats.emitted_tokens,
                res.stats.accepted_tokens + res.stats.target_forward_passes
            );
        }
    }

    #[test]
    fn eos_right_after_prompt_emits_nothing() {
        let model = planted_model();
        let layout = model.layout().unwrap();
        // A shared-band final token resolves straight to EOS in this backend.
        let prompt = vec![layout.domain_range(0).start, layout.shared_range().start];
        let res = speculative_generate(
            &model,
            &prompt,
            &model.full_mask(),
            &DraftConfig::fixed(4),
            10,
        )
        .unwrap();
        assert_eq!(res.tokens, Vec::<u32>::new());
        assert_eq!(
            greedy_decode(&model, &prompt, 10).unwrap(),
            Vec::<u32>::new()
        );
        assert_eq!(res.stats.emitted_tokens, 1);
        assert_eq!(res.stats.target_forward_passes, 1);
        assert_eq!(res.stats.drafted_tokens, 0);
    }

    #[test]
    fn max_new_zero_is_empty() {
        let model = tiny_model();
        let res = speculative_generate(&model, &[5], &model.full_mask(), &DraftConfig::fixed(2), 0)
            .unwrap();
        assert!(res.tokens.is_empty());
        assert_eq!(res.stats.target_forward_passes, 0);
    }

    #[test]
    fn longer_windows_never_hurt_tokens_per_pass_on_zero_mask() {
        let model = planted_model();
        let prompt = domain_prompt(&model, 2);
        let mask = model.full_mask();
        let mut last = 0.0;
        for gamma in [1usize, 2, 4, 8] {
            let res = speculative_generate(&model, &prompt, &mask, &DraftConfig::fixed(gamma), 24)
                .unwrap();
            let m = res.stats.mean_accepted_len().unwrap();
            assert!(m >= last, "γ={gamma} regressed M: {m} < {last}");
            last = m;
        }
    }

    #[test]
    fn merged_stats_add_up() {
        let mut a = DecodeStats {
            drafted_tokens: 10,
            accepted_tokens: 8,
            target_forward_passes: 3,
            emitted_tokens: 11,
            ..Default::default()
        };
        let b = DecodeStats {
            drafted_tokens: 2,
            accepted_tokens: 1,
            target_forward_passes: 1,
            emitted_tokens: 2,
            ..Default::default()
        };
        a.merge(&b);
        assert_eq!(a.drafted_tokens, 12);
        assert_eq!(a.emitted_tokens, 13);
        assert_eq!(a.mean_accepted_len(), Some(13.0 / 4.0));
        assert_eq!(a.acceptance_rate(), Some(9.0 / 12.0));
    }
}
