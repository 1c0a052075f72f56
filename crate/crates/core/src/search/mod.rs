//! Black-box search for a domain's skip mask.
//!
//! The mask space {0,1}^L is relaxed to the box [0,1]^L; a Gaussian process
//! models the objective over the box, an acquisition function proposes the
//! next relaxed point, and the point is binarized back to a mask before the
//! (expensive) objective runs. The objective is the average decode cost per
//! emitted token over a handful of representative prompts — wall time on a
//! clock, or a deterministic analytic price for CI and experiments.

pub mod gp;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{speculative_generate, DecodeStats, DraftConfig};
use crate::error::{Error, Result};
use crate::model::{corpus::Prompt, substream, Model, SkipMask};
use gp::{expected_improvement, ucb_score, Gp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquisition {
    ExpectedImprovement,
    UpperConfidenceBound,
}

#[derive(Debug, Clone)]
pub struct BOConfig {
    /// Total objective-evaluation budget, initial random points included.
    pub iterations: usize,
    pub init_random_points: usize,
    /// Defaults to 0.35·√L when unset: distances in [0,1]^L grow like √L.
    pub kernel_lengthscale: Option<f64>,
    /// Observation noise in standardized-objective units.
    pub noise_variance: f64,
    pub acquisition: Acquisition,
    /// UCB exploration weight; unused by EI.
    pub ucb_kappa: f64,
    pub binarize_threshold: f64,
    pub seed: u64,
    /// Random candidates scored per proposal, on top of the incumbent's
    /// one-bit flips.
    pub candidate_pool_size: usize,
}

impl Default for BOConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            init_random_points: 20,
            kernel_lengthscale: None,
            noise_variance: 1e-6,
            acquisition: Acquisition::ExpectedImprovement,
            ucb_kappa: 2.0,
            binarize_threshold: 0.5,
            seed: 0,
            candidate_pool_size: 64,
        }
    }
}

impl BOConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParam("iterations must be >= 1".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::InvalidParam(format!(
                "binarize threshold must be in (0,1), got {}",
                self.binarize_threshold
            )));
        }
        if self.candidate_pool_size == 0 {
            return Err(Error::InvalidParam("candidate pool must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lengthscale_for(&self, dims: usize) -> f64 {
        self.kernel_lengthscale
            .unwrap_or_else(|| 0.35 * (dims as f64).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// Time the decodes. Honest but noisy; never used in tests.
    Wallclock,
    /// Deterministic sublayer-count cost model, attention priced at β MLPs.
    Analytic,
}

/// The function being minimized: average decode cost per emitted token over
/// a fixed set of representative prompts.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    pub mode: ObjectiveMode,
    pub anchor_samples: Vec<Prompt>,
    pub draft_cfg: DraftConfig,
    pub max_new: usize,
    /// Attention/MLP latency ratio for the analytic price.
    pub beta: f64,
}

impl ObjectiveSpec {
    pub fn analytic(
        anchor_samples: Vec<Prompt>,
        draft_cfg: DraftConfig,
        max_new: usize,
        beta: f64,
    ) -> Self {
        Self {
            mode: ObjectiveMode::Analytic,
            anchor_samples,
            draft_cfg,
            max_new,
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_samples.is_empty() {
            return Err(Error::EmptyInput("objective needs anchor samples"));
        }
        if self.max_new == 0 {
            return Err(Error::InvalidParam("objective max_new must be >= 1".into()));
        }
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidParam(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        self.draft_cfg.validate()
    }
}

/// Decode cost per emitted token for one mask.
///
/// Analytic mode prices a draft forward at (retained attention × β +
/// retained MLP) sublayers and a verification pass at the full
/// num_blocks·(β+1), then divides total price by tokens emitted. Wallclock
/// mode divides elapsed seconds by tokens emitted.
pub fn evaluate_objective(model: &Model, mask: &SkipMask, spec: &ObjectiveSpec) -> Result<f64> {
    spec.validate()?;
    let mut stats = DecodeStats::default();
    let start = Instant::now();
    for prompt in &spec.anchor_samples {
        let res = speculative_generate(model, &prompt.tokens, mask, &spec.draft_cfg, spec.max_new)?;
        stats.merge(&res.stats);
    }
    let elapsed = start.elapsed().as_secs_f64();
    if stats.emitted_tokens == 0 {
        return Err(Error::InvalidParam(
            "objective runs emitted no tokens".into(),
        ));
    }
    match spec.mode {
        ObjectiveMode::Wallclock => Ok(elapsed / stats.emitted_tokens as f64),
        ObjectiveMode::Analytic => {
            let blocks = (mask.len() / 2) as f64;
            let retained_attn = blocks * (1.0 - mask.attn_skip_ratio());
            let retained_mlp = blocks * (1.0 - mask.mlp_skip_ratio());
            let draft_cost = retained_attn * spec.beta + retained_mlp;
            let verify_cost = blocks * (spec.beta + 1.0);
            let total = draft_cost * stats.drafted_tokens as f64
                + verify_cost * stats.target_forward_passes as f64;
            Ok(total / stats.emitted_tokens as f64)
        }
    }
}

/// Threshold a relaxed point back into mask space: bit i = 1 iff
/// point[i] ≥ threshold.
pub fn binarize(point: &[f64], threshold: f64) -> SkipMask {
    SkipMask::from_bits(point.iter().map(|&p| p >= threshold).collect())
}

/// Rank acquisition candidates: `candidate_pool_size` sparsity-stratified
/// corners plus every one-bit flip of each elite mask. Blind proposals
/// never skip more than half the sublayers — heavier masks are degenerate
/// by construction and would otherwise dominate uniform sampling — but
/// remain reachable through the flip neighborhood. Returns candidates in
/// descending acquisition order so callers can walk past duplicates.
pub fn propose(
    gp: &Gp,
    elites: &[SkipMask],
    best_value: f64,
    cfg: &BOConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let dims = elites
        .first()
        .ok_or(Error::EmptyInput("propose needs at least one elite mask"))?
        .len();
    let mut candidates: Vec<Vec<f64>> = (0..cfg.candidate_pool_size)
        .map(|_| corner_of(&stratified_mask(dims, rng)))
        .collect();
    for elite in elites {
        for i in 0..dims {
            let mut flip = corner_of(elite);
            flip[i] = 1.0 - flip[i];
            candidates.push(flip);
        }
    }
    let mut scored: Vec<(f64, Vec<f64>)> = candidates
        .into_iter()
        .map(|c| {
            let (mean, var) = gp.posterior(&c)?;
            let score = match cfg.acquisition {
                Acquisition::ExpectedImprovement => expected_improvement(mean, var, best_value),
                Acquisition::UpperConfidenceBound => ucb_score(mean, var, cfg.ucb_kappa),
            };
            Ok((score, c))
        })
        .collect::<Result<_>>()?;
    // Stable order: score descending, position as tiebreak (sort_by is
    // stable, so equal scores keep their generation order).
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().map(|(_, c)| c).collect())
}

#[derive(Debug, Clone)]
pub struct TraceStep {
    pub iteration: usize,
    /// The relaxed point that was proposed (for init points, the corner).
    pub point: Vec<f64>,
    pub mask: String,
    pub objective: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SearchTrace {
    pub steps: Vec<TraceStep>,
}

impl SearchTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,mask,objective,best\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{:.9},{:.9}\n",
                s.iteration, s.mask, s.objective, s.best_so_far
            ));
        }
        out
    }

    pub fn best(&self) -> Option<&TraceStep> {
        self.steps
            .iter()
            .min_by(|a, b| a.objective.total_cmp(&b.objective))
    }
}

/// Seeded mask draw, stratified by sparsity: the skip count is uniform over
/// 0..=dims/2 and the skipped positions are a uniform subset of that size.
/// Uniform per-bit sampling would concentrate every draw near half-skipped
/// masks and never probe the sparse region where useful masks live.
fn stratified_mask(dims: usize, rng: &mut ChaCha8Rng) -> SkipMask {
    let k = rng.random_range(0..=dims / 2);
    let picks = rand::seq::index::sample(rng, dims, k);
    let mut bits = vec![false; dims];
    for i in picks {
        bits[i] = true;
    }
    SkipMask::from_bits(bits)
}

fn corner_of(mask: &SkipMask) -> Vec<f64> {
    mask.bits()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect()
}

/// Bayesian-optimization search over masks. Evaluates `init_random_points`
/// seeded masks, then loops propose → binarize → evaluate → refit until the
/// evaluation budget is spent. Already-evaluated masks are skipped in favor
/// of the next-ranked candidate, never re-evaluated. Returns the best
/// evaluated mask and the full trace.
pub fn search(
    model: &Model,
    objective: &ObjectiveSpec,
    cfg: &BOConfig,
) -> Result<(SkipMask, SearchTrace)> {
    cfg.validate()?;
    objective.validate()?;
    let dims = model.num_sublayers();
    let mut rng = substream(cfg.seed, 7000);
    let mut gp = Gp::new(cfg.lengthscale_for(dims), cfg.noise_variance)?;
    let mut trace = SearchTrace::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut best: Option<(f64, SkipMask)> = None;

    let evaluate = |mask: SkipMask,
                    point: Vec<f64>,
                    iteration: usize,
                    gp: &mut Gp,
                    trace: &mut SearchTrace,
                    best: &mut Option<(f64, SkipMask)>|
     -> Result<()> {
        let value = evaluate_objective(model, &mask, objective)?;
        // The GP observes the corner actually evaluated, not the relaxed
        // proposal: objective values belong to masks.
        gp.observe(corner_of(&mask), value)?;
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            *best = Some((value, mask.clone()));
        }
        trace.steps.push(TraceStep {
            iteration,
            point,
            mask: mask.to_bitstring(),
            objective: value,
            best_so_far: best.as_ref().expect("just set").0,
        });
        Ok(())
    };

    let mut iteration = 0;
    let mut stalled_draws = 0usize;
    while iteration < cfg.iterations.min(cfg.init_random_points) {
        let mask = stratified_mask(dims, &mut rng);
        if !seen.insert(mask.to_bitstring()) {
            // Tiny mask spaces repeat quickly; skip without spending budget.
            stalled_draws += 1;
            if stalled_draws >= 10_000 {
                break;
            }
            continue;
        }
        evaluate(
            mask.clone(),
            corner_of(&mask),
            iteration,
            &mut gp,
            &mut trace,
            &mut best,
        )?;
        iteration += 1;
    }

    while iteration < cfg.iterations {
        gp.fit()?;
        let best_value = best.as_ref().expect("initialized above").0;
        // Flip neighborhoods around the best few observed masks: the final
        // approach to an optimum is usually one bit at a time, and a single
        // incumbent would anchor all local moves to one basin.
        let mut ranked_steps: Vec<&TraceStep> = trace.steps.iter().collect();
        ranked_steps.sort_by(|a, b| a.objective.total_cmp(&b.objective));
        let elites: Vec<SkipMask> = ranked_steps
            .iter()
            .take(3)
            .map(|s| SkipMask::from_bitstring(&s.mask))
            .collect::<Result<_>>()?;
        let ranked = propose(&gp, &elites, best_value, cfg, &mut rng)?;
        let mut chosen: Option<(SkipMask, Vec<f64>)> = None;
        for point in ranked {
            let mask = binarize(&point, cfg.binarize_threshold);
            if !seen.contains(&mask.to_bitstring()) {
                chosen = Some((mask, point));
                break;
            }
        }
        if chosen.is_none() {
            // Whole pool already explored; fall back to fresh random masks.
            for _ in 0..1000 {
                let mask = stratified_mask(dims, &mut rng);
                if !seen.contains(&mask.to_bitstring()) {
                    let point = corner_of(&mask);
                    chosen = Some((mask, point));
                    break;
                }
            }
        }
        let Some((mask, point)) = chosen else {
            break; // space effectively exhausted
        };
        seen.insert(mask.to_bitstring());
        evaluate(
            mask.clone(),
            point,
            iteration,
            &mut gp,
            &mut trace,
            &mut best,
        )?;
        iteration += 1;
    }

    let (_, mask) = best.ok_or(Error::EmptyInput("search evaluated nothing"))?;
    Ok((mask, trace))
}

/// Equal-budget baseline: evaluate `iterations` distinct seeded random
/// masks and keep the best. Draws from the same sparsity-stratified
/// distribution the optimizer proposes from, so the comparison isolates
/// what the surrogate model adds.
pub fn random_search(
    model: &Model,
    objective: &ObjectiveSpec,
    cfg: &BOConfig,
) -> Result<(SkipMask, SearchTrace)> {
    cfg.validate()?;
    objective.validate()?;
    let dims = model.num_sublayers();
    let mut rng = substream(cfg.seed, 8000);
    let mut trace = SearchTrace::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut best: Option<(f64, SkipMask)> = None;
    let mut iteration = 0;
    let mut stalled = 0;
    while iteration < cfg.iterations && stalled < 10_000 {
        let mask = stratified_mask(dims, &mut rng);
        if !seen.insert(mask.to_bitstring()) {
            stalled += 1;
            continue;
        }
        stalled = 0;
        let value = evaluate_objective(model, &mask, objective)?;
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, mask.clone()));
        }
        trace.steps.push(TraceStep {
            iteration,
            point: corner_of(&mask),
            mask: mask.to_bitstring(),
            objective: value,
            best_so_far: best.as_ref().expect("just set").0,
        });
        iteration += 1;
    }
    let (_, mask) = best.ok_or(Error::EmptyInput("search evaluated nothing"))?;
    Ok((mask, trace))
}
