//! Serving modes for stream replay.
//!
//! Every mode decodes the same stream and is checked token-for-token
//! against a per-prompt greedy reference before any timing is reported:
//!
//! - `vanilla`: plain autoregressive decoding, the speed baseline.
//! - `ssd-fixed`: the first stream item's domain mask, used throughout.
//! - `ssd-mixed`: one mask searched up front on anchors pooled from every
//!   domain present in the stream.
//! - `knn-ssd`: per-item routing — classify the prompt's last hidden
//!   vector, decode with that domain's mask.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use skipspec_core::engine::{speculative_generate, DecodeStats, DraftConfig};
use skipspec_core::metrics::RunRecord;
use skipspec_core::model::corpus::Prompt;
use skipspec_core::model::{argmax, extract_last_hidden, Model, SkipMask, EOS_TOKEN};
use skipspec_core::router::{route, Registry, RouterModel};
use skipspec_core::search::{search, BOConfig, ObjectiveMode, ObjectiveSpec, SearchTrace};
use skipspec_core::stream::StreamItem;
use skipspec_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("speculative output for prompt {prompt_id} diverged from the greedy reference")]
    LosslessViolation { prompt_id: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type RunResult<T> = std::result::Result<T, RunError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Vanilla,
    SsdFixed,
    SsdMixed,
    KnnSsd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::SsdFixed => "ssd-fixed",
            Mode::SsdMixed => "ssd-mixed",
            Mode::KnnSsd => "knn-ssd",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Greedy decode with full-model bookkeeping: one target pass per emitted
/// token, nothing drafted. Returns the generated tokens (EOS excluded)
/// and the run record (EOS counted in `passes` like any emitted token).
pub fn run_vanilla(
    model: &Model,
    prompt: &Prompt,
    max_new: usize,
) -> RunResult<(Vec<u32>, RunRecord)> {
    let record = |passes: u64, elapsed_ms: f64| RunRecord {
        prompt_id: prompt.prompt_id.clone(),
        domain: prompt.domain,
        mask_id: "vanilla".into(),
        m: 1.0,
        alpha: None,
        drafted: 0,
        accepted: 0,
        passes,
        draft_ms: 0.0,
        verify_ms: elapsed_ms,
    };
    if max_new == 0 {
        return Ok((Vec::new(), record(0, 0.0)));
    }
    let mask = SkipMask::zeros(model.num_sublayers());
    let mut cache = model.new_cache(mask.clone());
    let started = Instant::now();
    let fwd = model.forward(&prompt.tokens, &mask, &mut cache)?;
    let mut passes = 1u64;
    let mut next = argmax(&fwd.logits[fwd.logits.len() - 1]);
    let mut out = Vec::new();
    while next != EOS_TOKEN {
        out.push(next);
        if out.len() >= max_new {
            break;
        }
        let fwd = model.forward(&[next], &mask, &mut cache)?;
        passes += 1;
        next = argmax(&fwd.logits[0]);
    }
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok((out, record(passes, elapsed_ms)))
}

/// Run-record form of one speculative decode's counters.
pub fn record_from_stats(prompt: &Prompt, mask: &SkipMask, stats: &DecodeStats) -> RunRecord {
    RunRecord {
        prompt_id: prompt.prompt_id.clone(),
        domain: prompt.domain,
        mask_id: mask.to_bitstring(),
        m: stats.mean_accepted_len().unwrap_or(1.0),
        alpha: stats.acceptance_rate(),
        drafted: stats.drafted_tokens,
        accepted: stats.accepted_tokens,
        passes: stats.target_forward_passes,
        draft_ms: stats.wallclock_draft.as_secs_f64() * 1e3,
        verify_ms: stats.wallclock_verify.as_secs_f64() * 1e3,
    }
}

#[derive(Debug, Clone)]
pub struct StreamRunConfig {
    pub mode: Mode,
    pub draft: DraftConfig,
    pub max_new: usize,
    pub beta: f64,
    pub objective: ObjectiveMode,
    /// Budget for the one pooled search `ssd-mixed` runs up front.
    pub pooled_bo: BOConfig,
    /// Anchors pooled per stream domain for that search.
    pub pooled_per_domain: usize,
    /// Shard items across threads. Analytic numbers are unaffected;
    /// wallclock columns are zeroed because contended timing is noise.
    pub parallel: bool,
}

#[derive(Debug, Clone)]
pub struct StreamRunOutput {
    pub records: Vec<RunRecord>,
    /// Paired greedy baseline, one record per stream item, same order.
    pub vanilla: Vec<RunRecord>,
    /// Present for `ssd-mixed`: the pooled search's trace.
    pub pooled_trace: Option<SearchTrace>,
}

/// One mask searched on anchors pooled from every domain in `domains`,
/// taking up to `per_domain` anchor prompts from each in selection order.
fn pooled_mask(
    model: &Model,
    router: &RouterModel,
    corpora: &[Vec<Prompt>],
    domains: &[usize],
    cfg: &StreamRunConfig,
) -> RunResult<(SkipMask, SearchTrace)> {
    let by_id: BTreeMap<&str, &Prompt> = corpora
        .iter()
        .flatten()
        .map(|p| (p.prompt_id.as_str(), p))
        .collect();
    let mut samples = Vec::new();
    for &d in domains {
        let mut taken = 0;
        for a in router.anchors().iter().filter(|a| a.domain == d) {
            let p = by_id.get(a.prompt_id.as_str()).ok_or_else(|| {
                CoreError::InvalidParam(format!(
                    "anchor prompt {} is not in the given corpora",
                    a.prompt_id
                ))
            })?;
            samples.push((*p).clone());
            taken += 1;
            if taken == cfg.pooled_per_domain {
                break;
            }
        }
        if taken == 0 {
            return Err(CoreError::UnknownDomain(d).into());
        }
    }
    let objective = ObjectiveSpec {
        mode: cfg.objective,
        anchor_samples: samples,
        draft_cfg: cfg.draft,
        max_new: cfg.max_new,
        beta: cfg.beta,
    };
    Ok(search(model, &objective, &cfg.pooled_bo)?)
}

/// Decode every stream item under `cfg.mode`, hard-failing the moment any
/// speculative output disagrees with its greedy reference.
pub fn run_stream(
    model: &Model,
    items: &[StreamItem],
    registry: &Registry,
    router: &RouterModel,
    corpora: &[Vec<Prompt>],
    cfg: &StreamRunConfig,
) -> RunResult<StreamRunOutput> {
    if items.is_empty() {
        return Err(CoreError::EmptyInput("stream items").into());
    }
    registry.check_model(model.spec())?;

    let pooled = match cfg.mode {
        Mode::SsdMixed => {
            let mut domains: Vec<usize> = items.iter().map(|it| it.domain).collect();
            domains.sort_unstable();
            domains.dedup();
            Some(pooled_mask(model, router, corpora, &domains, cfg)?)
        }
        _ => None,
    };
    let fixed = match cfg.mode {
        Mode::SsdFixed => Some(registry.mask_for(items[0].domain)?),
        _ => None,
    };

    let decode_one = |item: &StreamItem| -> RunResult<(RunRecord, RunRecord)> {
        let (reference, vanilla_record) = run_vanilla(model, &item.prompt, cfg.max_new)?;
        if cfg.mode == Mode::Vanilla {
            return Ok((vanilla_record.clone(), vanilla_record));
        }
        let mask = match cfg.mode {
            Mode::Vanilla => unreachable!("handled above"),
            Mode::SsdFixed => fixed.clone().expect("set for this mode"),
            Mode::SsdMixed => pooled.as_ref().expect("set for this mode").0.clone(),
            Mode::KnnSsd => {
                let h = extract_last_hidden(model, &item.prompt)?;
                let v: Vec<f64> = h.values.iter().map(|&x| x as f64).collect();
                route(registry, router, model.spec(), &v)?
            }
        };
        let res = speculative_generate(model, &item.prompt.tokens, &mask, &cfg.draft, cfg.max_new)?;
        if res.tokens != reference {
            return Err(RunError::LosslessViolation {
                prompt_id: item.prompt.prompt_id.clone(),
            });
        }
        Ok((
            record_from_stats(&item.prompt, &mask, &res.stats),
            vanilla_record,
        ))
    };

    let pairs: Vec<(RunRecord, RunRecord)> = if cfg.parallel {
        items
            .par_iter()
            .map(decode_one)
            .collect::<RunResult<Vec<_>>>()?
    } else {
        items
            .iter()
            .map(decode_one)
            .collect::<RunResult<Vec<_>>>()?
    };

    let (mut records, mut vanilla): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    if cfg.parallel {
        for r in records.iter_mut().chain(vanilla.iter_mut()) {
            r.draft_ms = 0.0;
            r.verify_ms = 0.0;
        }
    }
    Ok(StreamRunOutput {
        records,
        vanilla,
        pooled_trace: pooled.map(|(_, t)| t),
    })
}
