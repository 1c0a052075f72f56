//! Evaluation math: cost coefficients, the expected-speedup formula, run
//! aggregation, and a 2D projection helper for eyeballing hidden-state
//! clusters.
//!
//! Two speedup notions coexist and both appear in reports:
//!
//! * expected speedup — the closed-form `Mα/((M−1)c+α)` from measured M, α
//!   and the cost coefficient c of the masks in play;
//! * measured speedup — total vanilla cost over total method cost on the
//!   same prompts, in wallclock milliseconds when timing was collected and
//!   in deterministic analytic cost units always.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SkipMask;

/// Draft-forward cost relative to a full forward, remembering which form
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum CostCoefficient {
    /// c = 1 − s: every sublayer priced equally.
    Simple { s: f64, c: f64 },
    /// c = ((1−s_mlp) + (1−s_attn)·β) / (1+β): attention priced β× an MLP.
    Weighted {
        s_mlp: f64,
        s_attn: f64,
        beta: f64,
        c: f64,
    },
}

impl CostCoefficient {
    pub fn value(&self) -> f64 {
        match self {
            CostCoefficient::Simple { c, .. } => *c,
            CostCoefficient::Weighted { c, .. } => *c,
        }
    }
}

/// c = 1 − s, the uniform-layer-cost approximation.
pub fn cost_coefficient_simple(s: f64) -> Result<CostCoefficient> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::InvalidParam(format!(
            "skip ratio must be in [0,1), got {s} (a fully skipped draft model has no cost)"
        )));
    }
    Ok(CostCoefficient::Simple { s, c: 1.0 - s })
}

/// c = ((1−s_mlp) + (1−s_attn)·β) / (1+β), pricing attention sublayers at β
/// times an MLP sublayer. Reduces to 1 − s when β = 1 and the ratios agree.
pub fn cost_coefficient_weighted(s_mlp: f64, s_attn: f64, beta: f64) -> Result<CostCoefficient> {
    for (name, v) in [("s_mlp", s_mlp), ("s_attn", s_attn)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidParam(format!(
                "{name} must be in [0,1], got {v}"
            )));
        }
    }
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::InvalidParam(format!("beta must be > 0, got {beta}")));
    }
    let c = ((1.0 - s_mlp) + (1.0 - s_attn) * beta) / (1.0 + beta);
    Ok(CostCoefficient::Weighted {
        s_mlp,
        s_attn,
        beta,
        c,
    })
}

/// Weighted cost coefficient read off a mask's attention/MLP skip ratios.
pub fn cost_coefficient_of_mask(mask: &SkipMask, beta: f64) -> Result<CostCoefficient> {
    cost_coefficient_weighted(mask.mlp_skip_ratio(), mask.attn_skip_ratio(), beta)
}

/// E(speedup) = Mα / ((M−1)c + α): expected gain of a drafting scheme with
/// mean generated length M, acceptance rate α, and draft cost c.
pub fn expected_speedup(m: f64, alpha: f64, c: f64) -> Result<f64> {
    if m < 1.0 || !m.is_finite() {
        return Err(Error::InvalidParam(format!("M must be >= 1, got {m}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "alpha must be in (0,1], got {alpha}"
        )));
    }
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidParam(format!("c must be in (0,1], got {c}")));
    }
    Ok(m * alpha / ((m - 1.0) * c + alpha))
}

/// One decoding run, as persisted to the runs file (one JSON object per
/// line). `mask_id` is the mask's bitstring, or `"vanilla"` for plain
/// autoregressive baseline runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub prompt_id: String,
    pub domain: usize,
    pub mask_id: String,
    #[serde(rename = "M")]
    pub m: f64,
    pub alpha: Option<f64>,
    pub drafted: u64,
    pub accepted: u64,
    pub passes: u64,
    pub draft_ms: f64,
    pub verify_ms: f64,
}

impl RunRecord {
    /// Tokens this run emitted. Each verification pass emits its accepted
    /// prefix plus one target-chosen token, so this is an identity, not a
    /// stored field.
    pub fn emitted(&self) -> u64 {
        self.accepted + self.passes
    }

    pub fn mask(&self) -> Option<SkipMask> {
        (self.mask_id != "vanilla")
            .then(|| SkipMask::from_bitstring(&self.mask_id))
            .transpose()
            .ok()
            .flatten()
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Analytic cost of one run, in full-forward units: a draft forward costs
/// the mask's weighted cost coefficient, a verification (or vanilla) pass
/// costs 1. Keeping one unit for every mode makes costs directly
/// comparable across records.
pub fn analytic_run_cost(record: &RunRecord, beta: f64) -> Result<f64> {
    match record.mask() {
        Some(mask) => {
            let c = cost_coefficient_of_mask(&mask, beta)?.value();
            Ok(c * record.drafted as f64 + record.passes as f64)
        }
        None if record.mask_id == "vanilla" => Ok(record.passes as f64),
        None => Err(Error::InvalidParam(format!(
            "unparseable mask_id {:?}",
            record.mask_id
        ))),
    }
}

/// One aggregated row of a report: either a single domain or the overall
/// pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `None` for the overall row.
    pub domain: Option<usize>,
    pub runs: u64,
    /// Pooled M = Σ emitted / Σ passes.
    #[serde(rename = "M")]
    pub m: f64,
    /// Pooled α = Σ accepted / Σ drafted; `None` when nothing was drafted.
    pub alpha: Option<f64>,
    /// Pass-weighted mean cost coefficient of the masks used.
    pub cost_coefficient: f64,
    /// Mα/((M−1)c+α) from the pooled values; 1.0 for vanilla rows.
    pub expected_speedup: f64,
    /// Vanilla analytic cost / method analytic cost on these prompts.
    pub measured_speedup_analytic: f64,
    /// Σ vanilla ms / Σ method ms, when both sides carry wallclock timing.
    pub measured_speedup_wallclock: Option<f64>,
    pub tokens_per_sec: Option<f64>,
    pub draft_ms: f64,
    pub verify_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub beta: f64,
    pub overall: ReportRow,
    pub per_domain: Vec<ReportRow>,
}

fn pool_rows(
    domain: Option<usize>,
    records: &[&RunRecord],
    vanilla_ms_total: Option<f64>,
    beta: f64,
) -> Result<ReportRow> {
    let emitted: u64 = records.iter().map(|r| r.emitted()).sum();
    let passes: u64 = records.iter().map(|r| r.passes).sum();
    let drafted: u64 = records.iter().map(|r| r.drafted).sum();
    let accepted: u64 = records.iter().map(|r| r.accepted).sum();
    if passes == 0 {
        return Err(Error::InvalidParam(
            "no verification passes in records".into(),
        ));
    }
    let m = emitted as f64 / passes as f64;
    let alpha = (drafted > 0).then(|| accepted as f64 / drafted as f64);

    // Pass-weighted mean c over masked records; a pure-vanilla pool keeps
    // the full model, c = 1.
    let mut c_weighted = 0.0;
    let mut c_passes = 0u64;
    for r in records {
        if let Some(mask) = r.mask() {
            c_weighted += cost_coefficient_of_mask(&mask, beta)?.value() * r.passes as f64;
            c_passes += r.passes;
        }
    }
    let c = if c_passes > 0 {
        c_weighted / c_passes as f64
    } else {
        1.0
    };

    let expected = match alpha {
        // c → 0 limit of Mα/((M−1)c + α): drafting costs nothing, so the
        // expected gain is the generated length itself. Reachable through
        // a fully-skipped mask, which prices every sublayer at zero.
        Some(a) if a > 0.0 && c <= 0.0 => m,
        Some(a) if a > 0.0 => expected_speedup(m, a, c)?,
        _ => 1.0,
    };

    let mut method_cost = 0.0;
    let mut vanilla_cost = 0.0;
    for r in records {
        method_cost += analytic_run_cost(r, beta)?;
        // Identical outputs by losslessness, so the vanilla side of the
        // ratio is fully determined: one full pass per emitted token.
        vanilla_cost += r.emitted() as f64;
    }
    let measured_analytic = vanilla_cost / method_cost;

    let draft_ms: f64 = records.iter().map(|r| r.draft_ms).sum();
    let verify_ms: f64 = records.iter().map(|r| r.verify_ms).sum();
    let total_ms = draft_ms + verify_ms;
    let tokens_per_sec = (total_ms > 0.0).then(|| emitted as f64 / (total_ms / 1000.0));
    let measured_wallclock = match vanilla_ms_total {
        Some(v) if v > 0.0 && total_ms > 0.0 => Some(v / total_ms),
        _ => None,
    };

    Ok(ReportRow {
        domain,
        runs: records.len() as u64,
        m,
        alpha,
        cost_coefficient: c,
        expected_speedup: expected,
        measured_speedup_analytic: measured_analytic,
        measured_speedup_wallclock: measured_wallclock,
        tokens_per_sec,
        draft_ms,
        verify_ms,
    })
}

/// Pool run records into per-domain rows and an overall row. `vanilla`
/// supplies the paired plain-decoding runs for wallclock speedup; pass the
/// same prompts or the ratio is meaningless (prompt ids are checked).
pub fn aggregate(
    records: &[RunRecord],
    vanilla: Option<&[RunRecord]>,
    beta: f64,
) -> Result<SpeedupReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no run records to aggregate"));
    }
    if let Some(v) = vanilla {
        let mut a: Vec<&str> = records.iter().map(|r| r.prompt_id.as_str()).collect();
        let mut b: Vec<&str> = v.iter().map(|r| r.prompt_id.as_str()).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::InvalidParam(
                "vanilla runs do not cover the same prompts as the method runs".into(),
            ));
        }
    }
    let vanilla_ms = |domain: Option<usize>| -> Option<f64> {
        vanilla.map(|v| {
            v.iter()
                .filter(|r| domain.is_none_or(|d| r.domain == d))
                .map(|r| r.draft_ms + r.verify_ms)
                .sum()
        })
    };

    let all: Vec<&RunRecord> = records.iter().collect();
    let overall = pool_rows(None, &all, vanilla_ms(None), beta)?;

    let mut by_domain: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_domain.entry(r.domain).or_default().push(r);
    }
    let per_domain = by_domain
        .into_iter()
        .map(|(d, rs)| pool_rows(Some(d), &rs, vanilla_ms(Some(d)), beta))
        .collect::<Result<Vec<_>>>()?;

    Ok(SpeedupReport {
        beta,
        overall,
        per_domain,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "".into(), |v| format!("{v:.6}"))
}

/// The report as CSV, overall row last.
pub fn report_to_csv(report: &SpeedupReport) -> String {
    let mut out = String::from(
        "domain,runs,M,alpha,cost_coefficient,expected_speedup,\
         measured_speedup_analytic,measured_speedup_wallclock,tokens_per_sec,draft_ms,verify_ms\n",
    );
    for row in report.per_domain.iter().chain([&report.overall]) {
        let domain = row
            .domain
            .map_or_else(|| "overall".into(), |d| d.to_string());
        out.push_str(&format!(
            "{domain},{},{:.6},{},{:.6},{:.6},{:.6},{},{},{:.3},{:.3}\n",
            row.runs,
            row.m,
            fmt_opt(row.alpha),
            row.cost_coefficient,
            row.expected_speedup,
            row.measured_speedup_analytic,
            fmt_opt(row.measured_speedup_wallclock),
            fmt_opt(row.tokens_per_sec),
            row.draft_ms,
            row.verify_ms,
        ));
    }
    out
}

/// Mean-centered projection onto the top two principal components, with a
/// deterministic sign convention (each component's largest-magnitude entry
/// is positive). Inputs that don't span two dimensions zero-fill the rest.
pub fn project_2d(vectors: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if vectors.len() < 2 {
        return Err(Error::TooFewVectors {
            what: "2D projection",
            need: 2,
            got: vectors.len(),
        });
    }
    let n = vectors.len();
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidParam(
            "projection inputs have mixed dims".into(),
        ));
    }
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);

    // Eigenpairs sorted by descending eigenvalue; degenerate directions
    // (zero variance) project to zero.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut coords = vec![[0.0f64; 2]; n];
    for (axis, &e) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[e] <= 1e-12 {
            continue;
        }
        let mut comp: Vec<f64> = (0..d).map(|j| eig.eigenvectors[(j, e)]).collect();
        let lead = (0..d)
            .max_by(|&a, &b| comp[a].abs().total_cmp(&comp[b].abs()))
            .unwrap();
        if comp[lead] < 0.0 {
            for c in &mut comp {
                *c = -*c;
            }
        }
        for (i, point) in coords.iter_mut().enumerate() {
            point[axis] = (0..d).map(|j| centered[(i, j)] * comp[j]).sum();
        }
    }
    Ok(coords)
}

/// Mean silhouette coefficient of a labeled point set: how cleanly the
/// labels separate in space, in [-1, 1]. Singleton clusters score 0.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.len() < 2 {
        return Err(Error::InvalidParam(
            "silhouette needs >= 2 labeled points".into(),
        ));
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(Error::InvalidParam("silhouette needs >= 2 clusters".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let e = sums.entry(labels[j]).or_insert((0.0, 0));
            e.0 += dist(p, q);
            e.1 += 1;
        }
        let own = sums.get(&labels[i]).copied();
        let a = match own {
            Some((s, n)) if n > 0 => s / n as f64,
            _ => {
                continue; // singleton cluster contributes 0
            }
        };
        let b = sums
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, &(s, n))| s / n as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / points.len() as f64)
}
