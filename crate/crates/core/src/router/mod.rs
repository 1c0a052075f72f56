//! Domain routing: cluster prompt hidden states, keep a few representative
//! anchors per cluster, and at serving time send each incoming prompt to
//! the skip mask of its nearest anchor's domain.
//!
//! Clustering and anchor selection use Euclidean distance; classification
//! uses cosine similarity over the pooled anchor set (1-NN — the joint
//! argmax over (domain, anchor) pairs). The fitted artifacts are a
//! [`RouterModel`] (anchors) and a [`Registry`] (domain → mask, stamped
//! with the model fingerprint so a registry can't silently serve a
//! different model).

pub mod kmeans;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::DraftConfig;
use crate::error::{Error, Result};
use crate::model::{corpus::Prompt, extract_last_hidden, Model, ModelSpec, SkipMask};
use crate::search::{search, BOConfig, ObjectiveMode, ObjectiveSpec, SearchTrace};
pub use kmeans::{inertia, kmeans};

/// A representative hidden vector: close to its cluster's centroid, tagged
/// with the domain the cluster was mapped to and the prompt it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub domain: usize,
    pub prompt_id: String,
    pub vector: Vec<f64>,
}

/// The serving-time classifier: a pooled anchor list, ordered by (domain,
/// selection rank) so similarity ties resolve the same way every time.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    anchors: Vec<Anchor>,
}

impl RouterModel {
    pub fn new(mut anchors: Vec<Anchor>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::EmptyInput("router needs at least one anchor"));
        }
        let dim = anchors[0].vector.len();
        for a in &anchors {
            if a.vector.len() != dim {
                return Err(Error::InvalidParam(format!(
                    "anchor {} has dim {}, expected {dim}",
                    a.prompt_id,
                    a.vector.len()
                )));
            }
            let norm = a.vector.iter().map(|v| v * v).sum::<f64>();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm);
            }
        }
        // Stable sort: group by domain, keep selection order within one.
        anchors.sort_by_key(|a| a.domain);
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].vector.len()
    }

    pub fn domains(&self) -> BTreeSet<usize> {
        self.anchors.iter().map(|a| a.domain).collect()
    }
}

/// Nearest-anchor domain under cosine similarity. Ties go to the earliest
/// anchor in (domain, selection-rank) order.
pub fn classify(router: &RouterModel, v: &[f64]) -> Result<usize> {
    if v.len() != router.dim() {
        return Err(Error::InvalidParam(format!(
            "query dim {} != anchor dim {}",
            v.len(),
            router.dim()
        )));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let mut best: Option<(f64, usize)> = None;
    for a in &router.anchors {
        let dot: f64 = a.vector.iter().zip(v).map(|(x, y)| x * y).sum();
        let a_norm = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = dot / (norm * a_norm);
        if best.is_none_or(|(b, _)| cos > b) {
            best = Some((cos, a.domain));
        }
    }
    Ok(best.expect("router is never empty").1)
}

/// The k cluster members nearest the centroid (Euclidean), exact ties
/// resolved by prompt id ascending. Equivalent to minimizing the summed
/// distance over all size-k subsets, since the objective is separable.
pub fn select_anchors(
    domain: usize,
    cluster: &[(String, Vec<f64>)],
    centroid: &[f64],
    k: usize,
) -> Result<Vec<Anchor>> {
    if cluster.len() < k {
        return Err(Error::TooFewVectors {
            what: "anchor selection",
            need: k,
            got: cluster.len(),
        });
    }
    let mut ranked: Vec<(f64, &String, &Vec<f64>)> = cluster
        .iter()
        .map(|(id, v)| {
            let d: f64 = v.iter().zip(centroid).map(|(x, c)| (x - c) * (x - c)).sum();
            (d, id, v)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(_, id, v)| Anchor {
            domain,
            prompt_id: id.clone(),
            vector: v.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: usize,
    pub name: String,
    /// Mask in bitstring form, bit 0 first (even = attention, odd = MLP).
    pub mask_bits: String,
    pub k_anchors: usize,
}

/// Persisted domain → mask table, stamped with the spec fingerprint of the
/// model it was fitted against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub fingerprint: String,
    pub domains: Vec<RegistryEntry>,
}

impl Registry {
    pub fn mask_for(&self, domain: usize) -> Result<SkipMask> {
        let entry = self
            .domains
            .iter()
            .find(|e| e.id == domain)
            .ok_or(Error::UnknownDomain(domain))?;
        SkipMask::from_bitstring(&entry.mask_bits)
    }

    /// Refuse to serve a model this registry wasn't fitted for.
    pub fn check_model(&self, spec: &ModelSpec) -> Result<()> {
        let fp = spec.fingerprint();
        if self.fingerprint != fp {
            return Err(Error::FingerprintMismatch {
                registry: self.fingerprint.clone(),
                model: fp,
            });
        }
        for e in &self.domains {
            if e.mask_bits.len() != spec.num_sublayers() {
                return Err(Error::MaskLength {
                    expected: spec.num_sublayers(),
                    found: e.mask_bits.len(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Mask lookup for one query vector: classify, then read the registry.
pub fn route(
    registry: &Registry,
    router: &RouterModel,
    spec: &ModelSpec,
    v: &[f64],
) -> Result<SkipMask> {
    registry.check_model(spec)?;
    registry.mask_for(classify(router, v)?)
}

pub fn write_anchors(path: &Path, anchors: &[Anchor]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for a in anchors {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_anchors(path: &Path) -> Result<Vec<Anchor>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut anchors = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        anchors.push(serde_json::from_str(&line)?);
    }
    Ok(anchors)
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Cluster count; defaults to the number of corpora.
    pub k_clusters: Option<usize>,
    /// Anchors kept per cluster (capped at the cluster size).
    pub k_anchors: usize,
    /// Anchor source prompts fed to each domain's mask search.
    pub bo_samples: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
    pub bo: BOConfig,
    pub draft_cfg: DraftConfig,
    pub objective_mode: ObjectiveMode,
    pub objective_max_new: usize,
    pub beta: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k_clusters: None,
            k_anchors: 10,
            bo_samples: 8,
            kmeans_max_iters: 100,
            seed: 0,
            bo: BOConfig::default(),
            draft_cfg: DraftConfig::default(),
            objective_mode: ObjectiveMode::Analytic,
            objective_max_new: 48,
            beta: 2.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub domain: usize,
    pub size: usize,
    pub majority_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Fraction of vectors whose cluster's majority label is their own.
    /// 1.0 means the clustering recovered the labeled domains exactly;
    /// anything lower is reported as a warning by callers, not an error.
    pub purity: f64,
    pub inertia: f64,
    pub clusters: Vec<ClusterSummary>,
    /// Best objective value the mask search reached per domain.
    pub domain_objectives: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub router: RouterModel,
    pub registry: Registry,
    pub report: FitReport,
    pub traces: BTreeMap<usize, SearchTrace>,
}

/// The full fitting pipeline: hidden vectors → k-means → majority-label
/// domains → anchors per cluster → mask search per domain.
pub fn fit_router(model: &Model, corpora: &[Vec<Prompt>], cfg: &FitConfig) -> Result<FitOutput> {
    if corpora.is_empty() || corpora.iter().any(|c| c.is_empty()) {
        return Err(Error::EmptyInput("fit needs at least one nonempty corpus"));
    }
    if cfg.k_anchors == 0 || cfg.bo_samples == 0 {
        return Err(Error::InvalidParam(
            "k_anchors and bo_samples must be >= 1".into(),
        ));
    }

    let prompts: Vec<&Prompt> = corpora.iter().flatten().collect();
    let mut by_id: BTreeMap<&str, &Prompt> = BTreeMap::new();
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(prompts.len());
    for p in &prompts {
        by_id.insert(p.prompt_id.as_str(), p);
        let h = extract_last_hidden(model, p)?;
        vectors.push(h.values.iter().map(|&v| v as f64).collect());
    }

    let k = cfg.k_clusters.unwrap_or(corpora.len());
    let (assignments, centroids) = kmeans(&vectors, k, cfg.seed, cfg.kmeans_max_iters)?;
    let total_inertia = inertia(&vectors, &assignments, &centroids);

    // Map each cluster to the domain label most of its members carry.
    let mut anchors: Vec<Anchor> = Vec::new();
    let mut summaries = Vec::with_capacity(k);
    let mut pure = 0usize;
    for (cluster, centroid) in centroids.iter().enumerate() {
        let members: Vec<usize> = (0..prompts.len())
            .filter(|&i| assignments[i] == cluster)
            .collect();
        if members.is_empty() {
            return Err(Error::InvalidParam(format!("cluster {cluster} is empty")));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &members {
            *counts.entry(prompts[i].domain).or_default() += 1;
        }
        let (&domain, &majority) = counts.iter().max_by_key(|(_, &c)| c).expect("nonempty");
        pure += majority;
        summaries.push(ClusterSummary {
            cluster,
            domain,
            size: members.len(),
            majority_fraction: majority as f64 / members.len() as f64,
        });

        let pool: Vec<(String, Vec<f64>)> = members
            .iter()
            .map(|&i| (prompts[i].prompt_id.clone(), vectors[i].clone()))
            .collect();
        let take = cfg.k_anchors.min(pool.len());
        anchors.extend(select_anchors(domain, &pool, centroid, take)?);
    }
    let purity = pure as f64 / prompts.len() as f64;

    // One mask search per mapped domain, on that domain's anchor prompts.
    let mut registry_entries = Vec::new();
    let mut traces = BTreeMap::new();
    let mut domain_objectives = BTreeMap::new();
    let domains: BTreeSet<usize> = anchors.iter().map(|a| a.domain).collect();
    for &domain in &domains {
        let mut sample_ids: Vec<&str> = Vec::new();
        for a in anchors.iter().filter(|a| a.domain == domain) {
            if !sample_ids.contains(&a.prompt_id.as_str()) {
                sample_ids.push(a.prompt_id.as_str());
            }
            if sample_ids.len() == cfg.bo_samples {
                break;
            }
        }
        let samples: Vec<Prompt> = sample_ids
            .iter()
            .map(|id| (*by_id.get(id).expect("anchor came from these prompts")).clone())
            .collect();
        let objective = ObjectiveSpec {
            mode: cfg.objective_mode,
            anchor_samples: samples,
            draft_cfg: cfg.draft_cfg,
            max_new: cfg.objective_max_new,
            beta: cfg.beta,
        };
        let bo = BOConfig {
            seed: cfg.bo.seed.wrapping_add(domain as u64),
            ..cfg.bo.clone()
        };
        let (mask, trace) = search(model, &objective, &bo)?;
        domain_objectives.insert(domain, trace.best().expect("nonempty trace").objective);
        registry_entries.push(RegistryEntry {
            id: domain,
            name: format!("domain-{domain}"),
            mask_bits: mask.to_bitstring(),
            k_anchors: anchors.iter().filter(|a| a.domain == domain).count(),
        });
        traces.insert(domain, trace);
    }

    Ok(FitOutput {
        router: RouterModel::new(anchors)?,
        registry: Registry {
            fingerprint: model.spec().fingerprint(),
            domains: registry_entries,
        },
        report: FitReport {
            purity,
            inertia: total_inertia,
            clusters: summaries,
            domain_objectives,
        },
        traces,
    })
}
