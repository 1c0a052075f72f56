//! Mixed-domain prompt streams.
//!
//! A stream is a Markov chain over domains: with probability `1 - mix_ratio`
//! the next prompt comes from the same domain as the current one, otherwise
//! from a uniformly random *other* domain. `mix_ratio = 0` is a constant
//! stream, `mix_ratio = 1` switches on every step. Within a domain, prompts
//! are served in a seeded shuffled order without replacement, reshuffling
//! once the corpus is exhausted.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::corpus::Prompt;
use crate::model::substream;

/// How the first item's domain is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialDomain {
    Uniform,
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct StreamConfig {
    /// Probability that consecutive items come from different domains.
    pub mix_ratio: f64,
    pub num_domains: usize,
    pub length: usize,
    pub seed: u64,
    pub initial: InitialDomain,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::InvalidParam(format!(
                "mix_ratio must be in [0, 1], got {}",
                self.mix_ratio
            )));
        }
        if self.num_domains == 0 {
            return Err(Error::InvalidParam("num_domains must be >= 1".into()));
        }
        if self.num_domains == 1 && self.mix_ratio > 0.0 {
            return Err(Error::InvalidParam(
                "mix_ratio > 0 needs at least two domains to switch between".into(),
            ));
        }
        if self.length == 0 {
            return Err(Error::InvalidParam("stream length must be >= 1".into()));
        }
        match self.initial {
            InitialDomain::Fixed(d) if d >= self.num_domains => Err(Error::UnknownDomain(d)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub position: usize,
    pub domain: usize,
    pub prompt: Prompt,
}

/// One manifest line: enough to replay or audit a stream without the
/// prompt bodies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub position: usize,
    pub domain: usize,
    pub prompt_id: String,
}

/// Cycling without-replacement sampler over one domain's corpus.
struct DomainDeck<'a> {
    prompts: &'a [Prompt],
    order: Vec<usize>,
    next: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> DomainDeck<'a> {
    fn new(prompts: &'a [Prompt], seed: u64, domain: usize) -> Self {
        let mut rng = substream(seed, 3100 + domain as u64);
        let mut order: Vec<usize> = (0..prompts.len()).collect();
        order.shuffle(&mut rng);
        Self {
            prompts,
            order,
            next: 0,
            rng,
        }
    }

    fn draw(&mut self) -> Prompt {
        if self.next == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.next = 0;
        }
        let p = self.prompts[self.order[self.next]].clone();
        self.next += 1;
        p
    }
}

/// Generate a stream from per-domain corpora (`corpora[d]` is domain `d`).
pub fn generate_stream(corpora: &[Vec<Prompt>], cfg: &StreamConfig) -> Result<Vec<StreamItem>> {
    cfg.validate()?;
    if corpora.len() != cfg.num_domains {
        return Err(Error::InvalidParam(format!(
            "expected {} corpora, got {}",
            cfg.num_domains,
            corpora.len()
        )));
    }
    for (d, corpus) in corpora.iter().enumerate() {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("stream domain corpus"));
        }
        if let Some(p) = corpus.iter().find(|p| p.domain != d) {
            return Err(Error::InvalidParam(format!(
                "prompt {} labeled domain {} found in corpus {d}",
                p.prompt_id, p.domain
            )));
        }
    }

    let mut decks: Vec<DomainDeck> = corpora
        .iter()
        .enumerate()
        .map(|(d, c)| DomainDeck::new(c, cfg.seed, d))
        .collect();
    let mut chain = substream(cfg.seed, 3000);
    let mut domain = match cfg.initial {
        InitialDomain::Fixed(d) => d,
        InitialDomain::Uniform => substream(cfg.seed, 3001).random_range(0..cfg.num_domains),
    };

    let mut items = Vec::with_capacity(cfg.length);
    for position in 0..cfg.length {
        if position > 0 && chain.random::<f64>() < cfg.mix_ratio {
            // Uniform over the other domains: shift past the current one.
            let pick = chain.random_range(0..cfg.num_domains - 1);
            domain = if pick >= domain { pick + 1 } else { pick };
        }
        items.push(StreamItem {
            position,
            domain,
            prompt: decks[domain].draw(),
        });
    }
    Ok(items)
}

/// Fraction of consecutive pairs that change domain; None for streams
/// shorter than two items.
pub fn empirical_switch_rate(items: &[StreamItem]) -> Option<f64> {
    if items.len() < 2 {
        return None;
    }
    let switches = items
        .windows(2)
        .filter(|w| w[0].domain != w[1].domain)
        .count();
    Some(switches as f64 / (items.len() - 1) as f64)
}

pub fn write_manifest(path: &Path, items: &[StreamItem]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        let entry = ManifestEntry {
            position: item.position,
            domain: item.domain,
            prompt_id: item.prompt.prompt_id.clone(),
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::corpus::synth_corpus;
    use crate::model::spec::DomainLayout;

    fn corpora(n: usize, per: usize) -> Vec<Vec<Prompt>> {
        let layout = DomainLayout::new(256, n).unwrap();
        (0..n)
            .map(|d| synth_corpus(&layout, d, per, 6, 77).unwrap())
            .collect()
    }

    fn cfg(r: f64, n: usize, len: usize, seed: u64) -> StreamConfig {
        StreamConfig {
            mix_ratio: r,
            num_domains: n,
            length: len,
            seed,
            initial: InitialDomain::Fixed(0),
        }
    }

    #[test]
    fn zero_mix_never_switches_and_unit_mix_always_does() {
        let c = corpora(3, 5);
        let constant = generate_stream(&c, &cfg(0.0, 3, 40, 9)).unwrap();
        assert!(constant.iter().all(|it| it.domain == 0));
        assert_eq!(empirical_switch_rate(&constant), Some(0.0));

        let churn = generate_stream(&c, &cfg(1.0, 3, 40, 9)).unwrap();
        assert_eq!(empirical_switch_rate(&churn), Some(1.0));
    }

    #[test]
    fn switch_rate_tracks_mix_ratio() {
        let c = corpora(5, 4);
        let items = generate_stream(&c, &cfg(0.3, 5, 10_000, 4)).unwrap();
        let rate = empirical_switch_rate(&items).unwrap();
        assert!((rate - 0.3).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn domain_deck_cycles_whole_corpus_before_repeating() {
        let c = corpora(1, 7);
        let items = generate_stream(&c, &cfg(0.0, 1, 14, 3)).unwrap();
        let first: Vec<&str> = items[..7]
            .iter()
            .map(|i| i.prompt.prompt_id.as_str())
            .collect();
        let mut sorted = first.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 7, "first cycle must be a permutation");
        let second: Vec<&str> = items[7..]
            .iter()
            .map(|i| i.prompt.prompt_id.as_str())
            .collect();
        let mut sorted2 = second.clone();
        sorted2.sort_unstable();
        sorted2.dedup();
        assert_eq!(sorted2.len(), 7);
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let c = corpora(2, 3);
        assert!(generate_stream(&c, &cfg(1.2, 2, 5, 0)).is_err());
        assert!(generate_stream(&c, &cfg(0.5, 1, 5, 0)).is_err());
        assert!(generate_stream(&c, &cfg(0.0, 2, 0, 0)).is_err());
        assert!(generate_stream(&c[..1], &cfg(0.5, 2, 5, 0)).is_err());
        let bad = StreamConfig {
            initial: InitialDomain::Fixed(5),
            ..cfg(0.5, 2, 5, 0)
        };
        assert!(generate_stream(&c, &bad).is_err());
    }

    #[test]
    fn streams_are_reproducible() {
        let c = corpora(3, 5);
        let a = generate_stream(&c, &cfg(0.6, 3, 200, 42)).unwrap();
        let b = generate_stream(&c, &cfg(0.6, 3, 200, 42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_round_trip() {
        let c = corpora(2, 4);
        let items = generate_stream(&c, &cfg(0.5, 2, 12, 11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.jsonl");
        write_manifest(&path, &items).unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 12);
        for (e, it) in entries.iter().zip(&items) {
            assert_eq!(e.position, it.position);
            assert_eq!(e.domain, it.domain);
            assert_eq!(e.prompt_id, it.prompt.prompt_id);
        }
    }
}
