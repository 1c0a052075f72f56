use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::spec::DomainLayout;
use crate::model::substream;

/// One synthetic prompt. `prompt_id` is unique within a corpus directory
/// ("d{domain}-p{index}") so run records and anchors can point back to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub domain: usize,
    pub tokens: Vec<u32>,
}

/// Draw `n` prompts of length `len` for one domain: tokens from the domain's
/// band with an occasional shared-band token mixed in. The final token is
/// always in-band, which is what keeps planted-model continuations inside
/// the domain instead of terminating.
pub fn synth_corpus(
    layout: &DomainLayout,
    domain: usize,
    n: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<Prompt>> {
    if n == 0 {
        return Err(Error::InvalidParam("corpus size must be >= 1".into()));
    }
    if len == 0 {
        return Err(Error::InvalidParam("prompt length must be >= 1".into()));
    }
    if domain >= layout.num_domains {
        return Err(Error::UnknownDomain(domain));
    }
    let mut rng = substream(seed, 1000 + domain as u64);
    let band = layout.domain_range(domain);
    let shared = layout.shared_range();
    let prompts = (0..n)
        .map(|i| {
            let tokens = (0..len)
                .map(|p| {
                    if p + 1 < len && rng.random_range(0..5) == 0 {
                        rng.random_range(shared.clone())
                    } else {
                        rng.random_range(band.clone())
                    }
                })
                .collect();
            Prompt {
                prompt_id: format!("d{domain}-p{i}"),
                domain,
                tokens,
            }
        })
        .collect();
    Ok(prompts)
}

pub fn write_corpus(path: &Path, prompts: &[Prompt]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in prompts {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Prompt>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut prompts = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        prompts.push(serde_json::from_str(&line)?);
    }
    Ok(prompts)
}

/// Load every `*.jsonl` corpus in a directory, sorted by file name so the
/// domain order is stable across platforms.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<Vec<Prompt>>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyInput("no .jsonl corpora in directory"));
    }
    files.iter().map(|f| read_corpus(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::Band;

    fn layout() -> DomainLayout {
        DomainLayout::new(256, 4).unwrap()
    }

    #[test]
    fn same_seed_same_corpus() {
        let l = layout();
        let a = synth_corpus(&l, 2, 10, 16, 99).unwrap();
        let b = synth_corpus(&l, 2, 10, 16, 99).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&l, 2, 10, 16, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tokens_stay_in_band_or_shared_and_end_in_band() {
        let l = layout();
        for domain in 0..4 {
            for p in synth_corpus(&l, domain, 20, 12, 7).unwrap() {
                for &t in &p.tokens {
                    match l.band_of(t) {
                        Band::Domain(d) => assert_eq!(d, domain),
                        Band::Shared => {}
                        other => panic!("unexpected band {other:?}"),
                    }
                }
                assert_eq!(l.band_of(*p.tokens.last().unwrap()), Band::Domain(domain));
            }
        }
    }

    #[test]
    fn disjoint_domains_share_only_shared_band() {
        let l = layout();
        let a = synth_corpus(&l, 0, 30, 16, 7).unwrap();
        let b = synth_corpus(&l, 1, 30, 16, 7).unwrap();
        let toks = |c: &[Prompt]| -> std::collections::BTreeSet<u32> {
            c.iter().flat_map(|p| p.tokens.iter().copied()).collect()
        };
        for t in toks(&a).intersection(&toks(&b)) {
            assert_eq!(l.band_of(*t), Band::Shared);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let l = layout();
        let dir = tempfile::tempdir().unwrap();
        for domain in 0..3 {
            let prompts = synth_corpus(&l, domain, 5, 8, 3).unwrap();
            write_corpus(&dir.path().join(format!("domain{domain}.jsonl")), &prompts).unwrap();
        }
        let all = read_corpus_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[1][0].domain, 1);
        assert_eq!(all[2], synth_corpus(&l, 2, 5, 8, 3).unwrap());
    }
}
