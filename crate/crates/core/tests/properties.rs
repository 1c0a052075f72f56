//! Randomized invariants over the library's load-bearing contracts: decode
//! losslessness, bookkeeping identities, classifier scale invariance, mask
//! serialization, anchor-selection optimality, and stream mixing extremes.

use std::sync::OnceLock;

use proptest::prelude::*;

use skipspec_core::engine::{speculative_generate, DraftConfig};
use skipspec_core::metrics::expected_speedup;
use skipspec_core::model::corpus::{synth_corpus, Prompt};
use skipspec_core::model::spec::{default_planted_spec, default_tiny_spec};
use skipspec_core::model::{build_model, greedy_decode, Model, SkipMask};
use skipspec_core::router::{classify, select_anchors, Anchor, RouterModel};
use skipspec_core::stream::{generate_stream, InitialDomain, StreamConfig};

fn dense_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let model = build_model(&default_tiny_spec(7)).expect("dense model builds");
        assert_eq!(model.num_sublayers(), 16, "properties assume 16 sublayers");
        model
    })
}

fn banded_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let spec = default_planted_spec(3, 7).expect("banded spec");
        let model = build_model(&spec).expect("banded model builds");
        assert_eq!(model.num_sublayers(), 16, "properties assume 16 sublayers");
        model
    })
}

fn banded_corpora() -> &'static Vec<Vec<Prompt>> {
    static CORPORA: OnceLock<Vec<Vec<Prompt>>> = OnceLock::new();
    CORPORA.get_or_init(|| {
        let layout = banded_model()
            .layout()
            .expect("planted model has a layout")
            .clone();
        (0..3)
            .map(|d| synth_corpus(&layout, d, 4, 4, 60 + d as u64).expect("corpus"))
            .collect()
    })
}

fn draft_cfg(adaptive: bool, gamma: usize, tau: f64) -> DraftConfig {
    if adaptive {
        DraftConfig::adaptive(gamma, tau)
    } else {
        DraftConfig::fixed(gamma)
    }
}

/// Shared body for the two losslessness properties: whatever the mask and
/// draft policy, speculative output equals full-model greedy decoding and
/// every pass contributes exactly one non-drafted token.
fn assert_lossless(
    model: &Model,
    prompt: &[u32],
    bits: Vec<bool>,
    gamma: usize,
    adaptive: bool,
    tau: f64,
) -> Result<(), TestCaseError> {
    let mask = SkipMask::from_bits(bits);
    let cfg = draft_cfg(adaptive, gamma, tau);
    let reference = greedy_decode(model, prompt, 12).expect("greedy decode");
    let run = speculative_generate(model, prompt, &mask, &cfg, 12).expect("speculative decode");
    prop_assert_eq!(&run.tokens, &reference);
    let s = run.stats;
    prop_assert_eq!(
        s.emitted_tokens,
        s.accepted_tokens + s.target_forward_passes
    );
    prop_assert!(s.accepted_tokens <= s.drafted_tokens);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn speculative_matches_greedy_on_dense_backend(
        prompt in prop::collection::vec(1u32..256, 1..10),
        bits in prop::collection::vec(any::<bool>(), 16),
        gamma in 1usize..=6,
        adaptive in any::<bool>(),
        tau in 0.1f64..0.9,
    ) {
        assert_lossless(dense_model(), &prompt, bits, gamma, adaptive, tau)?;
    }

    #[test]
    fn speculative_matches_greedy_on_banded_backend(
        prompt in prop::collection::vec(1u32..256, 1..10),
        bits in prop::collection::vec(any::<bool>(), 16),
        gamma in 1usize..=6,
        adaptive in any::<bool>(),
        tau in 0.1f64..0.9,
    ) {
        assert_lossless(banded_model(), &prompt, bits, gamma, adaptive, tau)?;
    }
}

proptest! {
    #[test]
    fn classification_is_scale_invariant(
        raw_anchors in prop::collection::vec(
            (0usize..4, prop::collection::vec(-1.0f64..1.0, 6)),
            1..10,
        ),
        mut query in prop::collection::vec(-1.0f64..1.0, 6),
        exponent in -8i32..=8,
    ) {
        let anchors: Vec<Anchor> = raw_anchors
            .into_iter()
            .enumerate()
            .map(|(i, (domain, mut vector))| {
                // Pin one coordinate away from zero so no anchor degenerates.
                vector[0] = vector[0].abs().max(0.25);
                Anchor { domain, prompt_id: format!("a{i}"), vector }
            })
            .collect();
        let router = RouterModel::new(anchors).expect("nonzero anchors");
        query[0] = query[0].abs().max(0.25);

        // Powers of two scale every intermediate float exactly, so the
        // cosine argmax must be bit-for-bit unchanged.
        let scale = 2.0f64.powi(exponent);
        let scaled: Vec<f64> = query.iter().map(|v| v * scale).collect();
        prop_assert_eq!(
            classify(&router, &query).expect("query is nonzero"),
            classify(&router, &scaled).expect("scaled query is nonzero"),
        );
    }

    #[test]
    fn mask_bitstring_roundtrip(bits in prop::collection::vec(any::<bool>(), 1..40)) {
        let mask = SkipMask::from_bits(bits.clone());
        let text = mask.to_bitstring();
        prop_assert_eq!(text.len(), bits.len());
        let back = SkipMask::from_bitstring(&text).expect("own bitstring parses");
        prop_assert_eq!(&back, &mask);
        prop_assert_eq!(mask.popcount(), bits.iter().filter(|&&b| b).count());
    }

    #[test]
    fn anchor_selection_matches_exhaustive_minimum(
        vectors in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..9),
        centroid in prop::collection::vec(0.0f64..1.0, 3),
        k_raw in 1usize..9,
    ) {
        let n = vectors.len();
        let k = k_raw.min(n);
        let cluster: Vec<(String, Vec<f64>)> = vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("p{i}"), v))
            .collect();

        let d2: Vec<f64> = cluster
            .iter()
            .map(|(_, v)| {
                v.iter()
                    .zip(&centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        // First minimum in lexicographic subset order prefers low indices,
        // matching the selector's distance-then-id tie-break.
        let mut idx: Vec<usize> = (0..k).collect();
        let mut best_cost = f64::INFINITY;
        let mut best: Vec<usize> = Vec::new();
        loop {
            let cost: f64 = idx.iter().map(|&i| d2[i]).sum();
            if cost < best_cost {
                best_cost = cost;
                best = idx.clone();
            }
            let mut j = k;
            while j > 0 && idx[j - 1] == n - k + j - 1 {
                j -= 1;
            }
            if j == 0 {
                break;
            }
            idx[j - 1] += 1;
            for l in j..k {
                idx[l] = idx[l - 1] + 1;
            }
        }
        let expected: Vec<String> = best.iter().map(|&i| cluster[i].0.clone()).collect();

        let mut selected: Vec<String> = select_anchors(0, &cluster, &centroid, k)
            .expect("cluster is large enough")
            .into_iter()
            .map(|a| a.prompt_id)
            .collect();
        selected.sort();
        prop_assert_eq!(selected, expected);
    }

    #[test]
    fn stream_extremes_pin_or_force_switches(seed in any::<u64>(), pure in any::<bool>()) {
        let corpora = banded_corpora();
        let cfg = StreamConfig {
            mix_ratio: if pure { 0.0 } else { 1.0 },
            num_domains: 3,
            length: 50,
            seed,
            initial: InitialDomain::Uniform,
        };
        let items = generate_stream(corpora, &cfg).expect("stream generates");
        prop_assert_eq!(items.len(), 50);
        for (i, item) in items.iter().enumerate() {
            prop_assert_eq!(item.position, i);
            prop_assert!(item.domain < 3);
            prop_assert_eq!(item.prompt.domain, item.domain);
        }
        for w in items.windows(2) {
            if pure {
                prop_assert_eq!(w[0].domain, w[1].domain);
            } else {
                prop_assert_ne!(w[0].domain, w[1].domain);
            }
        }
    }

    #[test]
    fn speedup_stays_within_generation_length(
        m in 1.0f64..8.0,
        alpha in 0.01f64..=1.0,
        c in 0.01f64..=1.0,
    ) {
        let v = expected_speedup(m, alpha, c).expect("arguments in domain");
        prop_assert!(v > 0.0);
        prop_assert!(v <= m + 1e-12, "speedup {} exceeds generated length {}", v, m);
    }
}
