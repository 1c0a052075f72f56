//! Wallclock profile of the pipeline's hot paths: raw decoding on both
//! backends, the draft/verify loop under different masks, router fitting
//! primitives, and the surrogate model that drives the mask search.
//!
//! These exist to catch performance regressions, not to prove speedups —
//! the analytic cost model in `skipspec_core::metrics` is the measurement
//! of record and is exercised by the test suites.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use skipspec_core::engine::{speculative_generate, DraftConfig};
use skipspec_core::model::corpus::{synth_corpus, Prompt};
use skipspec_core::model::spec::{default_planted_spec, default_tiny_spec};
use skipspec_core::model::{
    build_model, extract_last_hidden, greedy_decode, planted_optimal_mask, Model, SkipMask,
};
use skipspec_core::router::kmeans;
use skipspec_core::search::{evaluate_objective, gp::Gp, BOConfig, ObjectiveSpec};

struct Fixtures {
    banded: Model,
    dense: Model,
    prompts: Vec<Prompt>,
    domain_mask: SkipMask,
    hiddens: Vec<Vec<f64>>,
}

fn fixtures() -> Fixtures {
    let banded = build_model(&default_planted_spec(3, 5).expect("spec")).expect("banded model");
    let dense = build_model(&default_tiny_spec(5)).expect("dense model");
    let layout = banded.layout().expect("planted layout").clone();
    let prompts: Vec<Prompt> = (0..3)
        .flat_map(|d| synth_corpus(&layout, d, 10, 8, 20 + d as u64).expect("corpus"))
        .collect();
    let domain_mask = planted_optimal_mask(&banded, 0).expect("planted mask");
    let hiddens = prompts
        .iter()
        .map(|p| {
            extract_last_hidden(&banded, p)
                .expect("hidden state")
                .values
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    Fixtures {
        banded,
        dense,
        prompts,
        domain_mask,
        hiddens,
    }
}

fn bench_decode(c: &mut Criterion) {
    let fx = fixtures();
    let prompt = &fx.prompts[0];
    let mut group = c.benchmark_group("decode");

    group.bench_function("greedy-banded-32", |b| {
        b.iter(|| greedy_decode(&fx.banded, black_box(&prompt.tokens), 32).expect("decode"))
    });
    group.bench_function("greedy-dense-32", |b| {
        b.iter(|| greedy_decode(&fx.dense, black_box(&prompt.tokens), 32).expect("decode"))
    });

    let zeros = SkipMask::zeros(fx.banded.num_sublayers());
    let cfg = DraftConfig::fixed(4);
    group.bench_function("speculative-full-draft-32", |b| {
        b.iter(|| {
            speculative_generate(&fx.banded, black_box(&prompt.tokens), &zeros, &cfg, 32)
                .expect("decode")
        })
    });
    group.bench_function("speculative-domain-mask-32", |b| {
        b.iter(|| {
            speculative_generate(
                &fx.banded,
                black_box(&prompt.tokens),
                &fx.domain_mask,
                &cfg,
                32,
            )
            .expect("decode")
        })
    });
    group.finish();
}

fn bench_router(c: &mut Criterion) {
    let fx = fixtures();
    let mut group = c.benchmark_group("router");
    group.bench_function("hidden-state-extraction", |b| {
        b.iter(|| extract_last_hidden(&fx.banded, black_box(&fx.prompts[7])).expect("hidden"))
    });
    group.bench_function("kmeans-30x32-k3", |b| {
        b.iter(|| kmeans(black_box(&fx.hiddens), 3, 0, 100).expect("kmeans"))
    });
    group.finish();
}

fn bench_search(c: &mut Criterion) {
    let fx = fixtures();
    let mut group = c.benchmark_group("search");

    // Surrogate update at a realistic trace size: 40 observations in the
    // 16-dimensional mask cube, then a proposal-pool's worth of posteriors.
    let dims = fx.banded.num_sublayers();
    let cfg = BOConfig::default();
    let points: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            (0..dims)
                .map(|j| if (i * 7 + j * 3) % 5 < 2 { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    group.bench_function("gp-fit-40obs-16d", |b| {
        b.iter(|| {
            let mut gp = Gp::new(cfg.lengthscale_for(dims), cfg.noise_variance).expect("gp");
            for (i, p) in points.iter().enumerate() {
                gp.observe(p.clone(), (i % 9) as f64).expect("observe");
            }
            gp.fit().expect("fit");
            gp
        })
    });
    let mut gp = Gp::new(cfg.lengthscale_for(dims), cfg.noise_variance).expect("gp");
    for (i, p) in points.iter().enumerate() {
        gp.observe(p.clone(), (i % 9) as f64).expect("observe");
    }
    gp.fit().expect("fit");
    group.bench_function("gp-posterior-64-queries", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for q in points.iter().cycle().take(64) {
                let (mean, var) = gp.posterior(black_box(q)).expect("posterior");
                acc += mean + var;
            }
            acc
        })
    });

    let anchors = fx.prompts[..2].to_vec();
    let objective = ObjectiveSpec::analytic(anchors, DraftConfig::fixed(4), 48, 2.3);
    group.bench_function("objective-probe-2x48", |b| {
        b.iter(|| {
            evaluate_objective(&fx.banded, black_box(&fx.domain_mask), &objective)
                .expect("objective")
        })
    });
    group.finish();
}

criterion_group!(benches, bench_decode, bench_router, bench_search);
criterion_main!(benches);
