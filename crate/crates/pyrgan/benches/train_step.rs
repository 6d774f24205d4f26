//! End-to-end hot-path benchmarks: one training epoch per stage kind and one
//! full cascade synthesis, at desk scale. Run twice to compare the
//! data-parallel and sequential builds against the same baseline:
//!
//! ```text
//! cargo bench -p pyrgan -- --save-baseline parallel
//! cargo bench -p pyrgan --no-default-features -- --baseline parallel
//! ```

use criterion::{criterion_group, criterion_main, Criterion};
use pyrgan::cli::{make_phantom_corpus, Modality, PhantomSpec};
use pyrgan::core::SamplePair;
use pyrgan::nets::GeneratorStack;
use pyrgan::synth::{synthesize, SynthesisRequest};
use pyrgan::trainer::{train_stage, Stage, TrainPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An infected phantom slice resized to the benchmark resolution.
fn sample_pair(size: usize) -> SamplePair {
    let spec = PhantomSpec { size, max_blobs: 2, blob_free_frac: 0.3, noise: 0.05 };
    let corpus = make_phantom_corpus(&spec, Modality::Smooth, 0, 1, 2, 5).unwrap();
    corpus[1].1.resize(size, size)
}

fn fresh_stack(plan: &TrainPlan) -> GeneratorStack {
    GeneratorStack::new(
        plan.schedule().unwrap(),
        plan.combine,
        plan.gen_base_width,
        plan.dropout_rate,
        plan.seed,
    )
    .unwrap()
}

fn bench_train_epoch(c: &mut Criterion) {
    let mode = if pyrgan_nn::parallel::is_parallel() { "parallel" } else { "sequential" };
    let plan = TrainPlan::desk(&[16, 32], 1, 9);
    let sample = sample_pair(32);
    let mut stack = fresh_stack(&plan);
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut group = c.benchmark_group(format!("train/{mode}"));
    group.sample_size(10);
    group.bench_function("super epoch 32px b4", |b| {
        b.iter(|| {
            train_stage(&mut stack, 1, Stage::Super, &sample, &plan, &mut rng, None).unwrap()
        })
    });
    group.bench_function("restore epoch 32px b4", |b| {
        b.iter(|| {
            train_stage(&mut stack, 1, Stage::Restore, &sample, &plan, &mut rng, None).unwrap()
        })
    });
    group.finish();
}

fn bench_synthesis(c: &mut Criterion) {
    let mode = if pyrgan_nn::parallel::is_parallel() { "parallel" } else { "sequential" };
    let plan = TrainPlan::desk(&[16, 32], 1, 9);
    let sample = sample_pair(32);
    let mut stack = fresh_stack(&plan);
    // Weight values do not affect the cost; mark the cascade usable as-is.
    stack.trained_scales = stack.scale_count();
    let req = SynthesisRequest::plain(sample.mask.clone(), 7);

    let mut group = c.benchmark_group(format!("synth/{mode}"));
    group.sample_size(20);
    group.bench_function("cascade 16->32px", |b| {
        b.iter(|| synthesize(std::hint::black_box(&stack), &req).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_train_epoch, bench_synthesis);
criterion_main!(benches);
