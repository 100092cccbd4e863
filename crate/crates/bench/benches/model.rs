use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use msq_bench::{desk_config, desk_corpus, fresh_model};
use msq_core::checkpoint::Checkpoint;
use msq_core::numerics::{stream_rng, Gru, ParamSet};
use msq_core::training::{run_stage, Stage, TrainOptions};
use msq_core::{GenerateOptions, MaskSelection, ModelKind};

fn gru_step(c: &mut Criterion) {
    let mut ps = ParamSet::new();
    let gru = Gru::new(&mut ps, "gru", 80, 64, &mut stream_rng(1, 0)).unwrap();
    let x = vec![0.1; 80];
    let h = vec![0.0; 64];
    c.bench_function("gru_step_80x64", |b| b.iter(|| gru.step(&ps, &x, &h)));
}

fn encode(c: &mut Criterion) {
    let cfg = desk_config();
    let corpus = desk_corpus(&cfg, 1);
    let u = &corpus.utterances[0];
    let model = fresh_model(&cfg, ModelKind::Joint);
    c.bench_function("encode_both_sources", |b| {
        b.iter(|| {
            model
                .encode(Some(&u.tokens), u.source.as_ref(), MaskSelection::Both)
                .unwrap()
        })
    });
}

fn generate(c: &mut Criterion) {
    let cfg = desk_config();
    let corpus = desk_corpus(&cfg, 1);
    let u = &corpus.utterances[0];
    let model = fresh_model(&cfg, ModelKind::Joint);
    let opts = GenerateOptions {
        max_steps: u.t().div_ceil(cfg.model.decoder.r),
        dropout: false,
        energy_stop: false,
    };
    c.bench_function("generate_hybrid", |b| {
        b.iter(|| {
            model
                .generate(Some(&u.tokens), u.source.as_ref(), MaskSelection::Both, opts, None)
                .unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = desk_config();
    let corpus = desk_corpus(&cfg, cfg.train.batch_size);
    let base = Checkpoint::fresh(cfg.clone(), fresh_model(&cfg, ModelKind::Joint));
    c.bench_function("joint_train_step", |b| {
        b.iter_batched(
            || base.clone(),
            |mut ck| run_stage(&mut ck, &corpus, Stage::Joint, 1, &mut TrainOptions::default()).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, gru_step, encode, generate, train_step);
criterion_main!(benches);
