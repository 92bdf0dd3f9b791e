use apex_core::dsan::{self, GroupRewards};
use apex_core::flowmatch::{self, Context, FlowPolicyParams, NoiseSchedule, TimeGrid};
use apex_core::grpo::{self, ClipConfig, RolloutStreams, StreamCoords};
use apex_core::pareto;
use apex_core::rewards;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn sampling(c: &mut Criterion) {
    let params = FlowPolicyParams::random(1, 2, 64, 0.1, 2);
    let grid = TimeGrid::new(10).unwrap();
    let sched = NoiseSchedule::default();
    let ctx = Context::neutral(0, 2);
    c.bench_function("sample_trajectory T=10 F=64", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| {
            let mut r2 = ChaCha8Rng::seed_from_u64(rng.random());
            flowmatch::sample_trajectory(&params, &ctx, &grid, &sched, &mut rng, &mut r2).unwrap()
        })
    });
}

fn loss(c: &mut Criterion) {
    let params = FlowPolicyParams::random(1, 2, 64, 0.1, 2);
    let grid = TimeGrid::new(10).unwrap();
    let sched = NoiseSchedule::default();
    let group = grpo::collect_group(
        &params,
        &Context::neutral(0, 2),
        &rewards::default_benchmark(),
        24,
        &grid,
        &sched,
        StreamCoords { run_seed: 1, step: 0, slot: 0, family: RolloutStreams::Training },
    )
    .unwrap();
    let adv = dsan::dsan_advantages(&group.rewards, &[0.25; 4], 1e-8).unwrap().final_advantages;
    c.bench_function("grpo_loss_and_grad G=24", |b| {
        b.iter(|| {
            grpo::grpo_loss_and_grad(&group, &adv, &params, &params, &grid, &sched, &ClipConfig::default()).unwrap()
        })
    });
}

fn normalization(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..24).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let g = GroupRewards::new(&rows).unwrap();
    c.bench_function("dsan_advantages 24x4", |b| {
        b.iter(|| dsan::dsan_advantages(black_box(&g), &[0.25; 4], 1e-8).unwrap())
    });
}

fn hypervolume(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, n) in [(3usize, 200usize), (4, 100)] {
        c.bench_function(&format!("hypervolume_exact K={k} n={n}"), |b| {
            b.iter_batched(
                || (0..n).map(|_| (0..k).map(|_| rng.random::<f64>()).collect()).collect::<Vec<Vec<f64>>>(),
                |pts| pareto::hypervolume_exact(&pts, &vec![0.0; k]).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group!(benches, sampling, loss, normalization, hypervolume);
criterion_main!(benches);
