use criterion::{criterion_group, criterion_main, Criterion};
use postbeam_bench::random_block;
use postbeam_core::fastmnmf::{FastMnmfModel, FitSchedule, ModelDims};
use postbeam_core::wpe::{offline_wpe, WpeConfig};

fn fastmnmf_sweep(c: &mut Criterion) {
    let dims = ModelDims {
        sources: 3,
        channels: 4,
        bins: 513,
        components: 8,
    };
    let block = random_block(dims.bins, 256, dims.channels, 1);
    let one = FitSchedule {
        total_iters: 1,
        warmup_iters: 0,
    };
    let mut model = FastMnmfModel::init(&[], dims, 256, 0).unwrap();
    let mut group = c.benchmark_group("back_end");
    group.sample_size(10);
    group.bench_function("fastmnmf_sweep_m4_f513_t256", |b| b.iter(|| model.fit(&block, &one).unwrap().sweeps.len()));
    group.bench_function("offline_wpe_m4_f513_t256", |b| b.iter(|| offline_wpe(&block, &WpeConfig::default()).unwrap().frames()));
    group.finish();
}

criterion_group!(benches, fastmnmf_sweep);
criterion_main!(benches);
