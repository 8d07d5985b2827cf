use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use postbeam_bench::{random_snapshot, random_vector};
use postbeam_core::beamformer::{frame_moments, mvdr_weights};
use postbeam_core::pipeline::{FrontEnd, PipelineConfig, Scheduling};
use postbeam_core::stft::StftAnalyzer;
use postbeam_core::wpe::OnlineWpe;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const M: usize = 5;
const F: usize = 513;

fn front_end_frame(c: &mut Criterion) {
    let mut cfg = PipelineConfig {
        scheduling: Scheduling::Ideal,
        ..Default::default()
    };
    cfg.beamformer.t_bf = 1;
    let snap = random_snapshot(3, F, M, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames: Vec<Vec<_>> = (0..64).map(|_| random_vector(&mut rng, F * M)).collect();
    let mut front = FrontEnd::new(&cfg, M).unwrap();
    let mut k = 0;
    c.bench_function("front_end_frame_m5_t_bf1", |b| {
        b.iter(|| {
            k = (k + 1) % frames.len();
            front.process(&frames[k], Some(&snap)).len()
        })
    });
}

fn online_wpe_frame(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let mut wpe = OnlineWpe::new(&cfg.wpe_front, M, F).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<Vec<_>> = (0..64).map(|_| random_vector(&mut rng, F * M)).collect();
    let mut out = vec![Default::default(); F * M];
    let mut k = 0;
    c.bench_function("online_wpe_frame_m5", |b| {
        b.iter(|| {
            k = (k + 1) % frames.len();
            wpe.process_frame(&frames[k], &mut out)
        })
    });
}

fn moments_and_weights(c: &mut Criterion) {
    let snap = random_snapshot(3, 1, M, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_vector(&mut rng, M);
    c.bench_function("moments_plus_mvdr_one_bin_m5", |b| {
        b.iter(|| {
            let (g, u) = frame_moments(&x, snap.wiener(0, 0), snap.covariance(0, 0));
            mvdr_weights(&g, &u, 0).map(|w| w.len())
        })
    });
}

fn stft_analysis(c: &mut Criterion) {
    let cfg = PipelineConfig::default().stft;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hop: Vec<Vec<f64>> = (0..M).map(|_| random_vector(&mut rng, cfg.hop).iter().map(|v| v.re).collect()).collect();
    let refs: Vec<&[f64]> = hop.iter().map(Vec::as_slice).collect();
    c.bench_function("stft_analysis_hop_m5", |b| {
        b.iter_batched_ref(
            || (StftAnalyzer::new(&cfg, M).unwrap(), vec![Default::default(); F * M]),
            |(a, out)| a.push(&refs, out),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, front_end_frame, online_wpe_frame, moments_and_weights, stft_analysis);
criterion_main!(benches);
