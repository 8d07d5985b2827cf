use postbeam_core::beamformer::{apply, ema_update, frame_moments, mvdr_weights};
use postbeam_core::eval::si_sdr;
use postbeam_core::fastmnmf::{publish_snapshot, BlockPosteriorMean};
use postbeam_core::linalg::{CMat, C64};
use postbeam_core::pipeline::{synthesize_aligned, FrameStream};
use postbeam_core::stft::StftConfig;
use proptest::prelude::*;

fn complex() -> impl Strategy<Value = C64> {
    (-1.0..1.0f64, -1.0..1.0f64).prop_map(|(re, im)| C64::new(re, im))
}

fn cvec(n: usize) -> impl Strategy<Value = Vec<C64>> {
    prop::collection::vec(complex(), n)
}

fn outer(x: &[C64]) -> CMat {
    CMat::col_vector(x).matmul(&CMat::col_vector(x).adjoint())
}

fn pd(entries: &[C64], m: usize) -> CMat {
    let a = CMat::from_vec(m, m, entries.to_vec());
    let mut p = a.matmul(&a.adjoint());
    for i in 0..m {
        p[(i, i)] += C64::from(0.05);
    }
    p
}

/// Partition of unity in the diagonalized domain: W_n = Q⁻¹ Diag(r_n) Q.
fn partitioned(q: &CMat, weights: &[Vec<f64>]) -> Vec<CMat> {
    let qinv = q.inverse(0.0).unwrap();
    let m = q.rows();
    weights
        .iter()
        .map(|w| {
            let d: Vec<C64> = (0..m)
                .map(|k| C64::from(w[k] / weights.iter().map(|v| v[k]).sum::<f64>()))
                .collect();
            qinv.matmul(&CMat::diag(&d)).matmul(q)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stft_round_trip_is_transparent(samples in prop::collection::vec(-1.0..1.0f64, 200..1500), hop_pow in 5u32..7) {
        let hop = 1usize << hop_pow;
        let cfg = StftConfig { fft_size: 4 * hop, hop, ..Default::default() };
        let input = vec![samples];
        let mut stream = FrameStream::new(&input, &cfg).unwrap();
        let mut frames = Vec::new();
        while let Some(f) = stream.next_frame() {
            frames.push(f.to_vec());
        }
        let out = synthesize_aligned(&frames, &cfg, input[0].len()).unwrap();
        let err = out.iter().zip(&input[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-10, "{}", err);
    }

    #[test]
    fn moments_are_complementary_and_gamma_is_hermitian(x in cvec(4), w in cvec(16), s in cvec(16)) {
        let wiener = CMat::from_vec(4, 4, w);
        let cov = pd(&s, 4);
        let (gamma, upsilon) = frame_moments(&x, &wiener, &cov);
        let xx = outer(&x);
        let scale = xx.max_abs().max(gamma.max_abs());
        prop_assert!(gamma.add(&upsilon).sub(&xx).max_abs() <= 4.0 * f64::EPSILON * scale);
        prop_assert!(gamma.hermitian_defect() <= 1e-12 * scale);
    }

    #[test]
    fn mvdr_is_distortionless_for_rank_one_targets(d in cvec(5), u in cvec(25), sigma in 0.01..100.0f64, r in 0usize..5) {
        prop_assume!(d[r].norm() > 1e-2);
        let gamma = outer(&d).scale(C64::from(sigma));
        let w = mvdr_weights(&gamma, &pd(&u, 5), r).unwrap();
        let resp = apply(&w, &d);
        prop_assert!((resp - d[r]).norm() <= 1e-10 * d.iter().map(|v| v.norm()).sum::<f64>());
    }

    #[test]
    fn mvdr_weights_ignore_statistics_scale(g in cvec(9), u in cvec(9), c in 1e-3..1e3f64) {
        let gamma = pd(&g, 3);
        let upsilon = pd(&u, 3);
        let w = mvdr_weights(&gamma, &upsilon, 0).unwrap();
        let ws = mvdr_weights(&gamma.scale(C64::from(c)), &upsilon.scale(C64::from(c)), 0).unwrap();
        for (a, b) in w.iter().zip(&ws) {
            prop_assert!((a - b).norm() <= 1e-9 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn ema_of_complementary_moments_stays_complementary(xs in prop::collection::vec(cvec(3), 2..6), w in cvec(9), s in cvec(9), alpha in 0.01..1.0f64) {
        let wiener = CMat::from_vec(3, 3, w);
        let cov = pd(&s, 3);
        let mut g = CMat::zeros(3, 3);
        let mut u = CMat::zeros(3, 3);
        let mut xx = CMat::zeros(3, 3);
        for (k, x) in xs.iter().enumerate() {
            let (gk, uk) = frame_moments(x, &wiener, &cov);
            ema_update(&mut g, &gk, alpha, k == 0);
            ema_update(&mut u, &uk, alpha, k == 0);
            ema_update(&mut xx, &outer(x), alpha, k == 0);
        }
        let scale = xx.max_abs().max(g.max_abs());
        prop_assert!(g.add(&u).sub(&xx).max_abs() <= 1e-12 * scale);
    }

    #[test]
    fn snapshot_ema_preserves_partition_of_unity(
        q1 in cvec(9), q2 in cvec(9),
        r1 in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 3), 2),
        r2 in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 3), 2),
        alpha in 0.01..1.0f64,
    ) {
        let mut q1 = CMat::from_vec(3, 3, q1);
        let mut q2 = CMat::from_vec(3, 3, q2);
        for i in 0..3 {
            q1[(i, i)] += C64::from(2.0);
            q2[(i, i)] += C64::from(2.0);
        }
        let block = |q: &CMat, r: &[Vec<f64>]| BlockPosteriorMean {
            sources: 2,
            bins: 1,
            wiener: partitioned(q, r),
            covariance: vec![CMat::identity(3); 2],
        };
        let first = publish_snapshot(&block(&q1, &r1), None, alpha, 0, 10);
        let second = publish_snapshot(&block(&q2, &r2), Some(&first), alpha, 0, 20);
        let sum = second.wiener(0, 0).add(second.wiener(1, 0));
        prop_assert!(sum.sub(&CMat::identity(3)).max_abs() <= 1e-10);
    }

    #[test]
    fn si_sdr_is_scale_invariant(r in prop::collection::vec(-1.0..1.0f64, 64), n in prop::collection::vec(-0.5..0.5f64, 64), k in 1e-3..1e3f64) {
        prop_assume!(r.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        let scaled: Vec<f64> = e.iter().map(|v| v * k).collect();
        prop_assert!((si_sdr(&e, &r).unwrap() - si_sdr(&scaled, &r).unwrap()).abs() < 1e-8);
    }
}
