//! Fixtures shared by the criterion benches.

use postbeam_core::fastmnmf::PosteriorSnapshot;
use postbeam_core::linalg::{CMat, C64};
use postbeam_core::stft::SpectrogramBlock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<C64> {
    (0..len)
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

pub fn random_block(bins: usize, frames: usize, channels: usize, seed: u64) -> SpectrogramBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = SpectrogramBlock::zeros(bins, frames, channels);
    for t in 0..frames {
        block.set_frame(t, &random_vector(&mut rng, bins * channels));
    }
    block
}

/// Snapshot with well-formed posteriors: `W_n = Q⁻¹ Diag(r_n) Q` with the
/// `r_n` summing to one per channel.
pub fn random_snapshot(sources: usize, bins: usize, channels: usize, seed: u64) -> PosteriorSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut snap = PosteriorSnapshot::passthrough(sources, bins, channels, 0);
    for f in 0..bins {
        let q = CMat::from_vec(channels, channels, random_vector(&mut rng, channels * channels));
        let qinv = q.inverse(1e-9).expect("random matrix is invertible");
        let raw: Vec<Vec<f64>> = (0..sources)
            .map(|_| (0..channels).map(|_| rng.gen_range(0.05..1.0)).collect())
            .collect();
        for n in 0..sources {
            let r: Vec<C64> = (0..channels)
                .map(|k| C64::from(raw[n][k] / raw.iter().map(|s| s[k]).sum::<f64>()))
                .collect();
            let lam: Vec<C64> = r.iter().map(|v| C64::from((1.0 - v.re) * rng.gen_range(0.1..2.0))).collect();
            snap.wiener[n * bins + f] = qinv.matmul(&CMat::diag(&r)).matmul(&q);
            snap.covariance[n * bins + f] = qinv.matmul(&CMat::diag(&lam)).matmul(&qinv.adjoint());
        }
    }
    snap
}
