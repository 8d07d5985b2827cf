//! Front-end source statistics and Souden-form MVDR beamforming.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastmnmf::PosteriorSnapshot;
use crate::linalg::{herm_solve, CMat, C64, ONE, ZERO};

/// Relative diagonal loading of `Υ̃` before inversion.
pub const UPSILON_LOADING: f64 = 1e-6;
/// Minimum `|tr(Υ̃⁻¹Γ̃)|` accepted as non-silent.
pub const MIN_TRACE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamformerConfig {
    /// Front-end block size `T^BF` in frames.
    pub t_bf: usize,
    pub alpha: f64,
    pub ref_mic: usize,
    /// Also track statistics and weights of non-target sources.
    pub all_sources: bool,
}

impl Default for BeamformerConfig {
    fn default() -> Self {
        Self {
            t_bf: 2,
            alpha: 0.02,
            ref_mic: 0,
            all_sources: false,
        }
    }
}

impl BeamformerConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.t_bf == 0 {
            return Err(Error::InvalidConfig("t_bf must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_bf must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.ref_mic >= channels {
            return Err(Error::InvalidConfig(format!(
                "reference mic {} out of range for {} channels",
                self.ref_mic, channels
            )));
        }
        Ok(())
    }
}

/// `Γ = W̃x̂x̂ᴴW̃ᴴ + Σ̃` and `Υ = x̂x̂ᴴ − Γ` for one frame.
pub fn frame_moments(x: &[C64], wiener: &CMat, covariance: &CMat) -> (CMat, CMat) {
    let wx = wiener.mul_vec(x);
    let mut gamma = CMat::outer(&wx, &wx);
    gamma.add_assign(covariance);
    gamma.hermitianize_mut();
    let upsilon = CMat::outer(x, x).sub(&gamma);
    (gamma, upsilon)
}

/// `prev ← α·mean + (1−α)·prev`, or `mean` when there is no history.
pub fn ema_update(prev: &mut CMat, block_mean: &CMat, alpha: f64, first: bool) {
    if first || alpha >= 1.0 {
        prev.copy_from(block_mean);
    } else {
        prev.scale_mut(1.0 - alpha);
        prev.axpy(alpha, block_mean);
    }
}

/// `w = Υ̃⁻¹Γ̃u_{m′} / tr(Υ̃⁻¹Γ̃)`
pub fn mvdr_weights(gamma: &CMat, upsilon: &CMat, ref_mic: usize) -> Result<Vec<C64>> {
    let a = herm_solve(upsilon, gamma, UPSILON_LOADING)?;
    let tr = a.trace();
    if !(tr.norm() >= MIN_TRACE) {
        return Err(Error::DegenerateStatistics { trace: tr.norm() });
    }
    let inv = tr.inv();
    Ok(a.column(ref_mic).into_iter().map(|v| v * inv).collect())
}

/// `s = wᴴx̂`
#[inline]
pub fn apply(w: &[C64], x: &[C64]) -> C64 {
    w.iter().zip(x).map(|(a, b)| a.conj() * b).sum()
}

/// Per-frequency beamformer state driven frame by frame.
///
/// Frames are buffered until a block of `T^BF` is complete; the block's
/// statistics update the EMAs and the refreshed weights are applied to every
/// frame of that block.
pub struct Beamformer {
    cfg: BeamformerConfig,
    bins: usize,
    channels: usize,
    tracked: Vec<usize>,
    target: usize,
    /// `[tracked × F]`
    gamma_ema: Vec<CMat>,
    upsilon_ema: Vec<CMat>,
    weights: Vec<Vec<C64>>,
    gamma_acc: Vec<CMat>,
    /// `Σ_t x̂x̂ᴴ`, `[F]`
    xx_acc: Vec<CMat>,
    acc_frames: usize,
    block_index: u64,
    degenerate_blocks: u64,
    /// Buffered input `[T^BF × F × M]`.
    pending: Vec<C64>,
    pending_frames: usize,
    wx: Vec<C64>,
}

impl Beamformer {
    pub fn new(cfg: BeamformerConfig, bins: usize, channels: usize, sources: usize, target: usize) -> Result<Self> {
        cfg.validate(channels)?;
        if target >= sources {
            return Err(Error::InvalidConfig(format!(
                "target source {target} out of range for {sources} sources"
            )));
        }
        let tracked: Vec<usize> = if cfg.all_sources {
            (0..sources).collect()
        } else {
            vec![target]
        };
        let k = tracked.len() * bins;
        let mut unit = vec![ZERO; channels];
        unit[cfg.ref_mic] = ONE;
        Ok(Self {
            cfg,
            bins,
            channels,
            target,
            gamma_ema: vec![CMat::zeros(channels, channels); k],
            upsilon_ema: vec![CMat::zeros(channels, channels); k],
            weights: vec![unit; k],
            gamma_acc: vec![CMat::zeros(channels, channels); k],
            xx_acc: vec![CMat::zeros(channels, channels); bins],
            tracked,
            acc_frames: 0,
            block_index: 0,
            degenerate_blocks: 0,
            pending: vec![ZERO; cfg.t_bf * bins * channels],
            pending_frames: 0,
            wx: vec![ZERO; channels],
        })
    }

    pub fn config(&self) -> &BeamformerConfig {
        &self.cfg
    }

    /// Number of completed front-end blocks `j`.
    pub fn block_index(&self) -> u64 {
        self.block_index
    }

    pub fn degenerate_blocks(&self) -> u64 {
        self.degenerate_blocks
    }

    fn slot(&self, n: usize) -> Option<usize> {
        self.tracked.iter().position(|&s| s == n)
    }

    /// Current weights of source `n` at bin `f`, if tracked.
    pub fn weights(&self, n: usize, f: usize) -> Option<&[C64]> {
        self.slot(n).map(|k| self.weights[k * self.bins + f].as_slice())
    }

    pub fn gamma(&self, n: usize, f: usize) -> Option<&CMat> {
        self.slot(n).map(|k| &self.gamma_ema[k * self.bins + f])
    }

    pub fn upsilon(&self, n: usize, f: usize) -> Option<&CMat> {
        self.slot(n).map(|k| &self.upsilon_ema[k * self.bins + f])
    }

    /// Buffers one dereverberated frame `[F × M]`. Statistics are accumulated
    /// only when a snapshot is available. When the block completes, the target
    /// outputs of all its frames are written to `out` (`[T^BF × F]`) and the
    /// frame count is returned.
    pub fn push_frame(
        &mut self,
        frame: &[C64],
        snapshot: Option<&PosteriorSnapshot>,
        out: &mut [C64],
    ) -> usize {
        let (f_bins, m) = (self.bins, self.channels);
        assert_eq!(frame.len(), f_bins * m);
        let o = self.pending_frames * f_bins * m;
        self.pending[o..o + f_bins * m].copy_from_slice(frame);
        self.pending_frames += 1;
        if let Some(snap) = snapshot {
            self.accumulate_frame(frame, snap);
        }
        if self.pending_frames == self.cfg.t_bf {
            self.finish_block(out)
        } else {
            0
        }
    }

    /// Emits any buffered partial block.
    pub fn flush(&mut self, out: &mut [C64]) -> usize {
        if self.pending_frames == 0 {
            return 0;
        }
        self.finish_block(out)
    }

    fn accumulate_frame(&mut self, frame: &[C64], snap: &PosteriorSnapshot) {
        let (f_bins, m) = (self.bins, self.channels);
        for f in 0..f_bins {
            let x = &frame[f * m..(f + 1) * m];
            self.xx_acc[f].add_outer(x, x);
            for (k, &n) in self.tracked.iter().enumerate() {
                snap.wiener(n, f).mul_vec_into(x, &mut self.wx);
                let acc = &mut self.gamma_acc[k * f_bins + f];
                acc.add_outer(&self.wx, &self.wx);
                acc.add_assign(snap.covariance(n, f));
            }
        }
        self.acc_frames += 1;
    }

    fn finish_block(&mut self, out: &mut [C64]) -> usize {
        let (f_bins, m) = (self.bins, self.channels);
        if self.acc_frames > 0 {
            self.refresh_weights();
        }
        let k = self.slot(self.target).expect("target is tracked");
        let frames = self.pending_frames;
        for t in 0..frames {
            for f in 0..f_bins {
                let x = &self.pending[(t * f_bins + f) * m..(t * f_bins + f + 1) * m];
                out[t * f_bins + f] = apply(&self.weights[k * f_bins + f], x);
            }
        }
        self.pending_frames = 0;
        frames
    }

    fn refresh_weights(&mut self) {
        let f_bins = self.bins;
        let inv = 1.0 / self.acc_frames as f64;
        let first = self.block_index == 0;
        let mut degenerate = false;
        for k in 0..self.tracked.len() {
            for f in 0..f_bins {
                let i = k * f_bins + f;
                let mut gamma = self.gamma_acc[i].clone();
                gamma.scale_mut(inv);
                gamma.hermitianize_mut();
                let mut upsilon = self.xx_acc[f].clone();
                upsilon.scale_mut(inv);
                upsilon.axpy(-1.0, &gamma);
                ema_update(&mut self.gamma_ema[i], &gamma, self.cfg.alpha, first);
                ema_update(&mut self.upsilon_ema[i], &upsilon, self.cfg.alpha, first);
                self.upsilon_ema[i].hermitianize_mut();
                match mvdr_weights(&self.gamma_ema[i], &self.upsilon_ema[i], self.cfg.ref_mic) {
                    Ok(w) if w.iter().all(|v| v.is_finite()) => self.weights[i] = w,
                    _ => degenerate = true,
                }
                self.gamma_acc[i].fill(ZERO);
            }
        }
        for xx in &mut self.xx_acc {
            xx.fill(ZERO);
        }
        if degenerate {
            self.degenerate_blocks += 1;
            log::debug!("front-end block {} kept stale weights in some bins", self.block_index + 1);
        }
        self.acc_frames = 0;
        self.block_index += 1;
    }
}
