//! Weighted prediction error dereverberation.
//!
//! Two regimes share one configuration: an iterative block-offline variant
//! used by the back end, and a per-frame recursive variant for the front end
//! whose inverse correlation matrix is tracked as an exponential moving
//! average with weight `alpha` on the newest frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot_h, herm_solve, CMat, C64, ZERO};
use crate::stft::SpectrogramBlock;

/// Entry magnitude of `R⁻¹` beyond which the online recursion is reset.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Relative level under which a frame is treated as silence.
const SILENCE_RATIO: f64 = 1e-12;

/// PSD floor for the offline variant, relative to the block mean power.
const OFFLINE_PSD_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpeConfig {
    /// Filter taps `K`.
    pub taps: usize,
    /// Prediction delay `Δ` in frames.
    pub delay: usize,
    /// Offline alternations of PSD and filter estimation.
    pub iterations: usize,
    /// EMA weight of the newest frame in the online recursion.
    pub alpha: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self {
            taps: 5,
            delay: 3,
            iterations: 3,
            alpha: 0.005,
        }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.delay == 0 {
            return Err(Error::InvalidConfig("WPE taps and delay must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "WPE alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Frames of history the filter reaches back: `Δ + K − 1`.
    #[inline]
    pub fn history_len(&self) -> usize {
        self.delay + self.taps - 1
    }
}

/// Iterative block WPE. Frames before the block start are taken as zero.
pub fn offline_wpe(block: &SpectrogramBlock, cfg: &WpeConfig) -> Result<SpectrogramBlock> {
    cfg.validate()?;
    let frames = block.frames();
    let min = cfg.delay + cfg.taps;
    if frames < min {
        return Err(Error::BlockTooShort { frames, min });
    }
    let mean_power = block.mean_power();
    let mut out = block.clone();
    if mean_power == 0.0 {
        return Ok(out);
    }
    let floor = OFFLINE_PSD_FLOOR * mean_power;
    let m = block.channels();
    let mk = m * cfg.taps;
    let mut corr = CMat::zeros(mk, mk);
    let mut cross = CMat::zeros(mk, m);
    let mut stacked = vec![ZERO; mk];
    let mut psd = vec![0.0; frames];
    for f in 0..block.bins() {
        let x = block.bin_slice(f);
        for _ in 0..cfg.iterations {
            let est = out.bin_slice(f);
            for (t, p) in psd.iter_mut().enumerate() {
                let pw = est[t * m..(t + 1) * m].iter().map(|v| v.norm_sqr()).sum::<f64>();
                *p = (pw / m as f64).max(floor);
            }
            corr.fill(ZERO);
            cross.fill(ZERO);
            for t in 0..frames {
                if !stack_delayed(x, m, t, cfg, &mut stacked) {
                    continue;
                }
                let w = 1.0 / psd[t];
                accumulate_hermitian_upper(&mut corr, &stacked, w);
                let xt = &x[t * m..(t + 1) * m];
                for (r, sr) in stacked.iter().enumerate() {
                    let s = sr * w;
                    for (c, xc) in xt.iter().enumerate() {
                        cross[(r, c)] += s * xc.conj();
                    }
                }
            }
            mirror_upper(&mut corr);
            let filter = herm_solve(&corr, &cross, 1e-8)?;
            let dst = out.bin_slice_mut(f);
            for t in 0..frames {
                let xt = &x[t * m..(t + 1) * m];
                let dt = &mut dst[t * m..(t + 1) * m];
                dt.copy_from_slice(xt);
                if stack_delayed(x, m, t, cfg, &mut stacked) {
                    for (c, d) in dt.iter_mut().enumerate() {
                        let mut pred = ZERO;
                        for (r, s) in stacked.iter().enumerate() {
                            pred += filter[(r, c)].conj() * s;
                        }
                        *d -= pred;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Stacks `x_{t−Δ}, …, x_{t−Δ−K+1}` from a `[T × M]` bin slice, zero-filling
/// frames before the block. Returns false when every stacked frame is absent.
fn stack_delayed(x: &[C64], m: usize, t: usize, cfg: &WpeConfig, out: &mut [C64]) -> bool {
    if t < cfg.delay {
        return false;
    }
    for k in 0..cfg.taps {
        let dst = &mut out[k * m..(k + 1) * m];
        match (t - cfg.delay).checked_sub(k) {
            Some(src) => dst.copy_from_slice(&x[src * m..(src + 1) * m]),
            None => dst.fill(ZERO),
        }
    }
    true
}

fn accumulate_hermitian_upper(acc: &mut CMat, v: &[C64], w: f64) {
    let n = v.len();
    let data = acc.as_mut_slice();
    for r in 0..n {
        let vr = v[r] * w;
        for c in r..n {
            data[r * n + c] += vr * v[c].conj();
        }
    }
}

fn mirror_upper(a: &mut CMat) {
    let n = a.rows();
    let data = a.as_mut_slice();
    for r in 0..n {
        data[r * n + r].im = 0.0;
        for c in r + 1..n {
            data[c * n + r] = data[r * n + c].conj();
        }
    }
}

/// Per-frequency state of the online recursion.
#[derive(Clone, Debug)]
pub struct WpeBinState {
    /// `R⁻¹`, `MK × MK`.
    pub rinv: CMat,
    /// Prediction filter `H`, `MK × M`.
    pub filter: CMat,
    /// Last `Δ + K − 1` frames, newest first once full.
    ring: Vec<C64>,
    ring_head: usize,
    ring_filled: usize,
    frames_seen: u64,
    mean_power: f64,
    stacked: Vec<C64>,
    gain: Vec<C64>,
    err: Vec<C64>,
}

impl WpeBinState {
    fn new(m: usize, cfg: &WpeConfig) -> Self {
        let mk = m * cfg.taps;
        Self {
            rinv: CMat::identity(mk),
            filter: CMat::zeros(mk, m),
            ring: vec![ZERO; cfg.history_len() * m],
            ring_head: 0,
            ring_filled: 0,
            frames_seen: 0,
            mean_power: 0.0,
            stacked: vec![ZERO; mk],
            gain: vec![ZERO; mk],
            err: vec![ZERO; m],
        }
    }

    fn reset(&mut self) {
        self.rinv.set_identity();
        self.filter.fill(ZERO);
    }

    /// Ring offset of the frame `lag` steps in the past (`lag ≥ 1`), if held.
    fn past_offset(&self, lag: usize, m: usize) -> Option<usize> {
        let cap = self.ring.len() / m;
        if lag == 0 || lag > self.ring_filled {
            return None;
        }
        Some(((self.ring_head + cap - lag) % cap) * m)
    }

    fn past(&self, lag: usize, m: usize) -> Option<&[C64]> {
        self.past_offset(lag, m).map(|o| &self.ring[o..o + m])
    }

    fn push(&mut self, x: &[C64]) {
        let m = x.len();
        let cap = self.ring.len() / m;
        self.ring[self.ring_head * m..(self.ring_head + 1) * m].copy_from_slice(x);
        self.ring_head = (self.ring_head + 1) % cap;
        self.ring_filled = (self.ring_filled + 1).min(cap);
    }
}

/// Frame-recursive WPE over all frequency bins.
#[derive(Clone, Debug)]
pub struct OnlineWpe {
    cfg: WpeConfig,
    channels: usize,
    bins: Vec<WpeBinState>,
}

impl OnlineWpe {
    pub fn new(cfg: &WpeConfig, channels: usize, bins: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.alpha >= 1.0 {
            // R⁻¹ carries a (1 − α)⁻¹ factor
            return Err(Error::InvalidConfig(
                "online WPE needs alpha < 1".into(),
            ));
        }
        if channels == 0 {
            return Err(Error::InvalidConfig("no channels".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            bins: (0..bins).map(|_| WpeBinState::new(channels, cfg)).collect(),
        })
    }

    pub fn config(&self) -> &WpeConfig {
        &self.cfg
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn bin(&self, f: usize) -> &WpeBinState {
        &self.bins[f]
    }

    /// Dereverberates one `M`-vector at bin `f`, writing `x̂` to `out`.
    ///
    /// On divergence the bin is reset, `out` receives the input, and the
    /// error is returned.
    pub fn step(&mut self, f: usize, x: &[C64], out: &mut [C64]) -> Result<()> {
        let m = self.channels;
        assert_eq!(x.len(), m);
        assert_eq!(out.len(), m);
        let cfg = &self.cfg;
        let st = &mut self.bins[f];

        // φ: mean power over M channels and frames t−Δ+1 … t
        let mut power: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        for lag in 1..cfg.delay {
            if let Some(p) = st.past(lag, m) {
                power += p.iter().map(|v| v.norm_sqr()).sum::<f64>();
            }
        }
        let phi = power / (m * cfg.delay) as f64;
        let frame_power = x.iter().map(|v| v.norm_sqr()).sum::<f64>() / m as f64;
        st.frames_seen += 1;
        st.mean_power += (frame_power - st.mean_power) / st.frames_seen as f64;

        if st.ring_filled < cfg.history_len() || phi == 0.0 || phi < SILENCE_RATIO * st.mean_power
        {
            out.copy_from_slice(x);
            st.push(x);
            return Ok(());
        }

        // x̃_{t−Δ}: frames t−Δ, …, t−Δ−K+1
        for k in 0..cfg.taps {
            let o = st.past_offset(cfg.delay + k, m).expect("history is full");
            st.stacked[k * m..(k + 1) * m].copy_from_slice(&st.ring[o..o + m]);
        }
        let mk = st.stacked.len();
        let alpha = cfg.alpha;

        // g = R⁻¹ x̃, K = α g / ((1 − α) φ + α x̃ᴴ g)
        st.rinv.mul_vec_into(&st.stacked, &mut st.gain);
        let quad = dot_h(&st.stacked, &st.gain).re;
        let denom = (1.0 - alpha) * phi + alpha * quad;
        let kscale = alpha / denom;

        // R⁻¹ ← (R⁻¹ − K gᴴ) / (1 − α), using x̃ᴴ R⁻¹ = gᴴ
        let inv_forget = 1.0 / (1.0 - alpha);
        {
            let data = st.rinv.as_mut_slice();
            for r in 0..mk {
                let kr = st.gain[r] * kscale;
                for c in 0..mk {
                    let v = data[r * mk + c];
                    data[r * mk + c] = (v - kr * st.gain[c].conj()) * inv_forget;
                }
            }
        }
        st.rinv.hermitianize_mut();

        // e = x − Hᴴ x̃ with the previous filter, then H ← H + K eᴴ
        for (c, e) in st.err.iter_mut().enumerate() {
            let mut pred = ZERO;
            for (r, s) in st.stacked.iter().enumerate() {
                pred += st.filter[(r, c)].conj() * s;
            }
            *e = x[c] - pred;
        }
        for r in 0..mk {
            let kr = st.gain[r] * kscale;
            for c in 0..m {
                st.filter[(r, c)] += kr * st.err[c].conj();
            }
        }

        // x̂ = x − Hᴴ x̃ with the updated filter
        for (c, o) in out.iter_mut().enumerate() {
            let mut pred = ZERO;
            for (r, s) in st.stacked.iter().enumerate() {
                pred += st.filter[(r, c)].conj() * s;
            }
            *o = x[c] - pred;
        }
        st.push(x);

        let worst = st.rinv.max_abs();
        if !(worst <= DIVERGENCE_LIMIT) || !out.iter().all(|v| v.re.is_finite() && v.im.is_finite())
        {
            st.reset();
            out.copy_from_slice(x);
            return Err(Error::NumericalDivergence { freq: f });
        }
        Ok(())
    }

    /// Processes one `[F × M]` frame; returns the number of bins that diverged
    /// and were reset.
    pub fn process_frame(&mut self, frame: &[C64], out: &mut [C64]) -> usize {
        let m = self.channels;
        let mut diverged = 0;
        for f in 0..self.bins.len() {
            let r = self.step(f, &frame[f * m..(f + 1) * m], &mut out[f * m..(f + 1) * m]);
            if r.is_err() {
                diverged += 1;
            }
        }
        diverged
    }
}
