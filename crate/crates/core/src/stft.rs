//! Multichannel STFT analysis and weighted overlap-add synthesis.

use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{C64, ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 256,
            window: WindowKind::Hann,
            sample_rate: 16000,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 4 || !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "fft_size must be a power of two >= 4, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.fft_size % self.hop != 0 {
            return Err(Error::InvalidConfig(format!(
                "hop {} must divide fft_size {}",
                self.hop, self.fft_size
            )));
        }
        // a Hann window only satisfies the COLA condition down to 50% overlap
        if self.fft_size / self.hop < 2 {
            return Err(Error::InvalidConfig("hop must be at most fft_size / 2".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// One-sided bin count `F = fft_size / 2 + 1`.
    #[inline]
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame shift in milliseconds.
    pub fn hop_ms(&self) -> f64 {
        1e3 * self.hop as f64 / self.sample_rate as f64
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.fft_size as f64
    }

    pub fn analysis_window(&self) -> Vec<f64> {
        let n = self.fft_size;
        match self.window {
            // periodic Hann
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }

    /// Analysis window divided by the overlapped squared-window sum, so that
    /// `Σ_k w_a(n − k·hop) w_s(n − k·hop) = 1`.
    pub fn synthesis_window(&self) -> Vec<f64> {
        let wa = self.analysis_window();
        let hop = self.hop;
        let mut norm = vec![0.0; hop];
        for (i, w) in wa.iter().enumerate() {
            norm[i % hop] += w * w;
        }
        wa.iter()
            .enumerate()
            .map(|(i, w)| w / norm[i % hop])
            .collect()
    }

    /// Number of frames `analyze` emits for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }
}

/// Complex STFT tensor `[F × T × M]` for one stretch of frames.
///
/// The channel axis is innermost, so the `M`-vector at `(f, t)` is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramBlock {
    bins: usize,
    frames: usize,
    channels: usize,
    /// Global index of the first frame.
    pub start_frame: usize,
    data: Vec<C64>,
}

impl SpectrogramBlock {
    pub fn zeros(bins: usize, frames: usize, channels: usize) -> Self {
        assert!(channels >= 1 && bins >= 1);
        Self {
            bins,
            frames,
            channels,
            start_frame: 0,
            data: vec![ZERO; bins * frames * channels],
        }
    }

    /// Builds a block from per-frame `[F × M]` spectra.
    pub fn from_frames(frames: &[&[C64]], bins: usize, channels: usize) -> Self {
        let mut block = Self::zeros(bins, frames.len(), channels);
        for (t, fr) in frames.iter().enumerate() {
            block.set_frame(t, fr);
        }
        block
    }

    #[inline]
    pub fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn offset(&self, f: usize, t: usize) -> usize {
        (f * self.frames + t) * self.channels
    }

    #[inline]
    pub fn get(&self, f: usize, t: usize, m: usize) -> C64 {
        self.data[self.offset(f, t) + m]
    }

    #[inline]
    pub fn set(&mut self, f: usize, t: usize, m: usize, v: C64) {
        let o = self.offset(f, t);
        self.data[o + m] = v;
    }

    /// The `M`-vector `x_ft`.
    #[inline]
    pub fn vector(&self, f: usize, t: usize) -> &[C64] {
        let o = self.offset(f, t);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn vector_mut(&mut self, f: usize, t: usize) -> &mut [C64] {
        let o = self.offset(f, t);
        let m = self.channels;
        &mut self.data[o..o + m]
    }

    /// All frames of bin `f`, `[T × M]`.
    pub fn bin_slice(&self, f: usize) -> &[C64] {
        let o = self.offset(f, 0);
        &self.data[o..o + self.frames * self.channels]
    }

    pub fn bin_slice_mut(&mut self, f: usize) -> &mut [C64] {
        let o = self.offset(f, 0);
        let len = self.frames * self.channels;
        &mut self.data[o..o + len]
    }

    /// Copies frame `t` out as `[F × M]`.
    pub fn frame(&self, t: usize) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.bins * self.channels);
        for f in 0..self.bins {
            out.extend_from_slice(self.vector(f, t));
        }
        out
    }

    pub fn set_frame(&mut self, t: usize, frame: &[C64]) {
        assert_eq!(frame.len(), self.bins * self.channels);
        for f in 0..self.bins {
            let m = self.channels;
            self.vector_mut(f, t)
                .copy_from_slice(&frame[f * m..(f + 1) * m]);
        }
    }

    /// Frames `[start, start + len)` as a new block.
    pub fn sub_block(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.frames);
        let mut out = Self::zeros(self.bins, len, self.channels);
        out.start_frame = self.start_frame + start;
        for f in 0..self.bins {
            let src = self.offset(f, start);
            let dst = out.offset(f, 0);
            out.data[dst..dst + len * self.channels]
                .copy_from_slice(&self.data[src..src + len * self.channels]);
        }
        out
    }

    /// Single channel `m` as per-frame spectra `[T][F]`.
    pub fn channel_frames(&self, m: usize) -> Vec<Vec<C64>> {
        (0..self.frames)
            .map(|t| (0..self.bins).map(|f| self.get(f, t, m)).collect())
            .collect()
    }

    pub fn mean_power(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|x| x.norm_sqr()).sum::<f64>() / self.data.len() as f64
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }
}

/// Streaming multichannel analyzer: feed `hop` samples per channel, get one
/// `[F × M]` frame back. The history starts zeroed.
pub struct StftAnalyzer {
    cfg: StftConfig,
    channels: usize,
    window: Vec<f64>,
    history: Vec<Vec<f64>>,
    fft: Arc<dyn RealToComplex<f64>>,
    scratch_in: Vec<f64>,
    scratch_out: Vec<C64>,
    fft_scratch: Vec<C64>,
}

impl StftAnalyzer {
    pub fn new(cfg: &StftConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(cfg.fft_size);
        let fft_scratch = fft.make_scratch_vec();
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            window: cfg.analysis_window(),
            history: vec![vec![0.0; cfg.fft_size]; channels],
            scratch_in: fft.make_input_vec(),
            scratch_out: fft.make_output_vec(),
            fft,
            fft_scratch,
        })
    }

    /// Shifts in one hop of samples per channel and writes the new frame.
    pub fn push(&mut self, hop_samples: &[&[f64]], frame_out: &mut [C64]) {
        let hop = self.cfg.hop;
        let n = self.cfg.fft_size;
        assert_eq!(hop_samples.len(), self.channels);
        assert_eq!(frame_out.len(), self.cfg.num_bins() * self.channels);
        for (hist, new) in self.history.iter_mut().zip(hop_samples) {
            assert_eq!(new.len(), hop);
            hist.copy_within(hop.., 0);
            hist[n - hop..].copy_from_slice(new);
        }
        for m in 0..self.channels {
            self.transform_channel(m, frame_out);
        }
    }

    fn transform_channel(&mut self, m: usize, frame_out: &mut [C64]) {
        for ((dst, x), w) in self
            .scratch_in
            .iter_mut()
            .zip(&self.history[m])
            .zip(&self.window)
        {
            *dst = x * w;
        }
        self.fft
            .process_with_scratch(&mut self.scratch_in, &mut self.scratch_out, &mut self.fft_scratch)
            .expect("fft buffer sizes are fixed at construction");
        for (f, v) in self.scratch_out.iter().enumerate() {
            frame_out[f * self.channels + m] = *v;
        }
    }
}

/// Analyzes a whole multichannel signal; frame `t` covers samples
/// `[t·hop, t·hop + fft_size)`.
pub fn analyze(samples: &[Vec<f64>], cfg: &StftConfig) -> Result<SpectrogramBlock> {
    cfg.validate()?;
    let channels = samples.len();
    if channels == 0 {
        return Err(Error::InvalidConfig("no channels".into()));
    }
    let len = samples[0].len();
    for (m, ch) in samples.iter().enumerate() {
        if ch.len() != len {
            return Err(Error::ChannelLengthMismatch {
                channel: m,
                len: ch.len(),
                expected: len,
            });
        }
    }
    if len < cfg.fft_size {
        return Err(Error::SignalTooShort {
            len,
            min: cfg.fft_size,
        });
    }
    let frames = cfg.num_frames(len);
    let bins = cfg.num_bins();
    let mut analyzer = StftAnalyzer::new(cfg, channels)?;
    let mut block = SpectrogramBlock::zeros(bins, frames, channels);
    let mut frame = vec![ZERO; bins * channels];
    for m in 0..channels {
        // prime the history with the first fft_size - hop samples
        let pre = cfg.fft_size - cfg.hop;
        analyzer.history[m][cfg.hop..].copy_from_slice(&samples[m][..pre]);
    }
    for t in 0..frames {
        let start = t * cfg.hop + cfg.fft_size - cfg.hop;
        let chunk: Vec<&[f64]> = samples
            .iter()
            .map(|ch| &ch[start..start + cfg.hop])
            .collect();
        analyzer.push(&chunk, &mut frame);
        block.set_frame(t, &frame);
    }
    Ok(block)
}

/// Streaming weighted overlap-add for a single channel.
pub struct StftSynthesizer {
    cfg: StftConfig,
    window: Vec<f64>,
    accum: Vec<f64>,
    ifft: Arc<dyn ComplexToReal<f64>>,
    spec: Vec<C64>,
    time: Vec<f64>,
    ifft_scratch: Vec<C64>,
}

impl StftSynthesizer {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        let ifft = planner.plan_fft_inverse(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            window: cfg.synthesis_window(),
            accum: vec![0.0; cfg.fft_size],
            spec: ifft.make_input_vec(),
            time: ifft.make_output_vec(),
            ifft_scratch: ifft.make_scratch_vec(),
            ifft,
        })
    }

    /// Adds one frame; the `hop` samples that are now complete go to `out`.
    pub fn push(&mut self, spectrum: &[C64], out: &mut [f64]) {
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop;
        assert_eq!(spectrum.len(), self.cfg.num_bins());
        assert_eq!(out.len(), hop);
        self.spec.copy_from_slice(spectrum);
        // a real signal has real DC and Nyquist bins
        self.spec[0].im = 0.0;
        self.spec[n / 2].im = 0.0;
        self.ifft
            .process_with_scratch(&mut self.spec, &mut self.time, &mut self.ifft_scratch)
            .expect("ifft buffer sizes are fixed at construction");
        let scale = 1.0 / n as f64;
        for ((acc, x), w) in self.accum.iter_mut().zip(&self.time).zip(&self.window) {
            *acc += x * scale * w;
        }
        out.copy_from_slice(&self.accum[..hop]);
        self.accum.copy_within(hop.., 0);
        self.accum[n - hop..].fill(0.0);
    }

    /// Emits the samples still pending after the last frame.
    pub fn flush(&mut self) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop;
        let tail = self.accum[..n - hop].to_vec();
        self.accum.fill(0.0);
        tail
    }
}

/// Overlap-adds single-channel frames `[T][F]`; output length is
/// `(T − 1)·hop + fft_size`.
pub fn synthesize(frames: &[Vec<C64>], cfg: &StftConfig) -> Result<Vec<f64>> {
    let mut synth = StftSynthesizer::new(cfg)?;
    let mut out = Vec::with_capacity(frames.len() * cfg.hop + cfg.fft_size);
    let mut chunk = vec![0.0; cfg.hop];
    for fr in frames {
        synth.push(fr, &mut chunk);
        out.extend_from_slice(&chunk);
    }
    if !frames.is_empty() {
        out.extend(synth.flush());
    }
    Ok(out)
}
