//! Dual-context orchestration: a frame-driven front end (online WPE and
//! MVDR) and a block-driven back end (offline WPE and FastMNMF) exchanging
//! immutable posterior snapshots.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use arc_swap::ArcSwapOption;
use serde::{Deserialize, Serialize};

use crate::beamformer::{Beamformer, BeamformerConfig};
use crate::error::{Error, Result};
use crate::fastmnmf::{publish_snapshot, FastMnmfModel, FitReport, FitSchedule, ModelDims, PosteriorSnapshot, SteeringVectors};
use crate::linalg::{C64, ZERO};
use crate::scenesim::SteeringTable;
use crate::stft::{SpectrogramBlock, StftAnalyzer, StftConfig, StftSynthesizer};
use crate::wpe::{offline_wpe, OnlineWpe, WpeConfig};

/// How back-end ticks are scheduled relative to the frame stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheduling {
    /// Single context; every tick completes instantly at its block boundary.
    Ideal,
    /// Single context; a snapshot becomes usable only after the tick's
    /// measured compute time has elapsed in stream time, and boundaries that
    /// arrive while the back end is busy are skipped.
    #[default]
    Simulated,
    /// Two threads sharing a snapshot slot.
    Threaded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    /// Back-end block length `T^BSS` in frames.
    pub t_bss: usize,
    pub bss_overlap: f64,
    pub alpha_bss: f64,
    pub beamformer: BeamformerConfig,
    pub wpe_front: WpeConfig,
    pub wpe_back: WpeConfig,
    pub sources: usize,
    pub components: usize,
    pub fit: FitSchedule,
    pub warm_start: bool,
    pub target_azimuths: Vec<f64>,
    pub seed: u64,
    pub scheduling: Scheduling,
    /// Pace the threaded front end to the frame clock.
    pub realtime: bool,
    /// Extra sleep per back-end tick, for load testing.
    pub backend_delay_ms: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            t_bss: 256,
            bss_overlap: 0.75,
            alpha_bss: 0.1,
            beamformer: BeamformerConfig::default(),
            wpe_front: WpeConfig::default(),
            wpe_back: WpeConfig::default(),
            sources: 3,
            components: 8,
            fit: FitSchedule::default(),
            warm_start: true,
            target_azimuths: vec![0.0],
            seed: 0,
            scheduling: Scheduling::default(),
            realtime: false,
            backend_delay_ms: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Back-end shift `T^BSS·(1 − overlap)` in frames.
    pub fn shift(&self) -> Result<usize> {
        let s = self.t_bss as f64 * (1.0 - self.bss_overlap);
        if !(s >= 1.0) || (s - s.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "block shift t_bss·(1 − overlap) = {s} is not a positive integer"
            )));
        }
        Ok(s.round() as usize)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        self.stft.validate()?;
        self.shift()?;
        self.beamformer.validate(channels)?;
        self.wpe_front.validate()?;
        self.wpe_back.validate()?;
        if !(self.alpha_bss > 0.0 && self.alpha_bss <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_bss must lie in (0, 1], got {}",
                self.alpha_bss
            )));
        }
        if self.sources == 0 || self.components == 0 {
            return Err(Error::InvalidConfig("sources and components must be positive".into()));
        }
        if self.target_azimuths.is_empty() || self.target_azimuths.len() > self.sources.min(channels) {
            return Err(Error::InvalidConfig(format!(
                "need between 1 and {} target directions",
                self.sources.min(channels)
            )));
        }
        if self.t_bss < self.wpe_back.delay + self.wpe_back.taps {
            return Err(Error::InvalidConfig("t_bss is shorter than the WPE history".into()));
        }
        if self.fit.warmup_iters > self.fit.total_iters {
            return Err(Error::InvalidConfig("warm-up exceeds total iterations".into()));
        }
        Ok(())
    }

    pub fn dims(&self, channels: usize) -> ModelDims {
        ModelDims {
            sources: self.sources,
            channels,
            bins: self.stft.num_bins(),
            components: self.components,
        }
    }

    /// Steering vectors of the target directions.
    pub fn directions(&self, table: &SteeringTable, channels: usize) -> Result<Vec<SteeringVectors>> {
        if table.channels != channels || table.bins != self.stft.num_bins() || table.fft_size != self.stft.fft_size {
            return Err(Error::DimensionMismatch(format!(
                "steering table is {} channels x {} bins (fft {}), pipeline needs {} x {} (fft {})",
                table.channels,
                table.bins,
                table.fft_size,
                channels,
                self.stft.num_bins(),
                self.stft.fft_size
            )));
        }
        Ok(self
            .target_azimuths
            .iter()
            .map(|&az| table.nearest(az).1.to_vec())
            .collect())
    }
}

/// Single-writer, single-reader exchange of whole snapshots.
#[derive(Default)]
pub struct SnapshotSlot {
    current: ArcSwapOption<PosteriorSnapshot>,
    publications: AtomicU64,
}

impl SnapshotSlot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, snapshot: Arc<PosteriorSnapshot>) {
        self.current.store(Some(snapshot));
        self.publications.fetch_add(1, Ordering::Release);
    }

    pub fn load(&self) -> Option<Arc<PosteriorSnapshot>> {
        self.current.load_full()
    }

    pub fn publications(&self) -> u64 {
        self.publications.load(Ordering::Acquire)
    }
}

/// Snapshot together with the first frame that used it.
#[derive(Clone, Debug)]
pub struct ScheduledSnapshot {
    pub active_from: u64,
    pub snapshot: Arc<PosteriorSnapshot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontRecord {
    pub j: u64,
    pub frames: usize,
    pub compute_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackRecord {
    pub i: u64,
    pub compute_ms: f64,
    /// Boundaries skipped since the previous tick.
    pub skipped: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TimingLog {
    pub front: Vec<FrontRecord>,
    pub back: Vec<BackRecord>,
    /// Front-end compute per frame in milliseconds.
    pub frame_ms: Vec<f64>,
}

impl TimingLog {
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.front {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        for r in &self.back {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// `p`-th percentile (0–100) of the per-frame compute time.
    pub fn frame_percentile(&self, p: f64) -> f64 {
        percentile(&self.frame_ms, p)
    }
}

pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * (v.len() - 1) as f64).round() as usize;
    v[rank.min(v.len() - 1)]
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Enhanced target, same length as the input.
    pub enhanced: Vec<f64>,
    pub timing: TimingLog,
    pub schedule: Vec<ScheduledSnapshot>,
    pub ticks: u64,
    pub skipped_ticks: u64,
    pub failed_ticks: u64,
    pub wpe_resets: u64,
}

/// Most recent `T^BSS` mixture frames.
struct FrameRing {
    frames: VecDeque<Vec<C64>>,
    capacity: usize,
    bins: usize,
    channels: usize,
}

impl FrameRing {
    fn new(capacity: usize, bins: usize, channels: usize) -> Self {
        Self {
            frames: VecDeque::with_capacity(capacity + 1),
            capacity,
            bins,
            channels,
        }
    }

    fn push(&mut self, frame: &[C64]) {
        let mut slot = if self.frames.len() == self.capacity {
            self.frames.pop_front().expect("ring is full")
        } else {
            vec![ZERO; frame.len()]
        };
        slot.copy_from_slice(frame);
        self.frames.push_back(slot);
    }

    fn window(&self) -> SpectrogramBlock {
        let refs: Vec<&[C64]> = self.frames.iter().map(Vec::as_slice).collect();
        SpectrogramBlock::from_frames(&refs, self.bins, self.channels)
    }
}

/// Result of one back-end tick.
pub struct TickOutcome {
    pub snapshot: Option<Arc<PosteriorSnapshot>>,
    pub report: Option<FitReport>,
    pub compute_ms: f64,
}

/// Offline WPE followed by a warm-started FastMNMF fit and snapshot EMA.
pub struct BackEnd {
    cfg: PipelineConfig,
    dims: ModelDims,
    frames: usize,
    directions: Vec<SteeringVectors>,
    model: Option<FastMnmfModel>,
    last_end: Option<u64>,
    previous: Option<Arc<PosteriorSnapshot>>,
    ticks: u64,
    failures: u64,
}

impl BackEnd {
    pub fn new(cfg: &PipelineConfig, channels: usize, directions: Vec<SteeringVectors>) -> Result<Self> {
        cfg.validate(channels)?;
        Ok(Self {
            dims: cfg.dims(channels),
            frames: cfg.t_bss,
            cfg: cfg.clone(),
            directions,
            model: None,
            last_end: None,
            previous: None,
            ticks: 0,
            failures: 0,
        })
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn failures(&self) -> u64 {
        self.failures
    }

    pub fn latest(&self) -> Option<&Arc<PosteriorSnapshot>> {
        self.previous.as_ref()
    }

    /// Processes the window of mixture frames ending (exclusively) at global
    /// frame `end`.
    pub fn tick(&mut self, window: &SpectrogramBlock, end: u64) -> Result<TickOutcome> {
        let started = Instant::now();
        self.ticks += 1;
        let dereverbed = offline_wpe(window, &self.cfg.wpe_back)?;
        let mut model = match (self.model.take(), self.last_end) {
            (Some(mut m), Some(last)) if self.cfg.warm_start => {
                m.advance_frames((end - last) as usize);
                m
            }
            _ => FastMnmfModel::init(&self.directions, self.dims, self.frames, self.cfg.seed)?,
        };
        self.last_end = Some(end);
        let report = match model.fit(&dereverbed, &self.cfg.fit) {
            Ok(r) => r,
            Err(e) => {
                self.failures += 1;
                log::warn!("back-end tick {} failed ({e}); keeping the previous snapshot", self.ticks);
                self.model = None;
                self.delay();
                return Ok(TickOutcome {
                    snapshot: None,
                    report: None,
                    compute_ms: started.elapsed().as_secs_f64() * 1e3,
                });
            }
        };
        let mean = model.posterior_block_mean();
        let snapshot = Arc::new(publish_snapshot(
            &mean,
            self.previous.as_deref(),
            self.cfg.alpha_bss,
            0,
            end,
        ));
        self.previous = Some(snapshot.clone());
        self.model = Some(model);
        self.delay();
        Ok(TickOutcome {
            snapshot: Some(snapshot),
            report: Some(report),
            compute_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn delay(&self) {
        if self.cfg.backend_delay_ms > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(self.cfg.backend_delay_ms / 1e3));
        }
    }
}

/// Online WPE followed by the MVDR beamformer.
pub struct FrontEnd {
    wpe: OnlineWpe,
    bf: Beamformer,
    bins: usize,
    xhat: Vec<C64>,
    out: Vec<C64>,
    resets: u64,
}

impl FrontEnd {
    pub fn new(cfg: &PipelineConfig, channels: usize) -> Result<Self> {
        let bins = cfg.stft.num_bins();
        Ok(Self {
            wpe: OnlineWpe::new(&cfg.wpe_front, channels, bins)?,
            bf: Beamformer::new(cfg.beamformer, bins, channels, cfg.sources, 0)?,
            bins,
            xhat: vec![ZERO; bins * channels],
            out: vec![ZERO; cfg.beamformer.t_bf * bins],
            resets: 0,
        })
    }

    /// Feeds one mixture frame; returns the enhanced frames `[k × F]` that
    /// became ready (empty until a front-end block completes).
    pub fn process(&mut self, frame: &[C64], snapshot: Option<&PosteriorSnapshot>) -> &[C64] {
        self.resets += self.wpe.process_frame(frame, &mut self.xhat) as u64;
        let n = self.bf.push_frame(&self.xhat, snapshot, &mut self.out);
        &self.out[..n * self.bins]
    }

    /// Feeds an already dereverberated frame.
    pub fn process_dereverberated(&mut self, xhat: &[C64], snapshot: Option<&PosteriorSnapshot>) -> &[C64] {
        let n = self.bf.push_frame(xhat, snapshot, &mut self.out);
        &self.out[..n * self.bins]
    }

    pub fn flush(&mut self) -> &[C64] {
        let n = self.bf.flush(&mut self.out);
        &self.out[..n * self.bins]
    }

    pub fn beamformer(&self) -> &Beamformer {
        &self.bf
    }

    pub fn wpe_resets(&self) -> u64 {
        self.resets
    }
}

/// Streaming STFT of a whole signal as the front end sees it: frame `t`
/// ends at sample `(t + 1)·hop`, with zeros before the signal start.
pub struct FrameStream<'a> {
    input: &'a [Vec<f64>],
    analyzer: StftAnalyzer,
    hop: usize,
    frames: usize,
    next: usize,
    chunk: Vec<Vec<f64>>,
    frame: Vec<C64>,
}

impl<'a> FrameStream<'a> {
    pub fn new(input: &'a [Vec<f64>], stft: &StftConfig) -> Result<Self> {
        let channels = input.len();
        if channels == 0 {
            return Err(Error::InvalidConfig("no channels".into()));
        }
        let len = input[0].len();
        for (m, ch) in input.iter().enumerate() {
            if ch.len() != len {
                return Err(Error::ChannelLengthMismatch {
                    channel: m,
                    len: ch.len(),
                    expected: len,
                });
            }
        }
        if len == 0 {
            return Err(Error::SignalTooShort { len, min: 1 });
        }
        Ok(Self {
            input,
            analyzer: StftAnalyzer::new(stft, channels)?,
            hop: stft.hop,
            // trailing frames complete the overlap-add of the last samples
            frames: len.div_ceil(stft.hop) + stft.fft_size / stft.hop - 1,
            next: 0,
            chunk: vec![vec![0.0; stft.hop]; channels],
            frame: vec![ZERO; stft.num_bins() * channels],
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn next_frame(&mut self) -> Option<&[C64]> {
        if self.next == self.frames {
            return None;
        }
        let start = self.next * self.hop;
        for (dst, src) in self.chunk.iter_mut().zip(self.input) {
            let a = start.min(src.len());
            let b = (start + self.hop).min(src.len());
            dst[..b - a].copy_from_slice(&src[a..b]);
            dst[b - a..].fill(0.0);
        }
        let refs: Vec<&[f64]> = self.chunk.iter().map(Vec::as_slice).collect();
        self.analyzer.push(&refs, &mut self.frame);
        self.next += 1;
        Some(&self.frame)
    }
}

/// Overlap-add output aligned to the input: the analysis/synthesis delay of
/// `fft_size − hop` samples is removed and the result trimmed to `len`.
pub struct OutputStream {
    synth: StftSynthesizer,
    skip: usize,
    len: usize,
    chunk: Vec<f64>,
    out: Vec<f64>,
    bins: usize,
}

impl OutputStream {
    pub fn new(stft: &StftConfig, len: usize) -> Result<Self> {
        Ok(Self {
            synth: StftSynthesizer::new(stft)?,
            skip: stft.fft_size - stft.hop,
            len,
            chunk: vec![0.0; stft.hop],
            out: Vec::with_capacity(len + stft.fft_size),
            bins: stft.num_bins(),
        })
    }

    /// Adds frames `[k × F]`.
    pub fn push(&mut self, frames: &[C64]) {
        for fr in frames.chunks(self.bins) {
            self.synth.push(fr, &mut self.chunk);
            self.out.extend_from_slice(&self.chunk);
        }
    }

    pub fn finish(mut self) -> Vec<f64> {
        self.out.extend(self.synth.flush());
        let mut out = self.out.split_off(self.skip.min(self.out.len()));
        out.resize(self.len, 0.0);
        out
    }
}

/// Runs the full system over a multichannel signal.
pub fn run(input: &[Vec<f64>], cfg: &PipelineConfig, steering: &SteeringTable) -> Result<PipelineOutput> {
    let channels = input.len();
    cfg.validate(channels)?;
    let directions = cfg.directions(steering, channels)?;
    match cfg.scheduling {
        Scheduling::Threaded => run_threaded(input, cfg, directions),
        _ => run_single(input, cfg, directions),
    }
}

fn is_boundary(t: usize, t_bss: usize, shift: usize) -> bool {
    t >= t_bss && (t - t_bss) % shift == 0
}

struct FrontTimer {
    log: TimingLog,
    block_ms: f64,
    block_frames: usize,
    blocks: u64,
}

impl FrontTimer {
    fn new() -> Self {
        Self {
            log: TimingLog::default(),
            block_ms: 0.0,
            block_frames: 0,
            blocks: 0,
        }
    }

    fn frame(&mut self, ms: f64, emitted: usize, bins: usize) {
        self.log.frame_ms.push(ms);
        self.block_ms += ms;
        self.block_frames += 1;
        if emitted > 0 {
            self.blocks += 1;
            self.log.front.push(FrontRecord {
                j: self.blocks,
                frames: emitted / bins,
                compute_ms: self.block_ms,
            });
            self.block_ms = 0.0;
            self.block_frames = 0;
        }
    }
}

fn run_single(input: &[Vec<f64>], cfg: &PipelineConfig, directions: Vec<SteeringVectors>) -> Result<PipelineOutput> {
    let channels = input.len();
    let bins = cfg.stft.num_bins();
    let shift = cfg.shift()?;
    let hop_ms = cfg.stft.hop_ms();
    let mut stream = FrameStream::new(input, &cfg.stft)?;
    let mut output = OutputStream::new(&cfg.stft, input[0].len())?;
    let mut ring = FrameRing::new(cfg.t_bss, bins, channels);
    let mut back = BackEnd::new(cfg, channels, directions)?;
    let mut front = FrontEnd::new(cfg, channels)?;
    let mut timer = FrontTimer::new();
    let mut pending: VecDeque<ScheduledSnapshot> = VecDeque::new();
    let mut schedule = Vec::new();
    let mut current: Option<Arc<PosteriorSnapshot>> = None;
    let mut busy_until = 0u64;
    let mut skipped_total = 0u64;
    let mut skipped_since = 0u64;
    let mut t = 0usize;
    while let Some(frame) = stream.next_frame() {
        if is_boundary(t, cfg.t_bss, shift) {
            if (t as u64) < busy_until {
                skipped_total += 1;
                skipped_since += 1;
            } else {
                let outcome = back.tick(&ring.window(), t as u64)?;
                let delay_frames = match cfg.scheduling {
                    Scheduling::Ideal => 0,
                    _ => (outcome.compute_ms / hop_ms).ceil() as u64,
                };
                let ready = t as u64 + delay_frames;
                busy_until = ready;
                timer.log.back.push(BackRecord {
                    i: back.ticks(),
                    compute_ms: outcome.compute_ms,
                    skipped: skipped_since,
                });
                skipped_since = 0;
                if let Some(s) = outcome.snapshot {
                    pending.push_back(ScheduledSnapshot {
                        active_from: ready,
                        snapshot: s,
                    });
                }
            }
        }
        while pending.front().is_some_and(|p| p.active_from <= t as u64) {
            let mut p = pending.pop_front().expect("checked");
            p.active_from = t as u64;
            current = Some(p.snapshot.clone());
            schedule.push(p);
        }
        ring.push(frame);
        let started = Instant::now();
        let ready = front.process(frame, current.as_deref());
        let ms = started.elapsed().as_secs_f64() * 1e3;
        timer.frame(ms, ready.len(), bins);
        output.push(ready);
        t += 1;
    }
    output.push(front.flush());
    Ok(PipelineOutput {
        enhanced: output.finish(),
        timing: timer.log,
        schedule,
        ticks: back.ticks(),
        skipped_ticks: skipped_total,
        failed_ticks: back.failures(),
        wpe_resets: front.wpe_resets(),
    })
}

struct Job {
    window: SpectrogramBlock,
    end: u64,
    skipped: u64,
}

#[derive(Default)]
struct JobQueue {
    job: Mutex<(Option<Job>, bool)>,
    ready: Condvar,
}

impl JobQueue {
    fn close(&self) {
        let mut guard = self.job.lock().unwrap_or_else(|e| e.into_inner());
        guard.1 = true;
        self.ready.notify_one();
    }
}

/// Closes the queue when the front end leaves its loop, including by panic,
/// so the worker can be joined.
struct CloseOnDrop<'a>(&'a JobQueue);

impl Drop for CloseOnDrop<'_> {
    fn drop(&mut self) {
        self.0.close();
    }
}

fn run_threaded(input: &[Vec<f64>], cfg: &PipelineConfig, directions: Vec<SteeringVectors>) -> Result<PipelineOutput> {
    let channels = input.len();
    let bins = cfg.stft.num_bins();
    let shift = cfg.shift()?;
    let hop = Duration::from_secs_f64(cfg.stft.hop_ms() / 1e3);
    let mut back = BackEnd::new(cfg, channels, directions)?;
    let slot = SnapshotSlot::new();
    let queue = JobQueue::default();
    let failed = AtomicBool::new(false);
    let mut stream = FrameStream::new(input, &cfg.stft)?;
    let mut output = OutputStream::new(&cfg.stft, input[0].len())?;
    let mut ring = FrameRing::new(cfg.t_bss, bins, channels);
    let mut front = FrontEnd::new(cfg, channels)?;
    let mut timer = FrontTimer::new();
    let mut schedule = Vec::new();
    let mut skipped_total = 0u64;

    let back_result: Result<Vec<BackRecord>> = std::thread::scope(|scope| {
        let worker = scope.spawn(|| -> Result<Vec<BackRecord>> {
            let mut records = Vec::new();
            loop {
                let job = {
                    let mut guard = queue.job.lock().expect("queue lock");
                    loop {
                        if let Some(job) = guard.0.take() {
                            break Some(job);
                        }
                        if guard.1 {
                            break None;
                        }
                        guard = queue.ready.wait(guard).expect("queue lock");
                    }
                };
                let Some(job) = job else { break };
                match back.tick(&job.window, job.end) {
                    Ok(outcome) => {
                        records.push(BackRecord {
                            i: back.ticks(),
                            compute_ms: outcome.compute_ms,
                            skipped: job.skipped,
                        });
                        if let Some(s) = outcome.snapshot {
                            slot.publish(s);
                        }
                    }
                    Err(e) => {
                        failed.store(true, Ordering::Release);
                        return Err(e);
                    }
                }
            }
            Ok(records)
        });

        let closer = CloseOnDrop(&queue);
        let start = Instant::now();
        let mut seen = 0u64;
        let mut current: Option<Arc<PosteriorSnapshot>> = None;
        let mut t = 0usize;
        let mut pending_skips = 0u64;
        while let Some(frame) = stream.next_frame() {
            if failed.load(Ordering::Acquire) {
                break;
            }
            if cfg.realtime {
                let due = hop * t as u32;
                if let Some(wait) = due.checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
            if is_boundary(t, cfg.t_bss, shift) {
                let mut guard = queue.job.lock().expect("queue lock");
                if guard.0.is_some() {
                    skipped_total += 1;
                    pending_skips += 1;
                } else {
                    pending_skips = 0;
                }
                guard.0 = Some(Job {
                    window: ring.window(),
                    end: t as u64,
                    skipped: pending_skips,
                });
                queue.ready.notify_one();
                drop(guard);
            }
            let pubs = slot.publications();
            if pubs != seen {
                seen = pubs;
                current = slot.load();
                if let Some(s) = &current {
                    schedule.push(ScheduledSnapshot {
                        active_from: t as u64,
                        snapshot: s.clone(),
                    });
                }
            }
            ring.push(frame);
            let started = Instant::now();
            let ready = front.process(frame, current.as_deref());
            let ms = started.elapsed().as_secs_f64() * 1e3;
            timer.frame(ms, ready.len(), bins);
            output.push(ready);
            t += 1;
        }
        drop(closer);
        worker.join().expect("back-end thread panicked")
    });
    timer.log.back = back_result?;
    output.push(front.flush());
    Ok(PipelineOutput {
        enhanced: output.finish(),
        timing: timer.log,
        schedule,
        ticks: back.ticks(),
        skipped_ticks: skipped_total,
        failed_ticks: back.failures(),
        wpe_resets: front.wpe_resets(),
    })
}

/// Replays recorded snapshots through a fresh front end; used to compare
/// front-end settings against identical back-end output.
pub fn replay(input: &[Vec<f64>], cfg: &PipelineConfig, schedule: &[ScheduledSnapshot]) -> Result<Vec<f64>> {
    let channels = input.len();
    cfg.validate(channels)?;
    let mut stream = FrameStream::new(input, &cfg.stft)?;
    let mut output = OutputStream::new(&cfg.stft, input[0].len())?;
    let mut front = FrontEnd::new(cfg, channels)?;
    let mut next = 0;
    let mut current: Option<&PosteriorSnapshot> = None;
    let mut t = 0u64;
    while let Some(frame) = stream.next_frame() {
        while next < schedule.len() && schedule[next].active_from <= t {
            current = Some(&schedule[next].snapshot);
            next += 1;
        }
        output.push(front.process(frame, current));
        t += 1;
    }
    output.push(front.flush());
    Ok(output.finish())
}

/// Replays snapshots over precomputed dereverberated frames `[T][F × M]`.
pub fn replay_dereverberated(
    xhat: &[Vec<C64>],
    len: usize,
    cfg: &PipelineConfig,
    channels: usize,
    schedule: &[ScheduledSnapshot],
) -> Result<Vec<f64>> {
    cfg.validate(channels)?;
    let mut output = OutputStream::new(&cfg.stft, len)?;
    let mut front = FrontEnd::new(cfg, channels)?;
    let mut next = 0;
    let mut current: Option<&PosteriorSnapshot> = None;
    for (t, frame) in xhat.iter().enumerate() {
        while next < schedule.len() && schedule[next].active_from <= t as u64 {
            current = Some(&schedule[next].snapshot);
            next += 1;
        }
        output.push(front.process_dereverberated(frame, current));
    }
    output.push(front.flush());
    Ok(output.finish())
}

/// Online-WPE output frames of a whole signal, `[T][F × M]`.
pub fn dereverberate_frames(input: &[Vec<f64>], stft: &StftConfig, wpe: &WpeConfig) -> Result<Vec<Vec<C64>>> {
    let channels = input.len();
    let mut stream = FrameStream::new(input, stft)?;
    let mut online = OnlineWpe::new(wpe, channels, stft.num_bins())?;
    let mut frames = Vec::with_capacity(stream.num_frames());
    while let Some(frame) = stream.next_frame() {
        let mut out = vec![ZERO; frame.len()];
        online.process_frame(frame, &mut out);
        frames.push(out);
    }
    Ok(frames)
}

/// Synthesizes single-channel frames `[T][F]` aligned to an input of `len`.
pub fn synthesize_aligned(frames: &[Vec<C64>], stft: &StftConfig, len: usize) -> Result<Vec<f64>> {
    let mut output = OutputStream::new(stft, len)?;
    for fr in frames {
        output.push(fr);
    }
    Ok(output.finish())
}
