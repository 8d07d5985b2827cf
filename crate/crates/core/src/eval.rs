//! SI-SDR scoring, the baseline ladder, the front-end parameter grid, and
//! adaptation analysis after interferer moves.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastmnmf::{FastMnmfModel, PosteriorSnapshot};
use crate::linalg::{herm_solve, CMat, C64, ZERO};
use crate::pipeline::{self, FrameStream, PipelineConfig, ScheduledSnapshot};
use crate::scenesim::{SceneRender, SteeringTable};
use crate::stft::SpectrogramBlock;
use crate::wpe::offline_wpe;

pub const SI_SDR_CAP: f64 = 100.0;

/// Scale-invariant SDR in dB, clamped to `±100`. Inputs are trimmed to the
/// shorter length.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let n = estimate.len().min(reference.len());
    let (e, r) = (&estimate[..n], &reference[..n]);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if !(rr > 0.0) {
        return Err(Error::SilentReference);
    }
    let er: f64 = e.iter().zip(r).map(|(a, b)| a * b).sum();
    let scale = er / rr;
    let target = scale * scale * rr;
    let resid: f64 = e.iter().zip(r).map(|(a, b)| (a - scale * b).powi(2)).sum();
    if resid <= target * 1e-20 {
        return Ok(SI_SDR_CAP);
    }
    Ok((10.0 * (target / resid).log10()).clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

/// SI-SDR over consecutive segments of `seg` samples; a trailing partial
/// segment shorter than half a segment is merged into the previous one.
pub fn segment_scores(estimate: &[f64], reference: &[f64], seg: usize) -> Result<Vec<f64>> {
    let n = estimate.len().min(reference.len());
    let mut bounds = Vec::new();
    let mut a = 0;
    while a < n {
        let mut b = (a + seg).min(n);
        if n - b < seg / 2 {
            b = n;
        }
        bounds.push((a, b));
        a = b;
    }
    bounds
        .into_iter()
        .map(|(a, b)| si_sdr(&estimate[a..b], &reference[a..b]))
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Noisy,
    Wpe,
    WpeDs,
    WpeMpdr,
    Proposed,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Noisy, Method::Wpe, Method::WpeDs, Method::WpeMpdr, Method::Proposed];

    pub fn label(self) -> &'static str {
        match self {
            Method::Noisy => "noisy",
            Method::Wpe => "online_wpe",
            Method::WpeDs => "online_wpe+ds",
            Method::WpeMpdr => "online_wpe+mpdr",
            Method::Proposed => "proposed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pipeline: PipelineConfig,
    /// Scoring segment length in seconds.
    pub segment_s: f64,
    /// Frames of the mixture tail prepended as warm-up and excluded from
    /// scoring.
    pub warmup_frames: usize,
    /// MPDR baseline mixture-covariance EMA.
    pub mpdr_alpha: f64,
    pub mpdr_t_bf: usize,
    /// Adaptation analysis window and hop in seconds.
    pub window_s: f64,
    pub window_hop_s: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig {
                scheduling: pipeline::Scheduling::Ideal,
                ..Default::default()
            },
            segment_s: 8.0,
            warmup_frames: 1024,
            mpdr_alpha: 0.02,
            mpdr_t_bf: 1,
            window_s: 1.0,
            window_hop_s: 0.5,
        }
    }
}

/// Mixture with its warm-up prefix and the matching reference.
pub struct EvalSignal {
    pub mixture: Vec<Vec<f64>>,
    pub reference: Vec<f64>,
    /// Samples of prepended warm-up.
    pub offset: usize,
}

impl EvalSignal {
    pub fn new(scene: &SceneRender, target: usize, cfg: &EvalConfig) -> Self {
        Self::from_parts(&scene.mixture, scene.reference(target), cfg)
    }

    pub fn from_parts(mixture: &[Vec<f64>], reference: &[f64], cfg: &EvalConfig) -> Self {
        let len = mixture[0].len();
        let offset = (cfg.warmup_frames * cfg.pipeline.stft.hop).min(len);
        let mixture = mixture
            .iter()
            .map(|ch| {
                let mut v = ch[len - offset..].to_vec();
                v.extend_from_slice(ch);
                v
            })
            .collect();
        Self {
            mixture,
            reference: reference.to_vec(),
            offset,
        }
    }

    /// Part of a processed signal that is scored.
    pub fn scored<'a>(&self, processed: &'a [f64]) -> &'a [f64] {
        &processed[self.offset..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: Method,
    pub si_sdr_db: f64,
    pub improvement_db: f64,
    pub segments: Vec<f64>,
    /// Mean front-end compute per frame.
    pub compute_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub rows: Vec<MethodScore>,
}

impl BaselineReport {
    pub fn score(&self, method: Method) -> Option<&MethodScore> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// One whitespace-separated row per method.
    pub fn to_table(&self) -> String {
        let mut out = String::from("method             si_sdr_db  improvement_db  compute_ms  segments_db\n");
        for r in &self.rows {
            let segs: Vec<String> = r.segments.iter().map(|s| format!("{s:.2}")).collect();
            out.push_str(&format!(
                "{:<18} {:>9.2}  {:>14.2}  {:>10.3}  {}\n",
                r.method.label(),
                r.si_sdr_db,
                r.improvement_db,
                r.compute_ms,
                segs.join(",")
            ));
        }
        out
    }
}

/// Beamforms dereverberated frames with fixed steering (`mpdr = None`, DS) or
/// an MPDR on an EMA of the mixture covariance.
pub fn steered_beamformer(
    xhat: &[Vec<C64>],
    steering: &[C64],
    channels: usize,
    ref_mic: usize,
    mpdr: Option<(f64, usize)>,
) -> Vec<Vec<C64>> {
    let bins = steering.len() / channels;
    let ds: Vec<Vec<C64>> = (0..bins)
        .map(|f| {
            let d = &steering[f * channels..(f + 1) * channels];
            let norm: f64 = d.iter().map(|v| v.norm_sqr()).sum();
            d.iter().map(|v| v * d[ref_mic].conj() / norm).collect()
        })
        .collect();
    let Some((alpha, t_bf)) = mpdr else {
        return xhat
            .iter()
            .map(|fr| {
                (0..bins)
                    .map(|f| crate::beamformer::apply(&ds[f], &fr[f * channels..(f + 1) * channels]))
                    .collect()
            })
            .collect();
    };
    let mut weights = ds.clone();
    let mut ema = vec![CMat::zeros(channels, channels); bins];
    let mut acc = vec![CMat::zeros(channels, channels); bins];
    let mut out = Vec::with_capacity(xhat.len());
    let mut first = true;
    for block in xhat.chunks(t_bf) {
        for fr in block {
            for f in 0..bins {
                let x = &fr[f * channels..(f + 1) * channels];
                acc[f].add_outer(x, x);
            }
        }
        for f in 0..bins {
            acc[f].scale_mut(1.0 / block.len() as f64);
            crate::beamformer::ema_update(&mut ema[f], &acc[f], alpha, first);
            acc[f].fill(ZERO);
            let d = CMat::col_vector(&steering[f * channels..(f + 1) * channels]);
            if let Ok(rd) = herm_solve(&ema[f], &d, crate::beamformer::UPSILON_LOADING) {
                let dr = d.column(0);
                let denom: C64 = dr.iter().zip(rd.as_slice()).map(|(a, b)| a.conj() * b).sum();
                if denom.norm() > 0.0 && denom.is_finite() {
                    let s = dr[ref_mic].conj() / denom.re;
                    weights[f] = rd.as_slice().iter().map(|v| v * s).collect();
                }
            }
        }
        first = false;
        for fr in block {
            out.push(
                (0..bins)
                    .map(|f| crate::beamformer::apply(&weights[f], &fr[f * channels..(f + 1) * channels]))
                    .collect(),
            );
        }
    }
    out
}

fn ref_channel(xhat: &[Vec<C64>], channels: usize, ref_mic: usize) -> Vec<Vec<C64>> {
    xhat.iter()
        .map(|fr| fr.iter().skip(ref_mic).step_by(channels).copied().collect())
        .collect()
}

/// Runs the full system on an evaluation signal; returns the enhanced output
/// and the recorded snapshot schedule.
pub fn run_proposed(signal: &EvalSignal, cfg: &EvalConfig, steering: &SteeringTable) -> Result<pipeline::PipelineOutput> {
    pipeline::run(&signal.mixture, &cfg.pipeline, steering)
}

/// Scores every method of the baseline ladder on a rendered scene.
pub fn run_baselines(scene: &SceneRender, cfg: &EvalConfig) -> Result<BaselineReport> {
    let signal = EvalSignal::new(scene, 0, cfg);
    let proposed = run_proposed(&signal, cfg, &scene.steering)?;
    baselines_with(&scene.steering, cfg, &signal, &proposed)
}

/// Baseline ladder reusing an existing proposed-system run.
pub fn baselines_with(
    steering: &SteeringTable,
    cfg: &EvalConfig,
    signal: &EvalSignal,
    proposed: &pipeline::PipelineOutput,
) -> Result<BaselineReport> {
    let pc = &cfg.pipeline;
    let channels = signal.mixture.len();
    let ref_mic = pc.beamformer.ref_mic;
    let len = signal.mixture[0].len();
    let seg = (cfg.segment_s * pc.stft.sample_rate as f64).round() as usize;
    let reference = &signal.reference;
    let noisy_segments = segment_scores(signal.scored(&signal.mixture[ref_mic]), reference, seg)?;
    let noisy = mean(&noisy_segments);
    let directions = pc.directions(steering, channels)?;
    let frames_total = FrameStream::new(&signal.mixture, &pc.stft)?.num_frames() as f64;

    let started = Instant::now();
    let xhat = pipeline::dereverberate_frames(&signal.mixture, &pc.stft, &pc.wpe_front)?;
    let wpe_ms = started.elapsed().as_secs_f64() * 1e3 / frames_total;

    let mut rows = Vec::new();
    let mut push = |method: Method, out: &[f64], compute_ms: f64| -> Result<()> {
        let segments = segment_scores(signal.scored(out), reference, seg)?;
        let m = mean(&segments);
        rows.push(MethodScore {
            method,
            si_sdr_db: m,
            improvement_db: m - noisy,
            segments,
            compute_ms,
        });
        Ok(())
    };
    push(Method::Noisy, &signal.mixture[ref_mic], 0.0)?;
    let wpe_out = pipeline::synthesize_aligned(&ref_channel(&xhat, channels, ref_mic), &pc.stft, len)?;
    push(Method::Wpe, &wpe_out, wpe_ms)?;
    let started = Instant::now();
    let ds = steered_beamformer(&xhat, &directions[0], channels, ref_mic, None);
    let ds_ms = wpe_ms + started.elapsed().as_secs_f64() * 1e3 / frames_total;
    push(Method::WpeDs, &pipeline::synthesize_aligned(&ds, &pc.stft, len)?, ds_ms)?;
    let started = Instant::now();
    let mpdr = steered_beamformer(&xhat, &directions[0], channels, ref_mic, Some((cfg.mpdr_alpha, cfg.mpdr_t_bf)));
    let mpdr_ms = wpe_ms + started.elapsed().as_secs_f64() * 1e3 / frames_total;
    push(Method::WpeMpdr, &pipeline::synthesize_aligned(&mpdr, &pc.stft, len)?, mpdr_ms)?;
    let proposed_ms = crate::eval::mean(&proposed.timing.frame_ms);
    push(Method::Proposed, &proposed.enhanced, proposed_ms)?;
    Ok(BaselineReport { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub t_bf: usize,
    pub alpha_bf: f64,
    pub si_sdr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub t_bf: Vec<usize>,
    pub alpha_bf: Vec<f64>,
    /// Row-major `[t_bf × alpha_bf]`.
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn cell(&self, t_bf: usize, alpha: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.t_bf == t_bf && c.alpha_bf == alpha)
    }

    /// `α^BF` with the best score for a given `T^BF`.
    pub fn best_alpha(&self, t_bf: usize) -> Option<f64> {
        self.cells
            .iter()
            .filter(|c| c.t_bf == t_bf)
            .max_by(|a, b| a.si_sdr_db.total_cmp(&b.si_sdr_db))
            .map(|c| c.alpha_bf)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("t_bf");
        for a in &self.alpha_bf {
            out.push_str(&format!("  a={a:<7}"));
        }
        out.push('\n');
        for (r, t) in self.t_bf.iter().enumerate() {
            out.push_str(&format!("{t:<4}"));
            for c in 0..self.alpha_bf.len() {
                out.push_str(&format!("  {:>9.2}", self.cells[r * self.alpha_bf.len() + c].si_sdr_db));
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every `(T^BF, α^BF)` cell against one recorded back-end run.
pub fn grid_search_with(
    signal: &EvalSignal,
    cfg: &EvalConfig,
    schedule: &[ScheduledSnapshot],
    t_bf_list: &[usize],
    alpha_list: &[f64],
) -> Result<GridReport> {
    if t_bf_list.is_empty() || alpha_list.is_empty() {
        return Err(Error::InvalidConfig("grid axes must be non-empty".into()));
    }
    let pc = &cfg.pipeline;
    let channels = signal.mixture.len();
    let len = signal.mixture[0].len();
    let seg = (cfg.segment_s * pc.stft.sample_rate as f64).round() as usize;
    let xhat = pipeline::dereverberate_frames(&signal.mixture, &pc.stft, &pc.wpe_front)?;
    let mut cells = Vec::with_capacity(t_bf_list.len() * alpha_list.len());
    for &t_bf in t_bf_list {
        for &alpha_bf in alpha_list {
            let mut cell_cfg = pc.clone();
            cell_cfg.beamformer.t_bf = t_bf;
            cell_cfg.beamformer.alpha = alpha_bf;
            let out = pipeline::replay_dereverberated(&xhat, len, &cell_cfg, channels, schedule)?;
            let segments = segment_scores(signal.scored(&out), &signal.reference, seg)?;
            cells.push(GridCell {
                t_bf,
                alpha_bf,
                si_sdr_db: mean(&segments),
            });
        }
    }
    Ok(GridReport {
        t_bf: t_bf_list.to_vec(),
        alpha_bf: alpha_list.to_vec(),
        cells,
    })
}

/// Full factorial grid over front-end settings on a rendered scene.
pub fn grid_search(scene: &SceneRender, cfg: &EvalConfig, t_bf_list: &[usize], alpha_list: &[f64]) -> Result<GridReport> {
    let signal = EvalSignal::new(scene, 0, cfg);
    let recorded = run_proposed(&signal, cfg, &scene.steering)?;
    grid_search_with(&signal, cfg, &recorded.schedule, t_bf_list, alpha_list)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveRecovery {
    pub move_s: f64,
    pub steady_db: f64,
    /// Windowed SI-SDR after the move, one per window hop.
    pub trace_db: Vec<f64>,
    /// Seconds from the move to the end of the first window within 2 dB of
    /// the steady state; `None` if it never recovers.
    pub recovery_s: Option<f64>,
}

/// Windowed SI-SDR around each move time (seconds into the scored signal).
/// The steady state is the mean over windows in the 3 s before the move.
pub fn adaptation(
    estimate: &[f64],
    reference: &[f64],
    sample_rate: u32,
    moves: &[f64],
    cfg: &EvalConfig,
    tolerance_db: f64,
) -> Result<Vec<MoveRecovery>> {
    let fs = sample_rate as f64;
    let win = (cfg.window_s * fs).round() as usize;
    let hop = (cfg.window_hop_s * fs).round() as usize;
    let n = estimate.len().min(reference.len());
    let score = |a: usize| -> Result<f64> {
        let b = (a + win).min(n);
        si_sdr(&estimate[a..b], &reference[a..b])
    };
    let mut out = Vec::new();
    for (k, &mv) in moves.iter().enumerate() {
        let at = (mv * fs).round() as usize;
        let next = moves.get(k + 1).map_or(n, |m| ((m * fs).round() as usize).min(n));
        let pre_start = at.saturating_sub((3.0 * fs) as usize);
        if at < win || at >= n {
            continue;
        }
        let mut pre = Vec::new();
        let mut a = pre_start;
        while a + win <= at {
            pre.push(score(a)?);
            a += hop;
        }
        let steady = mean(&pre);
        let mut trace = Vec::new();
        let mut recovery = None;
        let mut a = at;
        while a + win <= next {
            let s = score(a)?;
            if recovery.is_none() && s >= steady - tolerance_db {
                recovery = Some((a + win - at) as f64 / fs);
            }
            trace.push(s);
            a += hop;
        }
        out.push(MoveRecovery {
            move_s: mv,
            steady_db: steady,
            trace_db: trace,
            recovery_s: recovery,
        });
    }
    Ok(out)
}

/// FastMNMF fitted on the entire dereverberated signal, with per-frame
/// posterior Wiener filtering of the target source at the reference mic.
pub fn offline_oracle(mixture: &[Vec<f64>], cfg: &PipelineConfig, steering: &SteeringTable) -> Result<Vec<f64>> {
    let channels = mixture.len();
    cfg.validate(channels)?;
    let bins = cfg.stft.num_bins();
    let mut stream = FrameStream::new(mixture, &cfg.stft)?;
    let frames = stream.num_frames();
    let mut block = SpectrogramBlock::zeros(bins, frames, channels);
    let mut t = 0;
    while let Some(fr) = stream.next_frame() {
        block.set_frame(t, fr);
        t += 1;
    }
    let xhat = offline_wpe(&block, &cfg.wpe_back)?;
    drop(block);
    let directions = cfg.directions(steering, channels)?;
    let mut model = FastMnmfModel::init(&directions, cfg.dims(channels), frames, cfg.seed)?;
    model.fit(&xhat, &cfg.fit)?;
    let ref_mic = cfg.beamformer.ref_mic;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut s = vec![ZERO; bins];
        for (f, v) in s.iter_mut().enumerate() {
            let w = &model.posterior(f, t)[0].wiener;
            let x = xhat.vector(f, t);
            *v = (0..channels).map(|k| w[(ref_mic, k)] * x[k]).sum();
        }
        out.push(s);
    }
    pipeline::synthesize_aligned(&out, &cfg.stft, mixture[0].len())
}

/// Snapshot-level diagnostics: mean squared deviation of `Σ_n W̃` from `I`.
pub fn partition_defect(s: &PosteriorSnapshot) -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..s.bins {
        let mut sum = CMat::zeros(s.channels, s.channels);
        for n in 0..s.sources {
            sum.add_assign(s.wiener(n, f));
        }
        worst = worst.max(sum.sub(&CMat::identity(s.channels)).max_abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{render, ArrayGeometry, ReverbSpec, SceneSpec, SignalSpec, SourceSpec, SteeringGrid};
    use rand::{SeedableRng, Rng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_signal_hits_the_cap() {
        let r: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP);
        let scaled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&scaled, &r).unwrap(), SI_SDR_CAP);
    }

    #[test]
    fn orthogonal_noise_of_equal_energy_is_zero_db() {
        let r = vec![1.0, 0.0, 1.0, 0.0];
        let e = vec![1.0, 1.0, 1.0, -1.0];
        // residual [0, 1, 0, -1] is orthogonal to r and carries equal energy
        assert!(si_sdr(&e, &r).unwrap().abs() < 1e-12);
    }

    #[test]
    fn silent_reference_is_an_error() {
        assert_eq!(si_sdr(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::SilentReference));
    }

    #[test]
    fn scale_invariance_and_trim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = r.iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        let base = si_sdr(&e, &r).unwrap();
        for k in [0.01, 3.0, 1e4] {
            let s: Vec<f64> = e.iter().map(|v| v * k).collect();
            assert!((si_sdr(&s, &r).unwrap() - base).abs() < 1e-9);
        }
        let longer = [e.clone(), vec![5.0; 10]].concat();
        assert_eq!(si_sdr(&longer, &r).unwrap(), base);
        // the score depends only on the angle between the signals
        assert!((si_sdr(&r, &e).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn segments_merge_short_tail() {
        let r: Vec<f64> = (0..24).map(|i| (i as f64).cos()).collect();
        assert_eq!(segment_scores(&r, &r, 10).unwrap().len(), 2);
        assert_eq!(segment_scores(&r, &r, 5).unwrap().len(), 5);
    }

    fn anechoic_single(duration: f64) -> SceneRender {
        let spec = SceneSpec {
            duration,
            sample_rate: 16000,
            ref_mic: 0,
            array: ArrayGeometry::circular(4, 0.05),
            sources: vec![SourceSpec {
                name: "target".into(),
                signal: SignalSpec::PinkAm { seed: 5 },
                schedule: vec![(0.0, 0.0)],
                distance: 1.5,
                level_db: -26.0,
            }],
            noise: Some(crate::scenesim::NoiseSpec {
                level_db: -26.0,
                seed: 9,
                plane_waves: 16,
            }),
            reverb: ReverbSpec {
                rt60: 0.0,
                ..Default::default()
            },
            steering: SteeringGrid {
                step_deg: 5.0,
                fft_size: 512,
            },
        };
        render(&spec, 1).unwrap()
    }

    #[test]
    fn delay_and_sum_gains_over_passthrough() {
        let scene = anechoic_single(3.0);
        let stft = crate::stft::StftConfig {
            fft_size: 512,
            hop: 128,
            ..Default::default()
        };
        let frames = {
            let mut s = FrameStream::new(&scene.mixture, &stft).unwrap();
            let mut v = Vec::new();
            while let Some(f) = s.next_frame() {
                v.push(f.to_vec());
            }
            v
        };
        let (_, d) = scene.steering.nearest(0.0);
        let ds = steered_beamformer(&frames, d, 4, 0, None);
        let len = scene.mixture[0].len();
        let out = pipeline::synthesize_aligned(&ds, &stft, len).unwrap();
        let noisy = si_sdr(&scene.mixture[0], scene.reference(0)).unwrap();
        let beamformed = si_sdr(&out, scene.reference(0)).unwrap();
        assert!(beamformed >= noisy, "{beamformed} < {noisy}");
    }

    #[test]
    fn ds_weights_are_distortionless_toward_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d: Vec<C64> = (0..3).map(|_| C64::from_polar(0.5, rng.gen_range(0.0..6.0))).collect();
        let x: Vec<Vec<C64>> = vec![d.clone(); 4];
        for mpdr in [None, Some((0.5, 1)), Some((0.1, 2))] {
            let out = steered_beamformer(&x, &d, 3, 1, mpdr);
            for fr in &out {
                assert!((fr[0] - d[1]).norm() < 1e-6, "{mpdr:?}: {}", fr[0]);
            }
        }
    }

    #[test]
    fn adaptation_finds_recovery() {
        let fs = 100;
        let n = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // clean before 5 s, noisy for 1.5 s, clean afterwards
        let e: Vec<f64> = r
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let noisy = (500..650).contains(&i);
                v + if noisy { rng.gen_range(-3.0..3.0) } else { rng.gen_range(-0.05..0.05) }
            })
            .collect();
        let cfg = EvalConfig::default();
        let res = adaptation(&e, &r, fs, &[5.0], &cfg, 2.0).unwrap();
        assert_eq!(res.len(), 1);
        let rec = res[0].recovery_s.unwrap();
        assert!((rec - 2.5).abs() < 1e-9, "{rec}");
        assert!(res[0].trace_db[0] < res[0].steady_db - 10.0);
    }

    #[test]
    fn silence_is_reported_by_every_method() {
        let scene = anechoic_single(1.0);
        let mut silent = scene.clone();
        for img in &mut silent.images {
            img.iter_mut().flatten().for_each(|v| *v = 0.0);
        }
        let signal = EvalSignal {
            mixture: silent.mixture.clone(),
            reference: vec![0.0; silent.mixture[0].len()],
            offset: 0,
        };
        let seg = 16000;
        for ch in [&signal.mixture[0]] {
            assert_eq!(segment_scores(ch, &signal.reference, seg), Err(Error::SilentReference));
        }
    }

    #[test]
    fn grid_has_one_finite_cell_per_pair() {
        let scene = anechoic_single(2.0);
        let cfg = EvalConfig {
            pipeline: PipelineConfig {
                stft: crate::stft::StftConfig {
                    fft_size: 512,
                    hop: 128,
                    ..Default::default()
                },
                t_bss: 32,
                sources: 2,
                components: 2,
                fit: crate::fastmnmf::FitSchedule {
                    total_iters: 4,
                    warmup_iters: 2,
                },
                scheduling: pipeline::Scheduling::Ideal,
                ..Default::default()
            },
            segment_s: 1.0,
            warmup_frames: 64,
            ..Default::default()
        };
        let grid = grid_search(&scene, &cfg, &[1, 16], &[0.5, 0.02]).unwrap();
        assert_eq!(grid.cells.len(), 4);
        assert!(grid.cells.iter().all(|c| c.si_sdr_db.is_finite()));
        assert_eq!(grid.to_table().lines().count(), 3);
        let report = run_baselines(&scene, &cfg).unwrap();
        assert_eq!(report.rows.len(), 5);
        assert_eq!(report.to_table().lines().count(), 6);
        let again = run_baselines(&scene, &cfg).unwrap();
        let strip = |r: &BaselineReport| r.rows.iter().map(|m| (m.si_sdr_db, m.segments.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&report), strip(&again));
    }
}
