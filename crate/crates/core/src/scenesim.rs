//! Synthetic multichannel scenes: a static target, a relocating interferer,
//! diffuse noise and exponential-tail reverberation, plus far-field steering
//! tables.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{C64, ZERO};

pub const SPEED_OF_SOUND: f64 = 343.0;
const FRACTIONAL_DELAY_TAPS: usize = 64;

/// Unit vector toward azimuth `az` (degrees) in the horizontal plane;
/// 0° points along +y, 90° along +x.
pub fn direction(az_deg: f64) -> [f64; 3] {
    let a = az_deg.to_radians();
    [a.sin(), a.cos(), 0.0]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    /// Microphone positions in meters relative to the array center.
    pub positions: Vec<[f64; 3]>,
}

impl ArrayGeometry {
    /// `m` microphones evenly spaced on a horizontal circle, the first at 0°.
    pub fn circular(m: usize, radius: f64) -> Self {
        let positions = (0..m)
            .map(|k| {
                let d = direction(360.0 * k as f64 / m as f64);
                [radius * d[0], radius * d[1], 0.0]
            })
            .collect();
        Self { positions }
    }

    /// `m` microphones on the x axis centered on the origin.
    pub fn linear(m: usize, spacing: f64) -> Self {
        let c = (m as f64 - 1.0) / 2.0;
        let positions = (0..m)
            .map(|k| [(k as f64 - c) * spacing, 0.0, 0.0])
            .collect();
        Self { positions }
    }

    pub fn channels(&self) -> usize {
        self.positions.len()
    }

    /// Far-field arrival delays in seconds relative to the array center.
    pub fn far_field_delays(&self, az_deg: f64) -> Vec<f64> {
        let u = direction(az_deg);
        self.positions
            .iter()
            .map(|p| -dot(p, &u) / SPEED_OF_SOUND)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSpec {
    /// Pink noise with a syllable-rate (4 Hz) random amplitude envelope.
    PinkAm { seed: u64 },
    /// Mono WAV file, looped or truncated to the scene duration.
    Wav { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    pub signal: SignalSpec,
    /// `(start seconds, azimuth degrees)`, start times strictly increasing
    /// and the first at 0.
    pub schedule: Vec<(f64, f64)>,
    #[serde(default = "default_distance")]
    pub distance: f64,
    /// RMS of the reference-mic image in dBFS.
    pub level_db: f64,
}

fn default_distance() -> f64 {
    1.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// RMS of the noise at the reference mic in dBFS.
    pub level_db: f64,
    pub seed: u64,
    #[serde(default = "default_plane_waves")]
    pub plane_waves: usize,
}

fn default_plane_waves() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReverbSpec {
    pub rt60: f64,
    /// Fraction of tail samples carrying a reflection, in (0, 1].
    pub reflection_density: f64,
    /// Direct-to-reverberant energy ratio in dB.
    pub drr_db: f64,
}

impl Default for ReverbSpec {
    fn default() -> Self {
        Self {
            rt60: 0.3,
            reflection_density: 1.0,
            drr_db: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringGrid {
    pub step_deg: f64,
    pub fft_size: usize,
}

impl Default for SteeringGrid {
    fn default() -> Self {
        Self {
            step_deg: 5.0,
            fft_size: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub duration: f64,
    pub sample_rate: u32,
    /// Index of the microphone whose images serve as references.
    #[serde(default)]
    pub ref_mic: usize,
    pub array: ArrayGeometry,
    pub sources: Vec<SourceSpec>,
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub reverb: ReverbSpec,
    #[serde(default)]
    pub steering: SteeringGrid,
}

impl SceneSpec {
    /// Desk-scale default: 4-mic circular array, target at 0°, an interferer
    /// moving among four azimuths every 8 s, diffuse noise at 5 dB SNR.
    pub fn default_scene() -> Self {
        let azimuths = [90.0, 225.0, 315.0, 45.0];
        let schedule = (0..8).map(|k| (8.0 * k as f64, azimuths[k % 4])).collect();
        Self {
            duration: 60.0,
            sample_rate: 16000,
            ref_mic: 0,
            array: ArrayGeometry::circular(4, 0.05),
            sources: vec![
                SourceSpec {
                    name: "target".into(),
                    signal: SignalSpec::PinkAm { seed: 1 },
                    schedule: vec![(0.0, 0.0)],
                    distance: 1.5,
                    level_db: -26.0,
                },
                SourceSpec {
                    name: "interferer".into(),
                    signal: SignalSpec::PinkAm { seed: 2 },
                    schedule,
                    distance: 1.5,
                    level_db: -26.0,
                },
            ],
            noise: Some(NoiseSpec {
                level_db: -31.0,
                seed: 3,
                plane_waves: 16,
            }),
            reverb: ReverbSpec::default(),
            steering: SteeringGrid::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.array.channels() < 2 {
            return bad("a scene needs at least 2 microphones".into());
        }
        if self.ref_mic >= self.array.channels() {
            return bad(format!("reference mic {} out of range", self.ref_mic));
        }
        if !(self.duration > 0.0) || self.sample_rate == 0 {
            return bad("duration and sample rate must be positive".into());
        }
        if !(self.reverb.rt60 >= 0.0)
            || !(self.reverb.reflection_density > 0.0 && self.reverb.reflection_density <= 1.0)
            || !self.reverb.drr_db.is_finite()
        {
            return bad("invalid reverb settings".into());
        }
        if self.sources.is_empty() {
            return bad("a scene needs at least one source".into());
        }
        for s in &self.sources {
            if s.schedule.is_empty() || s.schedule[0].0 != 0.0 {
                return bad(format!("source '{}': schedule must start at 0 s", s.name));
            }
            if s.schedule.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                return bad(format!(
                    "source '{}': schedule times must be strictly increasing",
                    s.name
                ));
            }
            if !s.level_db.is_finite() || !(s.distance > 0.0) {
                return bad(format!("source '{}': invalid level or distance", s.name));
            }
        }
        if let Some(n) = &self.noise {
            if !n.level_db.is_finite() || n.plane_waves < 8 {
                return bad("diffuse noise needs a finite level and at least 8 plane waves".into());
            }
        }
        if !(self.steering.step_deg > 0.0) || !self.steering.fft_size.is_power_of_two() {
            return bad("invalid steering grid".into());
        }
        Ok(())
    }
}

/// Rendered scene.
#[derive(Clone, Debug)]
pub struct SceneRender {
    pub sample_rate: u32,
    pub ref_mic: usize,
    /// `[M][samples]`
    pub mixture: Vec<Vec<f64>>,
    /// Per-source images `[N][M][samples]`.
    pub images: Vec<Vec<Vec<f64>>>,
    /// Diffuse noise `[M][samples]`, zeros when absent.
    pub noise: Vec<Vec<f64>>,
    pub steering: SteeringTable,
}

impl SceneRender {
    /// Reference-mic image of source `n`.
    pub fn reference(&self, n: usize) -> &[f64] {
        &self.images[n][self.ref_mic]
    }
}

/// Renders a scene; WAV sources are resolved through `load_wav`.
pub fn render_with(
    spec: &SceneSpec,
    seed: u64,
    load_wav: &mut dyn FnMut(&Path) -> Result<Vec<f64>>,
) -> Result<SceneRender> {
    spec.validate()?;
    let len = spec.num_samples();
    let fs = spec.sample_rate as f64;
    let m = spec.array.channels();
    let mut images = Vec::with_capacity(spec.sources.len());
    for (n, src) in spec.sources.iter().enumerate() {
        let dry = match &src.signal {
            SignalSpec::PinkAm { seed: s } => pink_am(len, fs, mix_seed(seed, *s)),
            SignalSpec::Wav { path } => fit_length(load_wav(path)?, len),
        };
        let mut image = vec![vec![0.0; len]; m];
        for (k, &(start, az)) in src.schedule.iter().enumerate() {
            let a = ((start * fs).round() as usize).min(len);
            let b = src
                .schedule
                .get(k + 1)
                .map_or(len, |next| ((next.0 * fs).round() as usize).min(len));
            if a >= b {
                continue;
            }
            let rir_seed = mix_seed(seed, 0x5249_5200 + (n as u64) * 1000 + k as u64);
            for (mic, pos) in spec.array.positions.iter().enumerate() {
                let rir = synth_rir(pos, az, src.distance, &spec.reverb, fs, mix_seed(rir_seed, mic as u64));
                let wet = fft_convolve(&dry[a..b], &rir);
                for (dst, v) in image[mic][a..].iter_mut().zip(&wet) {
                    *dst += v;
                }
            }
        }
        let rms = rms(&image[spec.ref_mic]);
        if rms > 0.0 {
            let gain = db_to_amp(src.level_db) / rms;
            image.iter_mut().flatten().for_each(|x| *x *= gain);
        }
        images.push(image);
    }
    let noise = match &spec.noise {
        Some(ns) => {
            let mut noise = diffuse_noise(&spec.array, len, fs, ns.plane_waves, mix_seed(seed, ns.seed));
            let r = rms(&noise[spec.ref_mic]);
            let gain = db_to_amp(ns.level_db) / r;
            noise.iter_mut().flatten().for_each(|x| *x *= gain);
            noise
        }
        None => vec![vec![0.0; len]; m],
    };
    let mut mixture = noise.clone();
    for image in &images {
        for (dst, src) in mixture.iter_mut().zip(image) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let steering = SteeringTable::far_field(&spec.array, spec.steering.step_deg, spec.steering.fft_size, spec.sample_rate);
    Ok(SceneRender {
        sample_rate: spec.sample_rate,
        ref_mic: spec.ref_mic,
        mixture,
        images,
        noise,
        steering,
    })
}

/// Renders a scene whose sources are all synthetic.
pub fn render(spec: &SceneSpec, seed: u64) -> Result<SceneRender> {
    render_with(spec, seed, &mut |p: &Path| {
        Err(Error::InvalidConfig(format!(
            "WAV source {} needs a loader",
            p.display()
        )))
    })
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn db_to_amp(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn fit_length(mut x: Vec<f64>, len: usize) -> Vec<f64> {
    if x.is_empty() {
        return vec![0.0; len];
    }
    let base = x.len();
    while x.len() < len {
        let take = (len - x.len()).min(base);
        x.extend_from_within(..take);
    }
    x.truncate(len);
    x
}

fn real_fft_size(n: usize) -> usize {
    n.next_power_of_two().max(2)
}

/// Gaussian noise with a `1/f` power spectrum, unit RMS.
pub fn pink_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = real_fft_size(len);
    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut spec = ifft.make_input_vec();
    for (k, s) in spec.iter_mut().enumerate().skip(1) {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *s = C64::new(re, im) / (k as f64).sqrt();
    }
    spec[0] = ZERO;
    spec[n / 2].im = 0.0;
    let mut out = ifft.make_output_vec();
    ifft.process(&mut spec, &mut out).expect("sizes match");
    out.truncate(len);
    let r = rms(&out);
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v /= r);
    }
    out
}

/// Pink noise gated by 250 ms syllables of random loudness.
fn pink_am(len: usize, fs: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = pink_noise(len, &mut rng);
    let syllable = (0.25 * fs) as usize;
    let phase = rng.gen_range(0..syllable.max(1));
    let mut gain = rng.gen_range(0.1..1.0);
    for (i, v) in x.iter_mut().enumerate() {
        let pos = (i + phase) % syllable.max(1);
        if pos == 0 {
            gain = if rng.gen_bool(0.2) { 0.02 } else { rng.gen_range(0.1..1.0) };
        }
        let shape = (std::f64::consts::PI * pos as f64 / syllable as f64).sin();
        *v *= gain * (0.05 + shape * shape);
    }
    x
}

/// Hann-windowed sinc interpolator delaying by `delay` samples (fractional),
/// added into `out` with amplitude `gain`.
fn add_fractional_impulse(out: &mut [f64], delay: f64, gain: f64) {
    let half = (FRACTIONAL_DELAY_TAPS / 2) as isize;
    let center = delay.floor() as isize;
    let frac = delay - delay.floor();
    for k in -half + 1..=half {
        let idx = center + k;
        if idx < 0 || idx as usize >= out.len() {
            continue;
        }
        let x = k as f64 - frac;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        };
        let w = 0.5 + 0.5 * (std::f64::consts::PI * x / half as f64).cos();
        if x.abs() < half as f64 {
            out[idx as usize] += gain * sinc * w;
        }
    }
}

/// Room impulse response from a point source at `distance` and azimuth `az`
/// to a microphone at `mic`: fractional-delay direct path with `1/r` decay,
/// then a seeded exponentially decaying noise tail.
pub fn synth_rir(mic: &[f64; 3], az: f64, distance: f64, reverb: &ReverbSpec, fs: f64, seed: u64) -> Vec<f64> {
    let u = direction(az);
    let src = [distance * u[0], distance * u[1], distance * u[2]];
    let r = ((src[0] - mic[0]).powi(2) + (src[1] - mic[1]).powi(2) + (src[2] - mic[2]).powi(2)).sqrt();
    // common propagation delay removed, keeping a margin for the interpolator
    let delay = (r - distance) / SPEED_OF_SOUND * fs + FRACTIONAL_DELAY_TAPS as f64 / 2.0;
    let direct_gain = distance / r;
    let tail_len = (reverb.rt60 * fs).round() as usize;
    let mut rir = vec![0.0; delay.ceil() as usize + FRACTIONAL_DELAY_TAPS + tail_len];
    add_fractional_impulse(&mut rir, delay, direct_gain);
    if tail_len == 0 {
        return rir;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = delay.round() as usize + 1;
    let decay = 3.0 * std::f64::consts::LN_10 / (reverb.rt60 * fs);
    let mut tail = vec![0.0; tail_len];
    for (i, v) in tail.iter_mut().enumerate() {
        let n: f64 = StandardNormal.sample(&mut rng);
        let hit = reverb.reflection_density >= 1.0 || rng.gen_bool(reverb.reflection_density);
        if hit {
            *v = n * (-decay * (i + 1) as f64).exp();
        }
    }
    let energy: f64 = tail.iter().map(|v| v * v).sum();
    if energy > 0.0 {
        let target = direct_gain * direct_gain * db_to_amp(-reverb.drr_db).powi(2);
        let g = (target / energy).sqrt();
        for (i, v) in tail.iter().enumerate() {
            if start + i < rir.len() {
                rir[start + i] += v * g;
            }
        }
    }
    rir
}

/// Full linear convolution via one real FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = real_fft_size(out_len);
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a = fwd.make_input_vec();
    a[..x.len()].copy_from_slice(x);
    let mut b = fwd.make_input_vec();
    b[..h.len()].copy_from_slice(h);
    let mut sa = fwd.make_output_vec();
    let mut sb = fwd.make_output_vec();
    fwd.process(&mut a, &mut sa).expect("sizes match");
    fwd.process(&mut b, &mut sb).expect("sizes match");
    for (p, q) in sa.iter_mut().zip(&sb) {
        *p *= q / n as f64;
    }
    sa[0].im = 0.0;
    sa[n / 2].im = 0.0;
    let mut out = inv.make_output_vec();
    inv.process(&mut sa, &mut out).expect("sizes match");
    out.truncate(out_len);
    out
}

/// Diffuse field: independent pink plane waves from evenly spaced azimuths,
/// synthesized directly in the frequency domain.
fn diffuse_noise(array: &ArrayGeometry, len: usize, fs: f64, waves: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = real_fft_size(len + 1);
    let bins = n / 2 + 1;
    let m = array.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0.0..360.0);
    let mut spectra = vec![vec![ZERO; bins]; m];
    for w in 0..waves {
        let az = offset + 360.0 * w as f64 / waves as f64;
        let delays = array.far_field_delays(az);
        for k in 1..bins {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            let s = C64::new(re, im) / (k as f64).sqrt();
            let omega = 2.0 * std::f64::consts::PI * k as f64 * fs / n as f64;
            for (mic, tau) in delays.iter().enumerate() {
                spectra[mic][k] += s * C64::from_polar(1.0, -omega * tau);
            }
        }
    }
    let mut planner = RealFftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(n);
    spectra
        .into_iter()
        .map(|mut s| {
            s[0] = ZERO;
            s[bins - 1].im = 0.0;
            let mut out = inv.make_output_vec();
            inv.process(&mut s, &mut out).expect("sizes match");
            out.truncate(len);
            out
        })
        .collect()
}

const STEERING_MAGIC: &[u8; 8] = b"STEER1\0\0";
const STEERING_VERSION: u32 = 1;

/// Unit-norm far-field steering vectors on an azimuth grid.
///
/// Binary layout (little-endian): 8-byte magic `STEER1\0\0`, then `u32`
/// version, azimuth count, bins, channels, fft size and sample rate; then per
/// azimuth an `f64` azimuth in degrees followed by `F` `(re, im)` `f64` pairs
/// for each microphone in turn.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringTable {
    pub fft_size: usize,
    pub sample_rate: u32,
    pub channels: usize,
    pub bins: usize,
    pub azimuths: Vec<f64>,
    /// Per azimuth, `[F × M]` with channels innermost.
    pub vectors: Vec<Vec<C64>>,
}

impl SteeringTable {
    pub fn far_field(array: &ArrayGeometry, step_deg: f64, fft_size: usize, sample_rate: u32) -> Self {
        let bins = fft_size / 2 + 1;
        let m = array.channels();
        let count = (360.0 / step_deg).round().max(1.0) as usize;
        let azimuths: Vec<f64> = (0..count).map(|k| k as f64 * step_deg).collect();
        let norm = 1.0 / (m as f64).sqrt();
        let vectors = azimuths
            .iter()
            .map(|&az| {
                let delays = array.far_field_delays(az);
                let mut v = Vec::with_capacity(bins * m);
                for f in 0..bins {
                    let omega = 2.0 * std::f64::consts::PI * f as f64 * sample_rate as f64 / fft_size as f64;
                    v.extend(delays.iter().map(|tau| C64::from_polar(norm, -omega * tau)));
                }
                v
            })
            .collect();
        Self {
            fft_size,
            sample_rate,
            channels: m,
            bins,
            azimuths,
            vectors,
        }
    }

    /// Entry closest in angle to `az_deg`.
    pub fn nearest(&self, az_deg: f64) -> (f64, &[C64]) {
        let dist = |a: f64| {
            let d = (a - az_deg).rem_euclid(360.0);
            d.min(360.0 - d)
        };
        let k = (0..self.azimuths.len())
            .min_by(|&a, &b| dist(self.azimuths[a]).total_cmp(&dist(self.azimuths[b])))
            .expect("table is non-empty");
        (self.azimuths[k], &self.vectors[k])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(STEERING_MAGIC)?;
        for v in [
            STEERING_VERSION,
            self.azimuths.len() as u32,
            self.bins as u32,
            self.channels as u32,
            self.fft_size as u32,
            self.sample_rate,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for (az, vec) in self.azimuths.iter().zip(&self.vectors) {
            w.write_all(&az.to_le_bytes())?;
            for m in 0..self.channels {
                for f in 0..self.bins {
                    let z = vec[f * self.channels + m];
                    w.write_all(&z.re.to_le_bytes())?;
                    w.write_all(&z.im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("steering table is truncated".into()))?;
        if &magic != STEERING_MAGIC {
            return Err(Error::Format("not a steering table (bad magic)".into()));
        }
        let mut u32s = [0u32; 6];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("steering header is truncated".into()))?;
            *v = u32::from_le_bytes(b);
        }
        let [version, count, bins, channels, fft_size, sample_rate] = u32s;
        if version != STEERING_VERSION {
            return Err(Error::Format(format!("unsupported steering table version {version}")));
        }
        let (count, bins, channels) = (count as usize, bins as usize, channels as usize);
        if bins != fft_size as usize / 2 + 1 || channels == 0 || count == 0 {
            return Err(Error::Format("inconsistent steering header".into()));
        }
        let read_f64 = |r: &mut dyn Read| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("steering table is truncated".into()))?;
            Ok(f64::from_le_bytes(b))
        };
        let mut azimuths = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            azimuths.push(read_f64(r)?);
            let mut v = vec![ZERO; bins * channels];
            for m in 0..channels {
                for f in 0..bins {
                    let re = read_f64(r)?;
                    let im = read_f64(r)?;
                    v[f * channels + m] = C64::new(re, im);
                }
            }
            vectors.push(v);
        }
        Ok(Self {
            fft_size: fft_size as usize,
            sample_rate,
            channels,
            bins,
            azimuths,
            vectors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anechoic_pair(az: f64, spacing: f64) -> SceneSpec {
        SceneSpec {
            duration: 1.0,
            sample_rate: 16000,
            ref_mic: 0,
            array: ArrayGeometry::linear(2, spacing),
            sources: vec![SourceSpec {
                name: "s".into(),
                signal: SignalSpec::PinkAm { seed: 4 },
                schedule: vec![(0.0, az)],
                distance: 1.5,
                level_db: -20.0,
            }],
            noise: None,
            reverb: ReverbSpec {
                rt60: 0.0,
                ..Default::default()
            },
            steering: SteeringGrid::default(),
        }
    }

    #[test]
    fn broadside_source_gives_identical_channels() {
        let r = render(&anechoic_pair(0.0, 0.05), 1).unwrap();
        let d: f64 = r.mixture[0]
            .iter()
            .zip(&r.mixture[1])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn endfire_source_delay_matches_geometry() {
        let r = render(&anechoic_pair(90.0, 0.05), 1).unwrap();
        let (a, b) = (&r.mixture[0], &r.mixture[1]);
        // source on +x reaches mic 1 (at +x) first, mic 0 lags
        let lag = |l: isize| -> f64 {
            (200..a.len() - 200)
                .map(|i| a[i] * b[(i as isize - l) as usize])
                .sum()
        };
        let (best, _) = (-10..=10)
            .map(|l| (l, lag(l)))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        let (ym, y0, yp) = (lag(best - 1), lag(best), lag(best + 1));
        let peak = best as f64 + 0.5 * (ym - yp) / (ym - 2.0 * y0 + yp);
        let expected = 0.05 / SPEED_OF_SOUND * 16000.0;
        assert!((peak - expected).abs() < 0.15, "{peak} vs {expected}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SceneSpec {
            duration: 2.0,
            ..SceneSpec::default_scene()
        };
        let a = render(&spec, 9).unwrap();
        let b = render(&spec, 9).unwrap();
        assert_eq!(a.mixture, b.mixture);
        let c = render(&spec, 10).unwrap();
        assert_ne!(a.mixture, c.mixture);
    }

    #[test]
    fn mixture_is_sum_of_images_and_noise() {
        let spec = SceneSpec {
            duration: 17.0,
            ..SceneSpec::default_scene()
        };
        let r = render(&spec, 2).unwrap();
        for m in 0..4 {
            for i in 0..r.mixture[m].len() {
                let s = r.noise[m][i] + r.images[0][m][i] + r.images[1][m][i];
                assert_eq!(r.mixture[m][i], s);
            }
        }
        let snr = 20.0 * (rms(r.reference(0)) / rms(&r.noise[0])).log10();
        assert!((snr - 5.0).abs() < 1e-9);
    }

    /// Schroeder backward integration; rt60 extrapolated from the −5..−25 dB span.
    fn schroeder_rt60(h: &[f64], fs: f64) -> f64 {
        let mut edc: Vec<f64> = h.iter().rev().scan(0.0, |acc, v| {
            *acc += v * v;
            Some(*acc)
        }).collect();
        edc.reverse();
        let e0 = edc[0];
        let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / e0).log10()).collect();
        let t5 = db.iter().position(|&d| d <= -5.0).unwrap();
        let t25 = db.iter().position(|&d| d <= -25.0).unwrap();
        3.0 * (t25 - t5) as f64 / fs
    }

    #[test]
    fn rir_tail_matches_rt60() {
        for rt60 in [0.2, 0.3, 0.6] {
            for seed in 0..3 {
                let reverb = ReverbSpec {
                    rt60,
                    reflection_density: 1.0,
                    drr_db: -10.0,
                };
                let h = synth_rir(&[0.0; 3], 30.0, 1.5, &reverb, 16000.0, seed);
                let est = schroeder_rt60(&h, 16000.0);
                assert!((est / rt60 - 1.0).abs() <= 0.2, "rt60 {rt60}: {est}");
            }
        }
    }

    #[test]
    fn rir_respects_drr() {
        let reverb = ReverbSpec {
            rt60: 0.3,
            reflection_density: 0.5,
            drr_db: 6.0,
        };
        let h = synth_rir(&[0.0; 3], 0.0, 1.5, &reverb, 16000.0, 1);
        let dry = ReverbSpec { rt60: 0.0, ..reverb };
        let d = synth_rir(&[0.0; 3], 0.0, 1.5, &dry, 16000.0, 1);
        let direct: f64 = d.iter().map(|v| v * v).sum();
        let tail: f64 = h.iter().enumerate().map(|(i, v)| (v - d.get(i).unwrap_or(&0.0)).powi(2)).sum();
        assert!((10.0 * (direct / tail).log10() - 6.0).abs() < 0.5);
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let x = [1.0, 2.0, -1.0, 0.5];
        let h = [0.5, -0.25, 2.0];
        let y = fft_convolve(&x, &h);
        for n in 0..y.len() {
            let mut s = 0.0;
            for k in 0..h.len() {
                if n >= k && n - k < x.len() {
                    s += x[n - k] * h[k];
                }
            }
            assert!((y[n] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn steering_vectors_are_unit_norm_with_far_field_phase() {
        let array = ArrayGeometry::linear(2, 0.05);
        let t = SteeringTable::far_field(&array, 5.0, 1024, 16000);
        assert_eq!(t.azimuths.len(), 72);
        let (az, v) = t.nearest(91.0);
        assert_eq!(az, 90.0);
        let f = 100;
        let omega = 2.0 * std::f64::consts::PI * f as f64 * 16000.0 / 1024.0;
        let ratio = v[f * 2 + 1] / v[f * 2];
        // mic 1 sits toward the source and leads mic 0 by spacing / c
        let expected = C64::from_polar(1.0, omega * 0.05 / SPEED_OF_SOUND);
        assert!((ratio - expected).norm() < 1e-12);
        let norm: f64 = v[f * 2..f * 2 + 2].iter().map(|z| z.norm_sqr()).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(t.nearest(358.0).0, 0.0);
    }

    #[test]
    fn steering_table_round_trips() {
        let t = SteeringTable::far_field(&ArrayGeometry::circular(3, 0.04), 30.0, 64, 8000);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 24 + 12 * (8 + 3 * 33 * 16));
        let back = SteeringTable::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        buf[0] = b'X';
        assert!(matches!(SteeringTable::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
        assert!(SteeringTable::read_from(&mut &buf[..20]).is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = SceneSpec::default_scene();
        let text = spec.to_toml().unwrap();
        assert_eq!(SceneSpec::from_toml(&text).unwrap(), spec);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SceneSpec::default_scene();
        spec.sources[1].schedule[2].0 = 1.0;
        assert!(spec.validate().is_err());
        let mut spec = SceneSpec::default_scene();
        spec.array = ArrayGeometry::linear(1, 0.1);
        assert!(spec.validate().is_err());
        let mut spec = SceneSpec::default_scene();
        spec.noise.as_mut().unwrap().plane_waves = 4;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn wav_sources_use_the_loader() {
        let mut spec = anechoic_pair(0.0, 0.05);
        spec.sources[0].signal = SignalSpec::Wav { path: "x.wav".into() };
        assert!(render(&spec, 0).is_err());
        let r = render_with(&spec, 0, &mut |_| Ok(vec![0.5, -0.5, 0.25])).unwrap();
        assert_eq!(r.mixture[0].len(), 16000);
    }
}
