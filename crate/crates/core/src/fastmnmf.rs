//! Block-online FastMNMF back end.
//!
//! Each source image is modelled as `x_nft ~ N(0, λ_nft Q_f⁻¹ Diag(g_n) Q_f⁻ᴴ)`
//! with an NMF spectral model `λ_nft = Σ_c u_ncf v_nct`. Spectral factors and
//! spatial gains are fitted with multiplicative (MM) updates and the shared
//! diagonalizers `Q_f` with iterative projection. The fitted model yields
//! posterior Wiener filters and covariances, which are averaged per block and
//! smoothed across blocks into a [`PosteriorSnapshot`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{herm_solve, log_abs_det, CMat, C64, ONE, ZERO};
use crate::stft::SpectrogramBlock;

/// Absolute floor of the nonnegative parameters.
pub const PARAM_FLOOR: f64 = 1e-10;
/// Model-PSD floor relative to the block mean power.
pub const PSD_FLOOR_RATIO: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub sources: usize,
    pub channels: usize,
    pub bins: usize,
    pub components: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSchedule {
    pub total_iters: usize,
    /// Leading sweeps with frequency-shared spatial gains.
    pub warmup_iters: usize,
}

impl Default for FitSchedule {
    fn default() -> Self {
        Self {
            total_iters: 50,
            warmup_iters: 40,
        }
    }
}

/// Diagonal spatial gains `g̃_n`.
#[derive(Clone, Debug, PartialEq)]
pub enum SpatialGains {
    /// `[N × M]`
    Shared(Vec<f64>),
    /// `[N × F × M]`
    PerFrequency(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct FastMnmfModel {
    dims: ModelDims,
    frames: usize,
    /// `Q_f`, rows are the diagonalizing filters.
    pub q: Vec<CMat>,
    /// Cached `Q_f⁻¹`.
    pub qinv: Vec<CMat>,
    /// `u_ncf`, `[N × C × F]`.
    pub u: Vec<f64>,
    /// `v_nct`, `[N × C × T]`.
    pub v: Vec<f64>,
    pub gains: SpatialGains,
}

/// Per-sweep log-likelihood record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub iter: usize,
    pub loglik: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_loglik: f64,
    pub sweeps: Vec<SweepRecord>,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        self.sweeps.last().map_or(self.initial_loglik, |s| s.loglik)
    }

    /// One JSON record per sweep.
    pub fn to_json_lines(&self) -> String {
        self.sweeps
            .iter()
            .map(|s| serde_json::to_string(s).expect("plain record serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Posterior of one source image at one `(f, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePosterior {
    pub wiener: CMat,
    pub covariance: CMat,
}

/// Unit-normalized steering vectors of one direction, `[F × M]`.
pub type SteeringVectors = Vec<C64>;

impl FastMnmfModel {
    /// Builds the initial model. Source `n < directions.len()` gets column `n`
    /// of `Q_f⁻¹` set to its normalized steering vector; remaining columns are
    /// canonical basis vectors orthogonalized against the set.
    pub fn init(
        directions: &[SteeringVectors],
        dims: ModelDims,
        frames: usize,
        seed: u64,
    ) -> Result<Self> {
        let ModelDims {
            sources: n_src,
            channels: m,
            bins: f_bins,
            components: c_nmf,
        } = dims;
        if n_src == 0 || m == 0 || f_bins == 0 || c_nmf == 0 || frames == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if directions.len() > n_src || directions.len() > m {
            return Err(Error::InvalidConfig(format!(
                "{} directions for {} sources and {} channels",
                directions.len(),
                n_src,
                m
            )));
        }
        for d in directions {
            if d.len() != f_bins * m {
                return Err(Error::DimensionMismatch(format!(
                    "steering table has {} entries, expected {}",
                    d.len(),
                    f_bins * m
                )));
            }
        }
        let mut q = Vec::with_capacity(f_bins);
        let mut qinv = Vec::with_capacity(f_bins);
        for f in 0..f_bins {
            let cols: Vec<Vec<C64>> = directions
                .iter()
                .map(|d| normalized(&d[f * m..(f + 1) * m]))
                .collect();
            let mut basis = complete_basis(cols, m);
            let mut inv = CMat::zeros(m, m);
            for (c, col) in basis.drain(..).enumerate() {
                inv.set_column(c, &col);
            }
            let fwd = match inv.inverse(0.0) {
                Ok(fwd) => fwd,
                Err(_) => {
                    inv.add_assign(&CMat::identity(m).scale(C64::new(1e-3, 0.0)));
                    inv.inverse(0.0)
                        .map_err(|_| Error::SingularInitialization { freq: f })?
                }
            };
            q.push(fwd);
            qinv.push(inv);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = (0..n_src * c_nmf * f_bins)
            .map(|_| rng.gen_range(0.5..1.5))
            .collect();
        let v = (0..n_src * c_nmf * frames)
            .map(|_| rng.gen_range(0.5..1.5))
            .collect();
        let mut g = vec![0.0; n_src * m];
        for n in 0..n_src {
            for ch in 0..m {
                g[n * m + ch] = if n >= m || ch == n { 1.0 } else { 1e-2 };
            }
        }
        Ok(Self {
            dims,
            frames,
            q,
            qinv,
            u,
            v,
            gains: SpatialGains::Shared(g),
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Spatial gain `g̃_{nm}` at bin `f`.
    #[inline]
    pub fn gain(&self, n: usize, f: usize, m: usize) -> f64 {
        let ch = self.dims.channels;
        match &self.gains {
            SpatialGains::Shared(g) => g[n * ch + m],
            SpatialGains::PerFrequency(g) => g[(n * self.dims.bins + f) * ch + m],
        }
    }

    /// `λ_nft`
    pub fn psd(&self, n: usize, f: usize, t: usize) -> f64 {
        let (c_nmf, f_bins, t_len) = (self.dims.components, self.dims.bins, self.frames);
        (0..c_nmf)
            .map(|c| self.u[(n * c_nmf + c) * f_bins + f] * self.v[(n * c_nmf + c) * t_len + t])
            .sum()
    }

    /// Shifts the activations left by `shift` frames for a block that advanced
    /// by that much; vacated frames take each component's mean activation.
    pub fn advance_frames(&mut self, shift: usize) {
        let t_len = self.frames;
        let shift = shift.min(t_len);
        for row in self.v.chunks_mut(t_len) {
            let mean = row.iter().sum::<f64>() / t_len as f64;
            row.copy_within(shift.., 0);
            row[t_len - shift..].fill(mean);
        }
    }

    fn expand_gains(&mut self) {
        if let SpatialGains::Shared(g) = &self.gains {
            let (n_src, f_bins, m) = (self.dims.sources, self.dims.bins, self.dims.channels);
            let mut per = vec![0.0; n_src * f_bins * m];
            for n in 0..n_src {
                for f in 0..f_bins {
                    per[(n * f_bins + f) * m..(n * f_bins + f + 1) * m]
                        .copy_from_slice(&g[n * m..(n + 1) * m]);
                }
            }
            self.gains = SpatialGains::PerFrequency(per);
        }
    }

    /// Fits the model to a dereverberated block. The warm-up with shared gains
    /// only applies to a fresh model; warm-started per-frequency gains are kept.
    pub fn fit(&mut self, block: &SpectrogramBlock, schedule: &FitSchedule) -> Result<FitReport> {
        self.check_block(block)?;
        if schedule.warmup_iters == 0 {
            self.expand_gains();
        }
        let mut ws = Workspace::new(self, block);
        ws.refresh_projection(self, block);
        ws.refresh_psd(self);
        let initial = ws.loglik(self);
        if !initial.is_finite() {
            return Err(Error::LikelihoodDiverged { sweep: 0 });
        }
        let mut report = FitReport {
            initial_loglik: initial,
            sweeps: Vec::with_capacity(schedule.total_iters),
        };
        for iter in 0..schedule.total_iters {
            if iter == schedule.warmup_iters {
                self.expand_gains();
            }
            ws.update_u(self);
            ws.refresh_psd(self);
            ws.update_v(self);
            ws.refresh_psd(self);
            ws.update_gains(self);
            ws.refresh_psd(self);
            ws.update_q(self, block)?;
            ws.refresh_projection(self, block);
            self.normalize();
            ws.refresh_psd(self);
            let loglik = ws.loglik(self);
            if !loglik.is_finite() {
                return Err(Error::LikelihoodDiverged { sweep: iter + 1 });
            }
            report.sweeps.push(SweepRecord {
                iter: iter + 1,
                loglik,
            });
        }
        Ok(report)
    }

    /// Model log-likelihood of a block (up to a constant).
    pub fn log_likelihood(&self, block: &SpectrogramBlock) -> Result<f64> {
        self.check_block(block)?;
        let mut ws = Workspace::new(self, block);
        ws.refresh_projection(self, block);
        ws.refresh_psd(self);
        Ok(ws.loglik(self))
    }

    fn check_block(&self, block: &SpectrogramBlock) -> Result<()> {
        if block.bins() != self.dims.bins
            || block.channels() != self.dims.channels
            || block.frames() != self.frames
        {
            return Err(Error::DimensionMismatch(format!(
                "block {}x{}x{} vs model {}x{}x{}",
                block.bins(),
                block.frames(),
                block.channels(),
                self.dims.bins,
                self.frames,
                self.dims.channels
            )));
        }
        Ok(())
    }

    /// Removes scale ambiguities: `Σ_m g̃_nm = M` and `Σ_f u_ncf = 1`.
    fn normalize(&mut self) {
        let (n_src, c_nmf, f_bins, m) = (
            self.dims.sources,
            self.dims.components,
            self.dims.bins,
            self.dims.channels,
        );
        let t_len = self.frames;
        match &mut self.gains {
            SpatialGains::Shared(g) => {
                for n in 0..n_src {
                    let s = g[n * m..(n + 1) * m].iter().sum::<f64>() / m as f64;
                    g[n * m..(n + 1) * m].iter_mut().for_each(|x| *x /= s);
                    self.u[n * c_nmf * f_bins..(n + 1) * c_nmf * f_bins]
                        .iter_mut()
                        .for_each(|x| *x *= s);
                }
            }
            SpatialGains::PerFrequency(g) => {
                for n in 0..n_src {
                    for f in 0..f_bins {
                        let gs = &mut g[(n * f_bins + f) * m..(n * f_bins + f + 1) * m];
                        let s = gs.iter().sum::<f64>() / m as f64;
                        gs.iter_mut().for_each(|x| *x /= s);
                        for c in 0..c_nmf {
                            self.u[(n * c_nmf + c) * f_bins + f] *= s;
                        }
                    }
                }
            }
        }
        for nc in 0..n_src * c_nmf {
            let us = &mut self.u[nc * f_bins..(nc + 1) * f_bins];
            let s: f64 = us.iter().sum();
            us.iter_mut().for_each(|x| *x = (*x / s).max(PARAM_FLOOR));
            self.v[nc * t_len..(nc + 1) * t_len]
                .iter_mut()
                .for_each(|x| *x = (*x * s).max(PARAM_FLOOR));
        }
    }

    /// Posterior Wiener filter and covariance of every source at `(f, t)`.
    pub fn posterior(&self, f: usize, t: usize) -> Vec<FramePosterior> {
        let n_src = self.dims.sources;
        let m = self.dims.channels;
        let lam: Vec<f64> = (0..n_src).map(|n| self.psd(n, f, t)).collect();
        let total: Vec<f64> = (0..m)
            .map(|ch| (0..n_src).map(|n| lam[n] * self.gain(n, f, ch)).sum::<f64>())
            .collect();
        (0..n_src)
            .map(|n| {
                let own: Vec<f64> = (0..m).map(|ch| lam[n] * self.gain(n, f, ch)).collect();
                let ratio: Vec<f64> = own.iter().zip(&total).map(|(a, b)| a / b).collect();
                let resid: Vec<f64> = own.iter().zip(&ratio).map(|(a, r)| (1.0 - r) * a).collect();
                FramePosterior {
                    wiener: self.wiener_from_diag(f, &ratio),
                    covariance: self.covariance_from_diag(f, &resid),
                }
            })
            .collect()
    }

    /// Posteriors averaged over all frames of the fitted block.
    pub fn posterior_block_mean(&self) -> BlockPosteriorMean {
        let (n_src, m, f_bins) = (self.dims.sources, self.dims.channels, self.dims.bins);
        let t_len = self.frames;
        let mut wiener = Vec::with_capacity(n_src * f_bins);
        let mut covariance = Vec::with_capacity(n_src * f_bins);
        let mut lam = vec![0.0; n_src * t_len];
        let mut ratio_mean = vec![0.0; n_src * f_bins * m];
        let mut resid_mean = vec![0.0; n_src * f_bins * m];
        for f in 0..f_bins {
            for n in 0..n_src {
                for t in 0..t_len {
                    lam[n * t_len + t] = self.psd(n, f, t);
                }
            }
            for t in 0..t_len {
                for ch in 0..m {
                    let total: f64 = (0..n_src)
                        .map(|n| lam[n * t_len + t] * self.gain(n, f, ch))
                        .sum();
                    for n in 0..n_src {
                        let own = lam[n * t_len + t] * self.gain(n, f, ch);
                        let r = own / total;
                        ratio_mean[(n * f_bins + f) * m + ch] += r / t_len as f64;
                        resid_mean[(n * f_bins + f) * m + ch] += (1.0 - r) * own / t_len as f64;
                    }
                }
            }
        }
        for n in 0..n_src {
            for f in 0..f_bins {
                let o = (n * f_bins + f) * m;
                wiener.push(self.wiener_from_diag(f, &ratio_mean[o..o + m]));
                covariance.push(self.covariance_from_diag(f, &resid_mean[o..o + m]));
            }
        }
        BlockPosteriorMean {
            sources: n_src,
            bins: f_bins,
            wiener,
            covariance,
        }
    }

    /// `Q_f⁻¹ Diag(d) Q_f`
    fn wiener_from_diag(&self, f: usize, d: &[f64]) -> CMat {
        let m = self.dims.channels;
        let qinv = &self.qinv[f];
        let q = &self.q[f];
        CMat::from_fn(m, m, |r, c| {
            (0..m).map(|k| qinv[(r, k)] * d[k] * q[(k, c)]).sum()
        })
    }

    /// `Q_f⁻¹ Diag(d) Q_f⁻ᴴ`, hermitianized.
    fn covariance_from_diag(&self, f: usize, d: &[f64]) -> CMat {
        let m = self.dims.channels;
        let qinv = &self.qinv[f];
        let mut out = CMat::from_fn(m, m, |r, c| {
            (0..m).map(|k| qinv[(r, k)] * d[k] * qinv[(c, k)].conj()).sum()
        });
        out.hermitianize_mut();
        out
    }
}

fn normalized(v: &[C64]) -> Vec<C64> {
    let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

/// Extends `cols` to `m` columns with canonical basis vectors, each
/// orthogonalized against the columns chosen so far (largest residual first).
fn complete_basis(mut cols: Vec<Vec<C64>>, m: usize) -> Vec<Vec<C64>> {
    while cols.len() < m {
        let mut best: Option<(f64, Vec<C64>)> = None;
        for k in 0..m {
            let mut e = vec![ZERO; m];
            e[k] = ONE;
            for c in &cols {
                let proj: C64 = c.iter().zip(&e).map(|(a, b)| a.conj() * b).sum();
                for (x, ci) in e.iter_mut().zip(c) {
                    *x -= proj * ci;
                }
            }
            let norm = e.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            if best.as_ref().map_or(true, |(b, _)| norm > *b + 1e-12) {
                best = Some((norm, e));
            }
        }
        let (_, e) = best.expect("m >= 1");
        cols.push(normalized(&e));
    }
    cols
}

/// Scratch buffers for one fit; layouts noted per field.
struct Workspace {
    n_src: usize,
    m: usize,
    f_bins: usize,
    c_nmf: usize,
    t_len: usize,
    floor: f64,
    /// `|Q_f x_ft|²`, `[F × T × M]`
    proj: Vec<f64>,
    /// `λ_nft`, `[N × F × T]`
    lam: Vec<f64>,
    /// model PSD per diagonal channel, `[F × T × M]`
    yhat: Vec<f64>,
    /// `Σ_m g p ŷ⁻²` and `Σ_m g ŷ⁻¹`, `[N × F × T]`
    num: Vec<f64>,
    den: Vec<f64>,
}

impl Workspace {
    fn new(model: &FastMnmfModel, block: &SpectrogramBlock) -> Self {
        let d = model.dims;
        let t_len = model.frames;
        let power = block.mean_power();
        Self {
            n_src: d.sources,
            m: d.channels,
            f_bins: d.bins,
            c_nmf: d.components,
            t_len,
            floor: (PSD_FLOOR_RATIO * power).max(f64::MIN_POSITIVE),
            proj: vec![0.0; d.bins * t_len * d.channels],
            lam: vec![0.0; d.sources * d.bins * t_len],
            yhat: vec![0.0; d.bins * t_len * d.channels],
            num: vec![0.0; d.sources * d.bins * t_len],
            den: vec![0.0; d.sources * d.bins * t_len],
        }
    }

    fn refresh_projection(&mut self, model: &FastMnmfModel, block: &SpectrogramBlock) {
        for f in 0..self.f_bins {
            self.refresh_projection_bin(model, block, f);
        }
    }

    fn refresh_projection_bin(&mut self, model: &FastMnmfModel, block: &SpectrogramBlock, f: usize) {
        let m = self.m;
        let q = &model.q[f];
        for t in 0..self.t_len {
            let x = block.vector(f, t);
            let o = (f * self.t_len + t) * m;
            for ch in 0..m {
                let y: C64 = (0..m).map(|k| q[(ch, k)] * x[k]).sum();
                self.proj[o + ch] = y.norm_sqr();
            }
        }
    }

    fn refresh_psd(&mut self, model: &FastMnmfModel) {
        let (n_src, c_nmf, f_bins, t_len, m) = (self.n_src, self.c_nmf, self.f_bins, self.t_len, self.m);
        self.lam.fill(0.0);
        for n in 0..n_src {
            for c in 0..c_nmf {
                let v = &model.v[(n * c_nmf + c) * t_len..(n * c_nmf + c + 1) * t_len];
                for f in 0..f_bins {
                    let u = model.u[(n * c_nmf + c) * f_bins + f];
                    let lam = &mut self.lam[(n * f_bins + f) * t_len..(n * f_bins + f + 1) * t_len];
                    for (l, vt) in lam.iter_mut().zip(v) {
                        *l += u * vt;
                    }
                }
            }
        }
        self.yhat.fill(0.0);
        for n in 0..n_src {
            for f in 0..f_bins {
                let g: Vec<f64> = (0..m).map(|ch| model.gain(n, f, ch)).collect();
                for t in 0..t_len {
                    let l = self.lam[(n * f_bins + f) * t_len + t];
                    let o = (f * t_len + t) * m;
                    for ch in 0..m {
                        self.yhat[o + ch] += l * g[ch];
                    }
                }
            }
        }
        let floor = self.floor;
        self.yhat.iter_mut().for_each(|y| *y = y.max(floor));
    }

    /// Fills `num`/`den` with `Σ_m g p ŷ⁻²` and `Σ_m g ŷ⁻¹`.
    fn channel_sums(&mut self, model: &FastMnmfModel) {
        let (n_src, f_bins, t_len, m) = (self.n_src, self.f_bins, self.t_len, self.m);
        for n in 0..n_src {
            for f in 0..f_bins {
                let g: Vec<f64> = (0..m).map(|ch| model.gain(n, f, ch)).collect();
                for t in 0..t_len {
                    let o = (f * t_len + t) * m;
                    let (mut a, mut b) = (0.0, 0.0);
                    for ch in 0..m {
                        let inv = 1.0 / self.yhat[o + ch];
                        a += g[ch] * self.proj[o + ch] * inv * inv;
                        b += g[ch] * inv;
                    }
                    self.num[(n * f_bins + f) * t_len + t] = a;
                    self.den[(n * f_bins + f) * t_len + t] = b;
                }
            }
        }
    }

    fn update_u(&mut self, model: &mut FastMnmfModel) {
        self.channel_sums(model);
        let (n_src, c_nmf, f_bins, t_len) = (self.n_src, self.c_nmf, self.f_bins, self.t_len);
        for n in 0..n_src {
            for c in 0..c_nmf {
                let v = &model.v[(n * c_nmf + c) * t_len..(n * c_nmf + c + 1) * t_len];
                for f in 0..f_bins {
                    let o = (n * f_bins + f) * t_len;
                    let (mut a, mut b) = (0.0, 0.0);
                    for t in 0..t_len {
                        a += v[t] * self.num[o + t];
                        b += v[t] * self.den[o + t];
                    }
                    let u = &mut model.u[(n * c_nmf + c) * f_bins + f];
                    *u = (*u * (a / b).sqrt()).max(PARAM_FLOOR);
                }
            }
        }
    }

    fn update_v(&mut self, model: &mut FastMnmfModel) {
        self.channel_sums(model);
        let (n_src, c_nmf, f_bins, t_len) = (self.n_src, self.c_nmf, self.f_bins, self.t_len);
        let mut a = vec![0.0; t_len];
        let mut b = vec![0.0; t_len];
        for n in 0..n_src {
            for c in 0..c_nmf {
                a.fill(0.0);
                b.fill(0.0);
                for f in 0..f_bins {
                    let u = model.u[(n * c_nmf + c) * f_bins + f];
                    let o = (n * f_bins + f) * t_len;
                    for t in 0..t_len {
                        a[t] += u * self.num[o + t];
                        b[t] += u * self.den[o + t];
                    }
                }
                let v = &mut model.v[(n * c_nmf + c) * t_len..(n * c_nmf + c + 1) * t_len];
                for t in 0..t_len {
                    v[t] = (v[t] * (a[t] / b[t]).sqrt()).max(PARAM_FLOOR);
                }
            }
        }
    }

    fn update_gains(&mut self, model: &mut FastMnmfModel) {
        let (n_src, f_bins, t_len, m) = (self.n_src, self.f_bins, self.t_len, self.m);
        // per (n, f, m) sums over t; shared gains reduce them over f as well
        let mut a = vec![0.0; n_src * f_bins * m];
        let mut b = vec![0.0; n_src * f_bins * m];
        for n in 0..n_src {
            for f in 0..f_bins {
                for t in 0..t_len {
                    let l = self.lam[(n * f_bins + f) * t_len + t];
                    let o = (f * t_len + t) * m;
                    for ch in 0..m {
                        let inv = 1.0 / self.yhat[o + ch];
                        a[(n * f_bins + f) * m + ch] += l * self.proj[o + ch] * inv * inv;
                        b[(n * f_bins + f) * m + ch] += l * inv;
                    }
                }
            }
        }
        match &mut model.gains {
            SpatialGains::Shared(g) => {
                for n in 0..n_src {
                    for ch in 0..m {
                        let (mut sa, mut sb) = (0.0, 0.0);
                        for f in 0..f_bins {
                            sa += a[(n * f_bins + f) * m + ch];
                            sb += b[(n * f_bins + f) * m + ch];
                        }
                        let x = &mut g[n * m + ch];
                        *x = (*x * (sa / sb).sqrt()).max(PARAM_FLOOR);
                    }
                }
            }
            SpatialGains::PerFrequency(g) => {
                for (i, x) in g.iter_mut().enumerate() {
                    *x = (*x * (a[i] / b[i]).sqrt()).max(PARAM_FLOOR);
                }
            }
        }
    }

    /// Iterative projection, one row of `Q_f` at a time.
    fn update_q(&mut self, model: &mut FastMnmfModel, block: &SpectrogramBlock) -> Result<()> {
        let (f_bins, t_len, m) = (self.f_bins, self.t_len, self.m);
        let mut weighted = CMat::zeros(m, m);
        for f in 0..f_bins {
            for row in 0..m {
                weighted.fill(ZERO);
                {
                    let data = weighted.as_mut_slice();
                    for t in 0..t_len {
                        let w = 1.0 / (self.yhat[(f * t_len + t) * m + row] * t_len as f64);
                        let x = block.vector(f, t);
                        for r in 0..m {
                            let xr = x[r] * w;
                            for c in r..m {
                                data[r * m + c] += xr * x[c].conj();
                            }
                        }
                    }
                    for r in 0..m {
                        for c in r + 1..m {
                            data[c * m + r] = data[r * m + c].conj();
                        }
                    }
                }
                let qv = model.q[f].matmul(&weighted);
                let mut e = CMat::zeros(m, 1);
                e[(row, 0)] = ONE;
                let sol = herm_solve(&qv, &e, 0.0).or_else(|_| herm_solve(&qv, &e, 1e-9))?;
                let qvec = sol.column(0);
                let quad: f64 = weighted
                    .mul_vec(&qvec)
                    .iter()
                    .zip(&qvec)
                    .map(|(a, b)| b.conj() * a)
                    .sum::<C64>()
                    .re;
                let scale = 1.0 / quad.max(f64::MIN_POSITIVE).sqrt();
                for (k, qk) in qvec.iter().enumerate() {
                    model.q[f][(row, k)] = qk.conj() * scale;
                }
            }
            model.qinv[f] = model.q[f]
                .inverse(0.0)
                .or_else(|_| model.q[f].inverse(1e-9))?;
        }
        Ok(())
    }

    fn loglik(&self, model: &FastMnmfModel) -> f64 {
        let mut acc = 0.0;
        for (p, y) in self.proj.iter().zip(&self.yhat) {
            acc -= p / y + y.ln();
        }
        let logdet: f64 = model.q.iter().map(log_abs_det).sum();
        acc + 2.0 * self.t_len as f64 * logdet
    }
}

/// Block-averaged posteriors, indexed `[n × F + f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPosteriorMean {
    pub sources: usize,
    pub bins: usize,
    pub wiener: Vec<CMat>,
    pub covariance: Vec<CMat>,
}

impl BlockPosteriorMean {
    /// Averages per-frame posteriors; `frames[t][n × F + f]`.
    pub fn from_frames(frames: &[Vec<FramePosterior>], sources: usize, bins: usize) -> Self {
        assert!(!frames.is_empty());
        let inv = 1.0 / frames.len() as f64;
        let mut wiener: Vec<CMat> = frames[0].iter().map(|p| p.wiener.scale(C64::new(inv, 0.0))).collect();
        let mut covariance: Vec<CMat> = frames[0]
            .iter()
            .map(|p| p.covariance.scale(C64::new(inv, 0.0)))
            .collect();
        for fr in &frames[1..] {
            for (i, p) in fr.iter().enumerate() {
                wiener[i].axpy(inv, &p.wiener);
                covariance[i].axpy(inv, &p.covariance);
            }
        }
        Self {
            sources,
            bins,
            wiener,
            covariance,
        }
    }
}

/// Smoothed posterior statistics published by the back end.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSnapshot {
    pub sources: usize,
    pub bins: usize,
    pub channels: usize,
    /// `W̃_nf`, indexed `[n × F + f]`.
    pub wiener: Vec<CMat>,
    /// `Σ̃_nf`, indexed `[n × F + f]`.
    pub covariance: Vec<CMat>,
    /// 1-based back-end block index.
    pub block_index: u64,
    pub target: usize,
    /// Global frame index one past the last frame the block covered.
    pub valid_from_frame: u64,
}

impl PosteriorSnapshot {
    #[inline]
    pub fn wiener(&self, n: usize, f: usize) -> &CMat {
        &self.wiener[n * self.bins + f]
    }

    #[inline]
    pub fn covariance(&self, n: usize, f: usize) -> &CMat {
        &self.covariance[n * self.bins + f]
    }

    /// A fixed snapshot: identity filter and zero covariance for `target`,
    /// zeros for the rest.
    pub fn passthrough(sources: usize, bins: usize, channels: usize, target: usize) -> Self {
        let mut wiener = Vec::with_capacity(sources * bins);
        for n in 0..sources {
            for _ in 0..bins {
                wiener.push(if n == target {
                    CMat::identity(channels)
                } else {
                    CMat::zeros(channels, channels)
                });
            }
        }
        Self {
            sources,
            bins,
            channels,
            wiener,
            covariance: vec![CMat::zeros(channels, channels); sources * bins],
            block_index: 0,
            target,
            valid_from_frame: 0,
        }
    }
}

/// EMA of block-mean posteriors; the first block (no history) uses `α = 1`.
pub fn publish_snapshot(
    block: &BlockPosteriorMean,
    previous: Option<&PosteriorSnapshot>,
    alpha: f64,
    target: usize,
    valid_from_frame: u64,
) -> PosteriorSnapshot {
    let channels = block.wiener[0].rows();
    let (alpha, index) = match previous {
        Some(p) => (alpha, p.block_index + 1),
        None => (1.0, 1),
    };
    let blend = |new: &CMat, old: Option<&CMat>| {
        let mut out = new.scale(C64::new(alpha, 0.0));
        if let Some(old) = old {
            if alpha < 1.0 {
                out.axpy(1.0 - alpha, old);
            }
        }
        out
    };
    let wiener = block
        .wiener
        .iter()
        .enumerate()
        .map(|(i, w)| blend(w, previous.map(|p| &p.wiener[i])))
        .collect();
    let covariance = block
        .covariance
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut c = blend(s, previous.map(|p| &p.covariance[i]));
            c.hermitianize_mut();
            c
        })
        .collect();
    PosteriorSnapshot {
        sources: block.sources,
        bins: block.bins,
        channels,
        wiener,
        covariance,
        block_index: index,
        target,
        valid_from_frame,
    }
}
