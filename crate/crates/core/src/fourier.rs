//! Square 2D transforms on small power-of-two patches: windowed forward
//! DFT, fractional shift by spectral phase rotation, and phase correlation.
//!
//! Frequencies are stored in natural DFT order. Bin `k` has signed frequency
//! `k` for `k < N/2` and `k - N` otherwise, so the Nyquist bin is treated as
//! `-N/2` by [`phase_shift`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowKind {
    #[default]
    None,
    /// `sin^2(pi*i/N)` per axis, peaking at the center sample `N/2`.
    Hann,
}

impl WindowKind {
    pub fn weights(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::None => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|i| {
                    let s = (PI * i as f64 / n as f64).sin();
                    s * s
                })
                .collect(),
        }
    }
}

/// Square block of samples cut from a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    size: usize,
    data: Vec<f64>,
    /// Top-left corner in the source image.
    pub origin: (isize, isize),
}

impl Patch {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::Size(format!(
                "patch of size {size} needs {} samples, got {}",
                size * size,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite patch sample".into()));
        }
        Ok(Self {
            size,
            data,
            origin: (0, 0),
        })
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                data.push(f(x, y));
            }
        }
        Self {
            size,
            data,
            origin: (0, 0),
        }
    }

    pub fn with_origin(mut self, origin: (isize, isize)) -> Self {
        self.origin = origin;
        self
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.size + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Circular shift: `out(x, y) = self(x - dx, y - dy)` modulo the size.
    pub fn roll(&self, dx: isize, dy: isize) -> Self {
        let n = self.size as isize;
        Self::from_fn(self.size, |x, y| {
            let xs = (x as isize - dx).rem_euclid(n) as usize;
            let ys = (y as isize - dy).rem_euclid(n) as usize;
            self.get(xs, ys)
        })
        .with_origin(self.origin)
    }

    /// Subtract the window-weighted mean and multiply by the window.
    pub fn windowed_zero_mean(&self, window: WindowKind) -> Self {
        let w = window.weights(self.size);
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..self.size {
            for x in 0..self.size {
                let wk = w[x] * w[y];
                num += wk * self.get(x, y);
                den += wk;
            }
        }
        let mean = num / den;
        Self::from_fn(self.size, |x, y| (self.get(x, y) - mean) * w[x] * w[y])
            .with_origin(self.origin)
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    size: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, kx: usize, ky: usize) -> Complex64 {
        self.data[ky * self.size + kx]
    }

    pub fn from_vec(size: usize, data: Vec<Complex64>) -> Result<Self> {
        check_pow2(size)?;
        if data.len() != size * size {
            return Err(Error::Size("spectrum length mismatch".into()));
        }
        Ok(Self { size, data })
    }

    /// Largest absolute difference to another spectrum of the same size.
    pub fn max_abs_diff(&self, other: &Spectrum) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Phase correlation output. The zero-displacement sample is at `(N/2, N/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSurface {
    size: usize,
    data: Vec<f64>,
    pub pair_id: Option<usize>,
}

impl CorrelationSurface {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::Size("surface length mismatch".into()));
        }
        Ok(Self {
            size,
            data,
            pair_id: None,
        })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size],
            pair_id: None,
        }
    }

    pub fn with_pair(mut self, pair: usize) -> Self {
        self.pair_id = Some(pair);
        self
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn center(&self) -> usize {
        self.size / 2
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.size + x]
    }

    /// Value at a displacement `(dx, dy)` relative to the center, `None` outside.
    pub fn at_offset(&self, dx: isize, dy: isize) -> Option<f64> {
        let c = self.center() as isize;
        let (x, y) = (c + dx, c + dy);
        let n = self.size as isize;
        if x < 0 || y < 0 || x >= n || y >= n {
            None
        } else {
            Some(self.get(x as usize, y as usize))
        }
    }

    /// Bilinear sample at a fractional displacement from the center.
    pub fn sample(&self, dx: f64, dy: f64) -> Option<f64> {
        let c = self.center() as f64;
        let (x, y) = (c + dx, c + dy);
        let n = self.size as f64;
        if x < 0.0 || y < 0.0 || x > n - 1.0 || y > n - 1.0 {
            return None;
        }
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let x1 = (x0 + 1).min(self.size - 1);
        let y1 = (y0 + 1).min(self.size - 1);
        Some(
            (1.0 - fy) * ((1.0 - fx) * self.get(x0, y0) + fx * self.get(x1, y0))
                + fy * ((1.0 - fx) * self.get(x0, y1) + fx * self.get(x1, y1)),
        )
    }

    /// Integer argmax as a displacement from the center.
    pub fn argmax(&self) -> (isize, isize) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &v) in self.data.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        let c = self.center() as isize;
        (
            (best.0 % self.size) as isize - c,
            (best.0 / self.size) as isize - c,
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Extra knobs for [`phase_correlate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationParams {
    /// Relative regularization of the magnitude normalization.
    pub eps: f64,
    /// Pixel-domain sigma of a Gaussian applied to the normalized
    /// cross-power spectrum; 0 disables it.
    pub lowpass_sigma: f64,
}

impl Default for CorrelationParams {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            lowpass_sigma: 0.0,
        }
    }
}

struct Plan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, Arc<Plan>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize) -> Arc<Plan> {
    PLANS.with(|p| {
        let mut guard = p.borrow_mut();
        let (planner, cache) = &mut *guard;
        if let Some(plan) = cache.get(&n) {
            return plan.clone();
        }
        let plan = Arc::new(Plan {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        });
        cache.insert(n, plan.clone());
        plan
    })
}

fn check_pow2(n: usize) -> Result<()> {
    if n < 8 || !n.is_power_of_two() {
        return Err(Error::Size(format!(
            "transform size {n} is not a power of two >= 8"
        )));
    }
    Ok(())
}

/// In-place unnormalized 2D transform of an `n x n` row-major buffer.
fn fft2_in_place(buf: &mut [Complex64], n: usize, inverse: bool) {
    let plan = plan(n);
    let fft = if inverse { &plan.inverse } else { &plan.forward };
    fft.process(buf);
    let mut column = vec![Complex64::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            column[y] = buf[y * n + x];
        }
        fft.process(&mut column);
        for y in 0..n {
            buf[y * n + x] = column[y];
        }
    }
}

/// Windowed 2D DFT of a patch (unnormalized forward transform).
pub fn forward_dft(patch: &Patch, window: WindowKind) -> Result<Spectrum> {
    let n = patch.size();
    check_pow2(n)?;
    let w = window.weights(n);
    let mut buf: Vec<Complex64> = (0..n * n)
        .map(|i| Complex64::new(patch.data[i] * w[i % n] * w[i / n], 0.0))
        .collect();
    fft2_in_place(&mut buf, n, false);
    Ok(Spectrum { size: n, data: buf })
}

/// Inverse transform, normalized by `1/N^2`, complex result.
pub fn inverse_dft_complex(spec: &Spectrum) -> Vec<Complex64> {
    let n = spec.size;
    let mut buf = spec.data.clone();
    fft2_in_place(&mut buf, n, true);
    let scale = 1.0 / (n * n) as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// Inverse transform keeping the real part.
pub fn inverse_dft(spec: &Spectrum) -> Patch {
    let n = spec.size;
    let data = inverse_dft_complex(spec).into_iter().map(|c| c.re).collect();
    Patch {
        size: n,
        data,
        origin: (0, 0),
    }
}

#[inline]
fn signed_freq(k: usize, n: usize) -> f64 {
    if k < n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Translate the spectrum content by `(dx, dy)` pixels (fractional part
/// only; integer shifts belong to tile extraction).
pub fn phase_shift(spec: &Spectrum, dx: f64, dy: f64) -> Result<Spectrum> {
    if !(dx.is_finite() && dy.is_finite()) || dx.abs() > 1.0 || dy.abs() > 1.0 {
        return Err(Error::Contract(format!(
            "phase shift ({dx}, {dy}) exceeds one pixel"
        )));
    }
    let n = spec.size;
    if dx == 0.0 && dy == 0.0 {
        return Ok(spec.clone());
    }
    let step = -2.0 * PI / n as f64;
    let rot_x: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(1.0, step * signed_freq(k, n) * dx))
        .collect();
    let rot_y: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(1.0, step * signed_freq(k, n) * dy))
        .collect();
    let data = spec
        .data
        .iter()
        .enumerate()
        .map(|(i, c)| c * rot_x[i % n] * rot_y[i / n])
        .collect();
    Ok(Spectrum { size: n, data })
}

/// Shift a patch by a fractional amount through the frequency domain
/// (circular, band-limited).
pub fn shift_patch(patch: &Patch, dx: f64, dy: f64) -> Result<Patch> {
    let spec = forward_dft(patch, WindowKind::None)?;
    let shifted = phase_shift(&spec, dx, dy)?;
    Ok(inverse_dft(&shifted).with_origin(patch.origin))
}

/// Phase correlation of two spectra. The peak of the result sits at the
/// displacement of `b` relative to `a`: if `b(x) = a(x - p)`, the argmax is
/// `center + p`.
pub fn phase_correlate(a: &Spectrum, b: &Spectrum, eps: f64) -> Result<CorrelationSurface> {
    phase_correlate_with(
        a,
        b,
        &CorrelationParams {
            eps,
            lowpass_sigma: 0.0,
        },
    )
}

pub fn phase_correlate_with(
    a: &Spectrum,
    b: &Spectrum,
    params: &CorrelationParams,
) -> Result<CorrelationSurface> {
    if a.size != b.size {
        return Err(Error::Size(format!(
            "correlating spectra of sizes {} and {}",
            a.size, b.size
        )));
    }
    if !(params.eps > 0.0) {
        return Err(Error::Contract("eps must be positive".into()));
    }
    let n = a.size;
    let mut cross: Vec<Complex64> = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x.conj() * y)
        .collect();
    let peak = cross.iter().fold(0.0, |m: f64, c| m.max(c.norm()));
    if peak == 0.0 || !peak.is_finite() {
        return Ok(CorrelationSurface::zeros(n));
    }
    let floor = params.eps * peak;
    for c in &mut cross {
        *c /= c.norm() + floor;
    }
    if params.lowpass_sigma > 0.0 {
        let s = 2.0 * PI * PI * params.lowpass_sigma * params.lowpass_sigma / (n * n) as f64;
        let g: Vec<f64> = (0..n)
            .map(|k| {
                let f = signed_freq(k, n);
                (-s * f * f).exp()
            })
            .collect();
        for (i, c) in cross.iter_mut().enumerate() {
            *c *= g[i % n] * g[i / n];
        }
    }
    let spatial = inverse_dft_complex(&Spectrum {
        size: n,
        data: cross,
    });
    // fftshift: zero displacement to (N/2, N/2)
    let h = n / 2;
    let mut data = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            data[((y + h) % n) * n + (x + h) % n] = spatial[y * n + x].re;
        }
    }
    Ok(CorrelationSurface {
        size: n,
        data,
        pair_id: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N^4) DFT sum.
    fn direct_dft(p: &Patch) -> Vec<Complex64> {
        let n = p.size();
        let mut out = vec![Complex64::new(0.0, 0.0); n * n];
        for ky in 0..n {
            for kx in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let ph = -2.0 * PI * ((kx * x + ky * y) as f64) / n as f64;
                        acc += Complex64::from_polar(p.get(x, y), ph);
                    }
                }
                out[ky * n + kx] = acc;
            }
        }
        out
    }

    fn random_patch(n: usize, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Smooth random texture: a few low-frequency sinusoids, periodic on the patch.
    fn smooth_periodic(n: usize, seed: u64) -> impl Fn(f64, f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let terms: Vec<(f64, f64, f64, f64)> = (0..12)
            .map(|_| {
                let kx = rng.gen_range(-3i32..=3) as f64;
                let ky = rng.gen_range(-3i32..=3) as f64;
                (kx, ky, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.3..1.0))
            })
            .collect();
        move |x, y| {
            terms
                .iter()
                .map(|&(kx, ky, ph, a)| {
                    a * (2.0 * PI * (kx * x + ky * y) / n as f64 + ph).cos()
                })
                .sum()
        }
    }

    #[test]
    fn constant_patch_is_dc_only() {
        let p = Patch::from_fn(16, |_, _| 1.0);
        let s = forward_dft(&p, WindowKind::None).unwrap();
        assert!((s.get(0, 0).re - 256.0).abs() < 1e-9);
        for (i, c) in s.data().iter().enumerate().skip(1) {
            assert!(c.norm() < 1e-9, "bin {i} = {c}");
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let p = Patch::from_fn(16, |x, y| if x == 0 && y == 0 { 1.0 } else { 0.0 });
        let s = forward_dft(&p, WindowKind::None).unwrap();
        assert!(s.data().iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_direct_sum_and_round_trips() {
        let p = random_patch(16, 7);
        let s = forward_dft(&p, WindowKind::None).unwrap();
        let direct = direct_dft(&p);
        let max_dev = s
            .data()
            .iter()
            .zip(&direct)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-9, "{max_dev}");
        let back = inverse_dft(&s);
        for (a, b) in back.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn windowed_transform_matches_direct_sum() {
        let p = random_patch(8, 3);
        let w = WindowKind::Hann.weights(8);
        let pw = Patch::from_fn(8, |x, y| p.get(x, y) * w[x] * w[y]);
        let s = forward_dft(&p, WindowKind::Hann).unwrap();
        let direct = direct_dft(&pw);
        for (a, b) in s.data().iter().zip(&direct) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn parseval_holds() {
        for n in [8, 16, 32, 64] {
            let p = random_patch(n, n as u64);
            let s = forward_dft(&p, WindowKind::None).unwrap();
            let spatial = p.energy();
            let freq: f64 = s.data().iter().map(|c| c.norm_sqr()).sum::<f64>() / (n * n) as f64;
            assert!(((spatial - freq) / spatial).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let p = Patch::from_fn(12, |_, _| 0.0);
        assert!(matches!(
            forward_dft(&p, WindowKind::None),
            Err(Error::Size(_))
        ));
        let p = Patch::from_fn(4, |_, _| 0.0);
        assert!(forward_dft(&p, WindowKind::None).is_err());
        assert!(Patch::new(4, vec![0.0; 15]).is_err());
        assert!(Patch::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_shift_is_identity() {
        let s = forward_dft(&random_patch(16, 1), WindowKind::None).unwrap();
        assert_eq!(phase_shift(&s, 0.0, 0.0).unwrap(), s);
    }

    #[test]
    fn half_pixel_shift_of_sinusoid() {
        let n = 16;
        let (kx, ky) = (3.0, 2.0);
        let f = |x: f64, y: f64| (2.0 * PI * (kx * x + ky * y) / n as f64 + 0.7).sin();
        let p = Patch::from_fn(n, |x, y| f(x as f64, y as f64));
        let shifted = shift_patch(&p, 0.5, 0.0).unwrap();
        for y in 0..n {
            for x in 0..n {
                let want = f(x as f64 - 0.5, y as f64);
                assert!((shifted.get(x, y) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn shift_composes_to_identity() {
        let s = forward_dft(&random_patch(16, 5), WindowKind::None).unwrap();
        let there = phase_shift(&s, 0.3, -0.2).unwrap();
        let back = phase_shift(&there, -0.3, 0.2).unwrap();
        assert!(back.max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn oversized_shift_is_contract_error() {
        let s = forward_dft(&random_patch(16, 5), WindowKind::None).unwrap();
        assert!(matches!(phase_shift(&s, 1.5, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn self_correlation_peaks_at_center() {
        let s = forward_dft(&random_patch(16, 11), WindowKind::Hann).unwrap();
        let c = phase_correlate(&s, &s, 1e-6).unwrap();
        assert_eq!(c.argmax(), (0, 0));
        assert!((c.get(8, 8) - 1.0).abs() < 1e-3, "{}", c.get(8, 8));
    }

    #[test]
    fn integer_translation_moves_peak() {
        let a = random_patch(16, 2);
        let b = a.roll(3, -2);
        let sa = forward_dft(&a, WindowKind::None).unwrap();
        let sb = forward_dft(&b, WindowKind::None).unwrap();
        let c = phase_correlate(&sa, &sb, 1e-6).unwrap();
        assert_eq!(c.argmax(), (3, -2));
    }

    #[test]
    fn subpixel_translation_by_parabola() {
        let n = 16;
        let tex = smooth_periodic(n, 42);
        let a = Patch::from_fn(n, |x, y| tex(x as f64, y as f64));
        let b = Patch::from_fn(n, |x, y| tex(x as f64 - 0.4, y as f64));
        let sa = forward_dft(&a, WindowKind::None).unwrap();
        let sb = forward_dft(&b, WindowKind::None).unwrap();
        let c = phase_correlate_with(
            &sa,
            &sb,
            &CorrelationParams {
                eps: 1e-6,
                lowpass_sigma: 1.0,
            },
        )
        .unwrap();
        let (px, py) = c.argmax();
        assert_eq!((px, py), (0, 0));
        let l = c.at_offset(-1, 0).unwrap();
        let m = c.at_offset(0, 0).unwrap();
        let r = c.at_offset(1, 0).unwrap();
        let vertex = (l - r) / (2.0 * (l - 2.0 * m + r));
        assert!((vertex - 0.4).abs() < 0.02, "vertex {vertex}");
    }

    #[test]
    fn zero_cross_power_gives_zero_surface() {
        let z = forward_dft(&Patch::from_fn(8, |_, _| 0.0), WindowKind::None).unwrap();
        let c = phase_correlate(&z, &z, 1e-6).unwrap();
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn size_mismatch_is_error() {
        let a = forward_dft(&random_patch(8, 1), WindowKind::None).unwrap();
        let b = forward_dft(&random_patch(16, 1), WindowKind::None).unwrap();
        assert!(matches!(phase_correlate(&a, &b, 1e-6), Err(Error::Size(_))));
    }

    #[test]
    fn bilinear_sample_hits_grid_values() {
        let c = CorrelationSurface::new(8, (0..64).map(|i| i as f64).collect()).unwrap();
        assert_eq!(c.sample(0.0, 0.0), Some(c.get(4, 4)));
        assert_eq!(c.sample(1.0, -1.0), Some(c.get(5, 3)));
        let mid = c.sample(0.5, 0.0).unwrap();
        assert!((mid - 0.5 * (c.get(4, 4) + c.get(5, 4))).abs() < 1e-12);
        assert_eq!(c.sample(10.0, 0.0), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn round_trip_all_sizes(log in 3u32..=6, seed in any::<u64>()) {
                let n = 1usize << log;
                let p = random_patch(n, seed);
                let back = inverse_dft(&forward_dft(&p, WindowKind::None).unwrap());
                let scale = p.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (a, b) in back.data().iter().zip(p.data()) {
                    prop_assert!((a - b).abs() <= 1e-9 * scale.max(1.0));
                }
            }

            #[test]
            fn shift_equivariance(p in -7isize..=7, q in -7isize..=7, seed in any::<u64>()) {
                let a = random_patch(16, seed);
                let sa = forward_dft(&a, WindowKind::None).unwrap();
                let sb = forward_dft(&a.roll(p, q), WindowKind::None).unwrap();
                let c = phase_correlate(&sa, &sb, 1e-6).unwrap();
                prop_assert_eq!(c.argmax(), (p, q));
                prop_assert!(c.max_abs() <= 1.0 + 1e-6);
            }

            #[test]
            fn normalized_surface_is_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
                let a = forward_dft(&random_patch(16, s1), WindowKind::Hann).unwrap();
                let b = forward_dft(&random_patch(16, s2), WindowKind::Hann).unwrap();
                let c = phase_correlate(&a, &b, 1e-6).unwrap();
                prop_assert!(c.max_abs() <= 1.0 + 1e-6);
            }

            #[test]
            fn inverse_of_real_patch_is_real(seed in any::<u64>()) {
                let p = random_patch(16, seed);
                let s = forward_dft(&p, WindowKind::Hann).unwrap();
                let z = inverse_dft_complex(&s);
                let amp = z.iter().fold(0.0f64, |m, c| m.max(c.re.abs()));
                prop_assert!(z.iter().all(|c| c.im.abs() <= 1e-9 * amp.max(1.0)));
            }
        }
    }
}
