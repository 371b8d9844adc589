//! Reconstruction scores.
//!
//! Per time slab, `s_t = 1 - RMSE_t / RMS_t(truth)`; `mu` and `sigma` are the
//! mean and population standard deviation of `s_t` over slabs with nonzero
//! truth. The resolved scales are an approximate periodogram score: the
//! wavelength (or period) where `1 - PSD(err) / PSD(truth)` first drops below
//! one half.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::grid::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mu: f64,
    pub sigma: f64,
    pub global_rmse: f64,
    /// `None` where the truth is identically zero.
    pub slab_scores: Vec<Option<f64>>,
    /// Approximate minimal resolved wavelength along space, in grid units.
    pub lambda_x: Option<f64>,
    /// Approximate minimal resolved period along time, in time steps.
    pub lambda_t: Option<f64>,
}

impl Metrics {
    pub fn excluded_slabs(&self) -> Vec<usize> {
        self.slab_scores.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(t, _)| t).collect()
    }
}

pub fn evaluate(x_star: &Trajectory, x_true: &Trajectory) -> Result<Metrics> {
    x_star.check_grid(x_true.grid())?;
    let g = *x_true.grid();
    let slab_scores: Vec<Option<f64>> = (0..g.nt)
        .map(|t| {
            let (e, tr) = (x_star.slab(t), x_true.slab(t));
            let n = tr.len() as f64;
            let rmse = (e.iter().zip(tr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt();
            let rms = (tr.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            (rms > 0.0).then(|| 1.0 - rmse / rms)
        })
        .collect();
    let valid: Vec<f64> = slab_scores.iter().flatten().copied().collect();
    let (mu, sigma) = if valid.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let mu = valid.iter().sum::<f64>() / valid.len() as f64;
        let var = valid.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / valid.len() as f64;
        (mu, var.sqrt())
    };
    let n = x_true.as_slice().len() as f64;
    let global_rmse =
        (x_star.as_slice().iter().zip(x_true.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt();
    let (lambda_x, lambda_t) = resolved_scales(x_star, x_true);
    Ok(Metrics { mu, sigma, global_rmse, slab_scores, lambda_x, lambda_t })
}

/// Mean Hann-windowed periodogram of a set of equal-length series.
fn periodogram(series: &[Vec<f64>]) -> Vec<f64> {
    let n = series[0].len();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let window: Vec<f64> =
        (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
    let mut psd = vec![0.0; n / 2 + 1];
    for s in series {
        let mean = s.iter().sum::<f64>() / n as f64;
        let mut buf: Vec<Complex<f64>> =
            s.iter().zip(&window).map(|(v, w)| Complex::new((v - mean) * w, 0.0)).collect();
        fft.process(&mut buf);
        for (p, c) in psd.iter_mut().zip(&buf) {
            *p += c.norm_sqr();
        }
    }
    psd
}

/// Wavelength where the score first falls below 0.5, interpolated between
/// frequency bins; `None` if even the longest resolvable scale fails.
fn crossing(err: &[f64], truth: &[f64], n: usize) -> Option<f64> {
    let score: Vec<f64> = err.iter().zip(truth).map(|(e, t)| if *t > 0.0 { 1.0 - e / t } else { f64::NAN }).collect();
    let mut prev: Option<(f64, f64)> = None;
    for (k, &s) in score.iter().enumerate().skip(1) {
        if !s.is_finite() {
            continue;
        }
        let f = k as f64 / n as f64;
        if s < 0.5 {
            return prev.map(|(fp, sp)| {
                let fc = fp + (sp - 0.5) / (sp - s) * (f - fp);
                1.0 / fc
            });
        }
        prev = Some((f, s));
    }
    prev.map(|(f, _)| 1.0 / f)
}

fn resolved_scales(x_star: &Trajectory, x_true: &Trajectory) -> (Option<f64>, Option<f64>) {
    let g = *x_true.grid();
    let (e, t) = (x_star.as_slice(), x_true.as_slice());
    let err: Vec<f64> = e.iter().zip(t).map(|(a, b)| a - b).collect();
    let rows =
        |v: &[f64]| -> Vec<Vec<f64>> { (0..g.nt * g.ny).map(|r| v[r * g.nx..(r + 1) * g.nx].to_vec()).collect() };
    let lx = crossing(&periodogram(&rows(&err)), &periodogram(&rows(t)), g.nx).map(|l| l * g.dx);
    let m = g.state_dim();
    let cols = |v: &[f64]| -> Vec<Vec<f64>> { (0..m).map(|c| (0..g.nt).map(|s| v[s * m + c]).collect()).collect() };
    let lt = if g.nt >= 4 {
        crossing(&periodogram(&cols(&err)), &periodogram(&cols(t)), g.nt).map(|l| l * g.dt)
    } else {
        None
    };
    (lx, lt)
}
