//! Classical TOA baselines: correlation peak detection, least-squares
//! delay search over a template dictionary, and subspace methods (MUSIC,
//! ESPRIT) on the estimated channel frequency response.
//!
//! The subspace methods build a forward-backward spatially smoothed
//! covariance from sliding length-P subvectors of H(k), so coherent
//! multipath components still span a rank-L signal subspace. A delay τ
//! appears as the per-subcarrier phase ramp a(τ)_k = exp(−j 2π k Δf τ).

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::correlator::{argmax_magnitude, CorrelationDictionary, CorrelationSeries, DelayGrid};
use crate::error::{Result, ToaError};
use crate::prs::{BasebandSignal, PrsGrid, SystemConfig};

/// Estimator identifiers used by reports and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Peak,
    Ls,
    Music,
    Esprit,
    Nn,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Peak => "peak",
            EstimatorKind::Ls => "ls",
            EstimatorKind::Music => "music",
            EstimatorKind::Esprit => "esprit",
            EstimatorKind::Nn => "nn",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = ToaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peak" => Ok(EstimatorKind::Peak),
            "ls" => Ok(EstimatorKind::Ls),
            "music" => Ok(EstimatorKind::Music),
            "esprit" => Ok(EstimatorKind::Esprit),
            "nn" => Ok(EstimatorKind::Nn),
            other => Err(ToaError::Argument(format!("unknown estimator {other:?}"))),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optional per-estimate extras for inspection and tests.
#[derive(Debug, Clone)]
pub enum Diagnostics {
    /// Pseudo-spectrum samples over the search grid (MUSIC).
    PseudoSpectrum { taus_s: Vec<f64>, values: Vec<f64> },
    /// All estimated path delays in seconds (LS, ESPRIT).
    Delays(Vec<f64>),
}

/// A TOA estimate in seconds with its method tag.
#[derive(Debug, Clone)]
pub struct ToaEstimate {
    pub toa_s: f64,
    pub method: EstimatorKind,
    pub diagnostics: Option<Diagnostics>,
}

/// Estimated channel frequency response with per-subcarrier validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Cfr {
    pub values: Vec<Complex64>,
    pub mask: Vec<bool>,
}

impl Cfr {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Peak detection: the magnitude maximum of the correlation window,
/// quantized to the lag grid. Ties break toward the smaller lag.
pub fn toa_peak(series: &CorrelationSeries, config: &SystemConfig) -> ToaEstimate {
    assert!(!series.values.is_empty(), "empty correlation series");
    let peak = argmax_magnitude(&series.values) as i64;
    ToaEstimate {
        toa_s: (series.anchor + peak) as f64 * config.sample_period_s,
        method: EstimatorKind::Peak,
        diagnostics: None,
    }
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Least-squares delay search: greedy matching pursuit over the template
/// dictionary followed by one joint linear refit of the path gains. The
/// TOA is the smallest of the `n_paths` selected delays plus the window
/// anchor.
pub fn toa_ls(
    series: &CorrelationSeries,
    dict: &CorrelationDictionary,
    n_paths: usize,
    config: &SystemConfig,
) -> Result<ToaEstimate> {
    if !(1..=3).contains(&n_paths) {
        return Err(ToaError::Argument(format!(
            "n_paths {n_paths} outside {{1, 2, 3}}"
        )));
    }
    if dict.m_window != series.values.len() {
        return Err(ToaError::Argument(format!(
            "dictionary window {} does not match series window {}",
            dict.m_window,
            series.values.len()
        )));
    }
    let energies: Vec<f64> = dict
        .columns
        .iter()
        .map(|col| col.iter().map(|c| c.norm_sqr()).sum())
        .collect();

    let mut residual = series.values.clone();
    let mut chosen: Vec<usize> = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let mut best: Option<(usize, f64, Complex64)> = None;
        for (i, col) in dict.columns.iter().enumerate() {
            if chosen.contains(&i) || energies[i] <= 0.0 {
                continue;
            }
            let proj = inner(col, &residual);
            let gain = proj.norm_sqr() / energies[i];
            if best.map_or(true, |(_, g, _)| gain > g) {
                best = Some((i, gain, proj / energies[i]));
            }
        }
        let Some((idx, _, h)) = best else { break };
        for (r, g) in residual.iter_mut().zip(&dict.columns[idx]) {
            *r -= h * g;
        }
        chosen.push(idx);
    }
    if chosen.is_empty() {
        return Err(ToaError::DegenerateFit("no usable template column".into()));
    }

    // joint refit of all gains over the chosen delays
    let l = chosen.len();
    let mut gram = DMatrix::<Complex64>::zeros(l, l);
    let mut rhs = DMatrix::<Complex64>::zeros(l, 1);
    for (a, &ia) in chosen.iter().enumerate() {
        for (b, &ib) in chosen.iter().enumerate() {
            gram[(a, b)] = inner(&dict.columns[ia], &dict.columns[ib]);
        }
        rhs[(a, 0)] = inner(&dict.columns[ia], &series.values);
    }
    gram.lu()
        .solve(&rhs)
        .ok_or_else(|| ToaError::DegenerateFit("singular template matrix".into()))?;

    let anchor_s = series.anchor as f64 * config.sample_period_s;
    let delays: Vec<f64> = chosen.iter().map(|&i| anchor_s + dict.taus_s[i]).collect();
    let toa_s = delays.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ToaEstimate {
        toa_s,
        method: EstimatorKind::Ls,
        diagnostics: Some(Diagnostics::Delays(delays)),
    })
}

/// Estimate the channel frequency response from the PRS-occupied resource
/// elements, assuming the frame starts at absolute sample `anchor`. Each
/// occupied RE contributes (demodulated symbol) / (pilot value); the
/// per-subcarrier average over all contributing symbols is returned.
pub fn estimate_cfr(
    received: &BasebandSignal,
    grid: &PrsGrid,
    config: &SystemConfig,
    anchor: i64,
) -> Result<Cfr> {
    let k_total = config.n_subcarriers;
    let n = config.fft_size;
    let mut planner = rustfft::FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let scale = 1.0 / (n as f64).sqrt();

    let mut acc = vec![Complex64::new(0.0, 0.0); k_total];
    let mut count = vec![0usize; k_total];
    let mut window = vec![Complex64::new(0.0, 0.0); n];
    for (s, (row, mrow)) in grid.symbols.iter().zip(&grid.mask).enumerate() {
        if mrow.iter().all(|&m| !m) {
            continue;
        }
        let start = anchor + (config.symbol_start(s) + config.cp_len(s)) as i64;
        for (i, w) in window.iter_mut().enumerate() {
            *w = received.sample_at(start + i as i64);
        }
        fft.process(&mut window);
        for k in 0..k_total {
            if mrow[k] {
                acc[k] += window[k] * scale / row[k];
                count[k] += 1;
            }
        }
    }

    let mask: Vec<bool> = count.iter().map(|&c| c > 0).collect();
    let values: Vec<Complex64> = acc
        .iter()
        .zip(&count)
        .map(|(&a, &c)| {
            if c > 0 {
                a / c as f64
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let valid = mask.iter().filter(|&&m| m).count();
    if valid < k_total / 2 {
        return Err(ToaError::Coverage {
            valid,
            required: k_total / 2,
        });
    }
    Ok(Cfr { values, mask })
}

/// Fill masked-out subcarriers by linear interpolation of the nearest
/// valid neighbors (constant extension at the band edges).
fn filled_cfr(cfr: &Cfr) -> Result<Vec<Complex64>> {
    let k_total = cfr.values.len();
    let valid = cfr.valid_count();
    if valid == 0 {
        return Err(ToaError::DegenerateInput("no valid CFR entries".into()));
    }
    if valid < k_total / 2 {
        return Err(ToaError::Coverage {
            valid,
            required: k_total / 2,
        });
    }
    if valid == k_total {
        return Ok(cfr.values.clone());
    }
    let valid_idx: Vec<usize> = (0..k_total).filter(|&k| cfr.mask[k]).collect();
    let mut out = cfr.values.clone();
    for k in 0..k_total {
        if cfr.mask[k] {
            continue;
        }
        let right = valid_idx.partition_point(|&v| v < k);
        out[k] = if right == 0 {
            cfr.values[valid_idx[0]]
        } else if right == valid_idx.len() {
            cfr.values[*valid_idx.last().unwrap()]
        } else {
            let (a, b) = (valid_idx[right - 1], valid_idx[right]);
            let t = (k - a) as f64 / (b - a) as f64;
            cfr.values[a] * (1.0 - t) + cfr.values[b] * t
        };
    }
    Ok(out)
}

/// Forward-backward spatially smoothed covariance from sliding length-P
/// subvectors of the CFR.
fn smoothed_covariance(h: &[Complex64], p: usize) -> DMatrix<Complex64> {
    let n_sub = h.len() - p + 1;
    let mut cov = DMatrix::<Complex64>::zeros(p, p);
    for j in 0..n_sub {
        for a in 0..p {
            for b in 0..p {
                cov[(a, b)] += h[j + a] * h[j + b].conj();
            }
        }
    }
    cov /= Complex64::new(n_sub as f64, 0.0);
    // backward half: J conj(R) J with J the exchange matrix
    let mut fb = DMatrix::<Complex64>::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            fb[(a, b)] =
                (cov[(a, b)] + cov[(p - 1 - a, p - 1 - b)].conj()) * Complex64::new(0.5, 0.0);
        }
    }
    fb
}

/// Hermitian eigendecomposition with eigenvalues sorted descending.
fn sorted_eigen(cov: DMatrix<Complex64>) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let p = cov.nrows();
    let se = cov
        .try_symmetric_eigen(1e-13, 0)
        .ok_or_else(|| ToaError::Numeric("eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b]
            .partial_cmp(&se.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vectors = DMatrix::<Complex64>::zeros(p, p);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &se.eigenvectors.column(i));
    }
    Ok((eigenvalues, vectors))
}

fn check_subspace_args(k_total: usize, p: usize, l: usize) -> Result<()> {
    if p == 0 || p >= k_total {
        return Err(ToaError::Argument(format!(
            "subarray length {p} must be in (0, {k_total})"
        )));
    }
    if l == 0 || l >= p {
        return Err(ToaError::Argument(format!(
            "path count {l} must be in (0, {p})"
        )));
    }
    Ok(())
}

/// MUSIC delay estimation on a CFR: the pseudo-spectrum
/// P(τ) = 1 / ‖E_nᴴ a(τ)‖² is evaluated over `grid` (delays relative to
/// the anchor) and the TOA is the smallest delay among the `n_paths`
/// highest peaks, plus the anchor offset.
pub fn toa_music(
    cfr: &Cfr,
    subarray: usize,
    n_paths: usize,
    grid: DelayGrid,
    config: &SystemConfig,
    anchor: i64,
) -> Result<ToaEstimate> {
    check_subspace_args(cfr.values.len(), subarray, n_paths)?;
    if grid.step_s <= 0.0 || grid.taus().is_empty() {
        return Err(ToaError::Argument("empty MUSIC delay grid".into()));
    }
    let h = filled_cfr(cfr)?;
    let (_, vectors) = sorted_eigen(smoothed_covariance(&h, subarray))?;
    let noise = vectors.columns(n_paths, subarray - n_paths);

    let taus_s = grid.taus();
    let df = config.subcarrier_spacing_hz;
    let spectrum: Vec<f64> = taus_s
        .iter()
        .map(|&tau| {
            let steering: Vec<Complex64> = (0..subarray)
                .map(|k| {
                    Complex64::from_polar(
                        1.0,
                        -2.0 * std::f64::consts::PI * k as f64 * df * tau,
                    )
                })
                .collect();
            let mut denom = 0.0;
            for col in noise.column_iter() {
                let dot: Complex64 = col.iter().zip(&steering).map(|(e, a)| e.conj() * a).sum();
                denom += dot.norm_sqr();
            }
            1.0 / denom.max(1e-300)
        })
        .collect();

    // interior local maxima ranked by height; fall back to the global max
    let mut peaks: Vec<usize> = (1..spectrum.len().saturating_sub(1))
        .filter(|&i| spectrum[i] >= spectrum[i - 1] && spectrum[i] >= spectrum[i + 1])
        .collect();
    peaks.sort_by(|&a, &b| spectrum[b].partial_cmp(&spectrum[a]).unwrap());
    peaks.truncate(n_paths);
    if peaks.is_empty() {
        let global = spectrum
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        peaks.push(global);
    }
    let tau_rel = peaks
        .iter()
        .map(|&i| taus_s[i])
        .fold(f64::INFINITY, f64::min);

    Ok(ToaEstimate {
        toa_s: anchor as f64 * config.sample_period_s + tau_rel,
        method: EstimatorKind::Music,
        diagnostics: Some(Diagnostics::PseudoSpectrum {
            taus_s,
            values: spectrum,
        }),
    })
}

/// Eigenvalues of a small complex matrix (order ≤ 3) via Durand-Kerner
/// iteration on the characteristic polynomial.
fn small_eigenvalues(m: &DMatrix<Complex64>) -> Result<Vec<Complex64>> {
    let n = m.nrows();
    let one = Complex64::new(1.0, 0.0);
    // monic characteristic polynomial coefficients, lowest degree first
    let coeffs: Vec<Complex64> = match n {
        1 => vec![-m[(0, 0)], one],
        2 => {
            let tr = m[(0, 0)] + m[(1, 1)];
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            vec![det, -tr, one]
        }
        3 => {
            let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
            let minors = m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)]
                + m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]
                + m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            let det = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
            vec![-det, minors, -tr, one]
        }
        _ => {
            return Err(ToaError::Numeric(format!(
                "eigenvalues of order-{n} matrix unsupported"
            )))
        }
    };
    let eval = |z: Complex64| {
        coeffs
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
    };
    let seed = Complex64::new(0.4, 0.9);
    let mut roots: Vec<Complex64> = (0..n).map(|i| seed.powu(i as u32 + 1)).collect();
    for _ in 0..200 {
        let mut max_step = 0.0f64;
        for i in 0..n {
            let mut denom = one;
            for j in 0..n {
                if i != j {
                    denom *= roots[i] - roots[j];
                }
            }
            if denom.norm() < 1e-300 {
                return Err(ToaError::Numeric("degenerate root iteration".into()));
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            max_step = max_step.max(step.norm());
        }
        if max_step < 1e-14 {
            break;
        }
    }
    Ok(roots)
}

/// ESPRIT delay estimation on a CFR: the rotational invariance of the
/// signal subspace gives per-path phase rotations whose arguments are the
/// delays (gridless). Delays map to [0, 1/Δf) and the TOA is their
/// minimum plus the anchor offset.
pub fn toa_esprit(
    cfr: &Cfr,
    subarray: usize,
    n_paths: usize,
    config: &SystemConfig,
    anchor: i64,
) -> Result<ToaEstimate> {
    check_subspace_args(cfr.values.len(), subarray, n_paths)?;
    let h = filled_cfr(cfr)?;
    let (_, vectors) = sorted_eigen(smoothed_covariance(&h, subarray))?;
    let signal = vectors.columns(0, n_paths);
    let upper = signal.rows(0, subarray - 1).into_owned();
    let lower = signal.rows(1, subarray - 1).into_owned();

    let gram = upper.adjoint() * &upper;
    let rhs = upper.adjoint() * &lower;
    let rotation = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| ToaError::Numeric("rank-deficient signal subspace".into()))?;

    let df = config.subcarrier_spacing_hz;
    let period = 1.0 / df;
    let mut delays_s: Vec<f64> = small_eigenvalues(&rotation)?
        .iter()
        .map(|lambda| {
            let mut tau = -lambda.arg() / (2.0 * std::f64::consts::PI * df);
            if tau < 0.0 {
                tau += period;
            }
            tau
        })
        .collect();
    delays_s.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let anchor_s = anchor as f64 * config.sample_period_s;
    Ok(ToaEstimate {
        toa_s: anchor_s + delays_s[0],
        method: EstimatorKind::Esprit,
        diagnostics: Some(Diagnostics::Delays(
            delays_s.iter().map(|&d| anchor_s + d).collect(),
        )),
    })
}
