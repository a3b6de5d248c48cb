//! Cross-correlation of received streams against reference replicas, and
//! the amplitude/phase feature map built from the full-band and per-RB
//! correlations.
//!
//! For a lag window of M bins starting at `anchor` samples,
//!
//!   R(m) = sum_{i=0}^{N_t−1} r(anchor + m + i) · conj(s(i)),  m ∈ [0, M)
//!
//! where `r` is read at absolute sample indices and `s` is the reference
//! replica from its own origin. The same routine serves the full band and
//! each RB-restricted reference.

use num_complex::Complex64;

use crate::error::{Result, ToaError};
use crate::prs::{BasebandSignal, SystemConfig};

/// Guard subtracted from the coarse correlation peak so the fine window
/// starts a few samples before the estimated arrival.
pub const COARSE_SYNC_GUARD: i64 = 4;

/// Complex correlation values over a window of lags.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSeries {
    /// R(m) for m in [0, M).
    pub values: Vec<Complex64>,
    /// Absolute sample index of lag m = 0.
    pub anchor: i64,
    /// Window length M.
    pub window: usize,
    /// Summation span N_t in samples.
    pub search_span: usize,
}

/// Cross-correlate `received` against `reference` over `m_window` lags
/// starting at `anchor`, each lag summing `n_t` reference samples.
pub fn cross_correlate(
    received: &BasebandSignal,
    reference: &BasebandSignal,
    anchor: i64,
    m_window: usize,
    n_t: usize,
) -> Result<CorrelationSeries> {
    if m_window == 0 || n_t == 0 {
        return Err(ToaError::Argument("empty correlation window".into()));
    }
    let needed = anchor + m_window as i64 + n_t as i64 - 1;
    if needed > received.end_offset() {
        return Err(ToaError::Window {
            needed: needed.max(0) as usize,
            available: received.end_offset().max(0) as usize,
        });
    }
    let n_ref = n_t.min(reference.samples.len());
    let values = (0..m_window)
        .map(|m| {
            let base = anchor + m as i64;
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, s) in reference.samples[..n_ref].iter().enumerate() {
                if s.re == 0.0 && s.im == 0.0 {
                    continue;
                }
                acc += received.sample_at(base + i as i64) * s.conj();
            }
            acc
        })
        .collect();
    Ok(CorrelationSeries {
        values,
        anchor,
        window: m_window,
        search_span: n_t,
    })
}

/// Coarse timing from a wide-span correlation: the magnitude peak minus a
/// fixed guard, clamped to zero. Fine windows start at the returned anchor
/// and final TOA estimates add `anchor · T_s` back.
pub fn coarse_sync(full: &CorrelationSeries) -> i64 {
    coarse_sync_with_guard(full, COARSE_SYNC_GUARD)
}

pub fn coarse_sync_with_guard(full: &CorrelationSeries, guard: i64) -> i64 {
    let peak = argmax_magnitude(&full.values) as i64;
    (full.anchor + peak - guard).max(0)
}

/// Index of the largest magnitude, ties broken toward the smaller index.
pub fn argmax_magnitude(values: &[Complex64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.iter().enumerate() {
        let mag = v.norm_sqr();
        if mag > best_val {
            best_val = mag;
            best = i;
        }
    }
    best
}

/// Amplitude/phase stack of the full-band and per-RB correlations.
///
/// `planes` is row-major M × (1 + N_RB) × 2: column 0 is the full band,
/// columns 1..=N_RB the RBs; channel 0 holds amplitude normalized by the
/// full-band maximum, channel 1 the phase in radians (0 where the
/// amplitude is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub planes: Vec<f32>,
    pub m: usize,
    pub n_rb: usize,
    pub anchor: i64,
    pub norm_scale: f64,
}

impl FeatureMap {
    pub fn n_cols(&self) -> usize {
        1 + self.n_rb
    }

    pub fn len(&self) -> usize {
        self.m * self.n_cols() * 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, m: usize, col: usize, ch: usize) -> usize {
        (m * self.n_cols() + col) * 2 + ch
    }

    pub fn amplitude(&self, m: usize, col: usize) -> f32 {
        self.planes[self.index(m, col, 0)]
    }

    pub fn phase(&self, m: usize, col: usize) -> f32 {
        self.planes[self.index(m, col, 1)]
    }
}

/// Assemble the feature map from one full-band series and N_RB RB series
/// sharing the same anchor and window.
pub fn build_feature_map(
    full: &CorrelationSeries,
    rbs: &[CorrelationSeries],
    m_window: usize,
) -> Result<FeatureMap> {
    if full.values.len() != m_window {
        return Err(ToaError::Argument(format!(
            "full-band series has {} lags, expected {m_window}",
            full.values.len()
        )));
    }
    for (v, rb) in rbs.iter().enumerate() {
        if rb.values.len() != m_window || rb.anchor != full.anchor {
            return Err(ToaError::Argument(format!(
                "RB series {v} window/anchor mismatch"
            )));
        }
    }
    let norm_scale = full
        .values
        .iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max);
    if norm_scale <= 0.0 {
        return Err(ToaError::DegenerateInput(
            "all-zero full-band correlation".into(),
        ));
    }

    let n_cols = 1 + rbs.len();
    let mut planes = vec![0.0f32; m_window * n_cols * 2];
    let mut write = |m: usize, col: usize, value: Complex64| {
        let amp = value.norm() / norm_scale;
        let phase = if value.norm() == 0.0 { 0.0 } else { value.arg() };
        planes[(m * n_cols + col) * 2] = amp as f32;
        planes[(m * n_cols + col) * 2 + 1] = phase as f32;
    };
    for m in 0..m_window {
        write(m, 0, full.values[m]);
        for (v, rb) in rbs.iter().enumerate() {
            write(m, v + 1, rb.values[m]);
        }
    }

    Ok(FeatureMap {
        planes,
        m: m_window,
        n_rb: rbs.len(),
        anchor: full.anchor,
        norm_scale,
    })
}

/// Delay grid specification for the template dictionary (seconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayGrid {
    pub min_s: f64,
    pub max_s: f64,
    pub step_s: f64,
}

impl DelayGrid {
    pub fn taus(&self) -> Vec<f64> {
        let mut taus = Vec::new();
        let mut i = 0usize;
        loop {
            let tau = self.min_s + i as f64 * self.step_s;
            if tau > self.max_s + 1e-15 {
                break;
            }
            taus.push(tau);
            i += 1;
        }
        taus
    }
}

/// Correlation templates γ(mT_s − τ) for a grid of candidate delays,
/// one column per grid point.
#[derive(Debug, Clone)]
pub struct CorrelationDictionary {
    pub taus_s: Vec<f64>,
    /// columns[i][m] = γ(m T_s − τ_i)
    pub columns: Vec<Vec<Complex64>>,
    pub m_window: usize,
    pub search_span: usize,
}

/// Build the dictionary by correlating delayed copies of the reference
/// against itself. Fractional delays use the same frequency-domain phase
/// ramp as channel propagation; integer parts shift the stream origin.
pub fn correlation_dictionary(
    config: &SystemConfig,
    reference: &BasebandSignal,
    grid: DelayGrid,
    m_window: usize,
    n_t: usize,
) -> Result<CorrelationDictionary> {
    if grid.step_s <= 0.0 {
        return Err(ToaError::Argument("delay grid step must be positive".into()));
    }
    let taus_s = grid.taus();
    if taus_s.is_empty() {
        return Err(ToaError::Argument("empty delay grid".into()));
    }
    let t_s = config.sample_period_s;
    let mut columns = Vec::with_capacity(taus_s.len());
    for &tau in &taus_s {
        let shift = (tau / t_s).floor() as i64;
        let frac_s = tau - shift as f64 * t_s;
        let realization = crate::channel::ChannelRealization {
            delays_s: vec![frac_s],
            gains: vec![Complex64::new(1.0, 0.0)],
            toa_true_s: 0.0,
            snr_db: f64::INFINITY,
        };
        let mut delayed = crate::channel::propagate(reference, &realization, config)?;
        delayed.start_offset += shift;
        delayed
            .samples
            .extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(m_window + 1));
        let series = cross_correlate(&delayed, reference, 0, m_window, n_t)?;
        columns.push(series.values);
    }
    Ok(CorrelationDictionary {
        taus_s,
        columns,
        m_window,
        search_span: n_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{add_awgn, draw_realization, profile, propagate, ChannelCase};
    use crate::prs::{build_config, generate_prs_grid, modulate_grid, rb_subcarrier_set};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (crate::prs::SystemConfig, BasebandSignal, Vec<BasebandSignal>) {
        let cfg = build_config("nbiot-1.4MHz").unwrap();
        let grid = generate_prs_grid(&cfg, 0, 1).unwrap();
        let full = modulate_grid(&cfg, &grid, None).unwrap();
        let rbs = (0..cfg.n_rb)
            .map(|v| {
                let set = rb_subcarrier_set(&cfg, v).unwrap();
                modulate_grid(&cfg, &grid, Some(&set)).unwrap()
            })
            .collect();
        (cfg, full, rbs)
    }

    /// Received-stream stand-in: the signal delayed by whole samples, with
    /// a tail margin so fine windows stay inside the capture.
    fn delayed_by(sig: &BasebandSignal, samples: i64) -> BasebandSignal {
        let mut out = sig.samples.clone();
        out.extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(64));
        BasebandSignal {
            samples: out,
            start_offset: sig.start_offset + samples,
        }
    }

    #[test]
    fn autocorrelation_peaks_at_zero_lag() {
        let (_, full, _) = setup();
        let n_t = full.samples.len();
        let rx = delayed_by(&full, 0);
        let r = cross_correlate(&rx, &full, 0, 16, n_t).unwrap();
        let energy: f64 = full.samples.iter().map(|s| s.norm_sqr()).sum();
        assert!((r.values[0].norm() - energy).abs() < 1e-9 * energy);
        for m in 1..r.values.len() {
            assert!(r.values[0].norm() >= r.values[m].norm());
        }
    }

    #[test]
    fn integer_delay_moves_the_peak() {
        let (_, full, _) = setup();
        let n_t = full.samples.len();
        let rx = delayed_by(&full, 3);
        let r = cross_correlate(&rx, &full, 0, 16, n_t).unwrap();
        assert_eq!(argmax_magnitude(&r.values), 3);
    }

    #[test]
    fn window_past_stream_end_is_rejected() {
        let (_, full, _) = setup();
        let n_t = full.samples.len();
        assert!(matches!(
            cross_correlate(&full, &full, 16, 16, n_t),
            Err(ToaError::Window { .. })
        ));
    }

    #[test]
    fn rb_series_sum_to_full_series() {
        let (cfg, full, rbs) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let real = draw_realization(&profile(ChannelCase::Epa5), 2.6 * cfg.sample_period_s, &mut rng)
            .unwrap();
        let faded = delayed_by(&propagate(&full, &real, &cfg).unwrap(), 0);
        let rx = add_awgn(&faded, 10.0, &mut rng);

        let n_t = full.samples.len();
        let m = 32;
        let r_full = cross_correlate(&rx, &full, 0, m, n_t).unwrap();
        let mut sum = vec![Complex64::new(0.0, 0.0); m];
        for rb in &rbs {
            let r_rb = cross_correlate(&rx, rb, 0, m, n_t).unwrap();
            for (s, v) in sum.iter_mut().zip(&r_rb.values) {
                *s += v;
            }
        }
        let scale = r_full.values.iter().map(|c| c.norm()).fold(0.0, f64::max);
        for (s, f) in sum.iter().zip(&r_full.values) {
            assert!((s - f).norm() <= 1e-9 * scale);
        }
    }

    #[test]
    fn coarse_sync_subtracts_guard() {
        let (_, full, _) = setup();
        let n_t = full.samples.len();
        let rx = delayed_by(&full, 8);
        let wide = cross_correlate(&rx, &full, 0, 32, n_t).unwrap();
        assert_eq!(coarse_sync(&wide), 4);
    }

    #[test]
    fn coarse_sync_clamps_at_zero_and_tolerates_noise() {
        let (_, full, _) = setup();
        let n_t = full.samples.len();
        let rx = delayed_by(&full, 1);
        let wide = cross_correlate(&rx, &full, 0, 32, n_t).unwrap();
        assert_eq!(coarse_sync(&wide), 0);

        let noise = BasebandSignal {
            samples: (0..n_t + 64)
                .map(|i| Complex64::new(((i * 37) % 11) as f64 - 5.0, ((i * 13) % 7) as f64 - 3.0))
                .collect(),
            start_offset: 0,
        };
        let wide = cross_correlate(&noise, &full, 0, 32, n_t).unwrap();
        let anchor = coarse_sync(&wide);
        assert!((0..32).contains(&anchor));
    }

    #[test]
    fn coarse_sync_invariant_to_complex_scaling() {
        let (_, full, _) = setup();
        let n_t = full.samples.len();
        let rx = delayed_by(&full, 6);
        let scaled = BasebandSignal {
            samples: rx.samples.iter().map(|s| s * Complex64::new(-0.3, 1.9)).collect(),
            start_offset: rx.start_offset,
        };
        let a = coarse_sync(&cross_correlate(&rx, &full, 0, 32, n_t).unwrap());
        let b = coarse_sync(&cross_correlate(&scaled, &full, 0, 32, n_t).unwrap());
        assert_eq!(a, b);
    }

    fn feature_map_for(rx: &BasebandSignal) -> FeatureMap {
        let (cfg, full, rbs) = setup();
        let _ = cfg;
        let n_t = full.samples.len();
        let m = 32;
        let r_full = cross_correlate(rx, &full, 0, m, n_t).unwrap();
        let r_rbs: Vec<_> = rbs
            .iter()
            .map(|rb| cross_correlate(rx, rb, 0, m, n_t).unwrap())
            .collect();
        build_feature_map(&r_full, &r_rbs, m).unwrap()
    }

    #[test]
    fn feature_map_shape_and_ranges() {
        let (_, full, _) = setup();
        let rx = delayed_by(&full, 5);
        let map = feature_map_for(&rx);
        assert_eq!(map.m, 32);
        assert_eq!(map.n_rb, 6);
        assert_eq!(map.planes.len(), 32 * 7 * 2);

        let mut max_full = 0.0f32;
        for m in 0..map.m {
            for col in 0..map.n_cols() {
                let amp = map.amplitude(m, col);
                let phase = map.phase(m, col);
                assert!((0.0..=1.0).contains(&amp));
                assert!(phase.abs() <= std::f32::consts::PI);
                if col == 0 {
                    max_full = max_full.max(amp);
                }
            }
        }
        assert_eq!(max_full, 1.0, "full-band column must self-normalize");
    }

    #[test]
    fn feature_map_scaling_invariance() {
        let (_, full, _) = setup();
        let rx = delayed_by(&full, 5);
        let c = Complex64::new(0.7, -1.1);
        let scaled = BasebandSignal {
            samples: rx.samples.iter().map(|s| s * c).collect(),
            start_offset: rx.start_offset,
        };
        let a = feature_map_for(&rx);
        let b = feature_map_for(&scaled);
        let rot = c.arg() as f32;
        for m in 0..a.m {
            for col in 0..a.n_cols() {
                assert!((a.amplitude(m, col) - b.amplitude(m, col)).abs() < 1e-5);
                if a.amplitude(m, col) > 1e-4 {
                    let mut diff = b.phase(m, col) - a.phase(m, col) - rot;
                    while diff > std::f32::consts::PI {
                        diff -= 2.0 * std::f32::consts::PI;
                    }
                    while diff < -std::f32::consts::PI {
                        diff += 2.0 * std::f32::consts::PI;
                    }
                    assert!(diff.abs() < 1e-4, "col {col} lag {m}: {diff}");
                }
            }
        }
    }

    #[test]
    fn all_zero_input_is_degenerate() {
        let zero = CorrelationSeries {
            values: vec![Complex64::new(0.0, 0.0); 8],
            anchor: 0,
            window: 8,
            search_span: 16,
        };
        assert!(matches!(
            build_feature_map(&zero, &[], 8),
            Err(ToaError::DegenerateInput(_))
        ));
    }

    #[test]
    fn feature_map_is_deterministic() {
        let (_, full, _) = setup();
        let rx = delayed_by(&full, 2);
        assert_eq!(feature_map_for(&rx), feature_map_for(&rx));
    }

    #[test]
    fn dictionary_zero_delay_is_autocorrelation() {
        let (cfg, full, _) = setup();
        let n_t = full.samples.len();
        let grid = DelayGrid {
            min_s: 0.0,
            max_s: 2.0 * cfg.sample_period_s,
            step_s: cfg.sample_period_s,
        };
        let dict = correlation_dictionary(&cfg, &full, grid, 16, n_t).unwrap();
        let auto = cross_correlate(&delayed_by(&full, 0), &full, 0, 16, n_t).unwrap();
        let scale = auto.values[0].norm();
        for (a, b) in dict.columns[0].iter().zip(&auto.values) {
            assert!((a - b).norm() < 1e-9 * scale);
        }
        // integer delay column is the zero column shifted by one lag bin
        for m in 1..16 {
            assert!((dict.columns[1][m] - dict.columns[0][m - 1]).norm() < 1e-9 * scale);
        }
    }

    #[test]
    fn dictionary_peak_moves_monotonically() {
        let (cfg, full, _) = setup();
        let n_t = full.samples.len();
        let grid = DelayGrid {
            min_s: 0.0,
            max_s: 8.0 * cfg.sample_period_s,
            step_s: cfg.sample_period_s / 4.0,
        };
        let dict = correlation_dictionary(&cfg, &full, grid, 16, n_t).unwrap();
        let mut last_peak = 0usize;
        for col in &dict.columns {
            let peak = argmax_magnitude(col);
            assert!(peak >= last_peak, "peak moved backwards");
            last_peak = peak;
        }
        assert!(last_peak >= 8, "peak should track the delay grid");
    }

    #[test]
    fn empty_grid_is_rejected() {
        let (cfg, full, _) = setup();
        let n_t = full.samples.len();
        let grid = DelayGrid {
            min_s: 1.0e-6,
            max_s: 0.0,
            step_s: 1e-7,
        };
        assert!(matches!(
            correlation_dictionary(&cfg, &full, grid, 16, n_t),
            Err(ToaError::Argument(_))
        ));
        let bad_step = DelayGrid {
            min_s: 0.0,
            max_s: 1e-6,
            step_s: 0.0,
        };
        assert!(matches!(
            correlation_dictionary(&cfg, &full, bad_step, 16, n_t),
            Err(ToaError::Argument(_))
        ));
    }
}
