//! Positioning reference signal grids and their baseband modulation.
//!
//! A PRS grid places unit-modulus QPSK pilots on a diagonal comb across the
//! OFDM time-frequency plane. Modulation turns a grid (optionally restricted
//! to a subset of subcarriers, e.g. one resource block) into a time-domain
//! sample stream with per-symbol cyclic prefixes:
//!
//!   s(t) = sum_k d_k · exp(j 2π k Δf (t − N_cp T_s))
//!
//! sampled at t = n T_s and scaled by 1/sqrt(N_fft) so a unit-modulus grid
//! gives unit average subcarrier power.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Result, ToaError};

/// Subcarriers per resource block.
pub const SUBCARRIERS_PER_RB: usize = 12;

/// Subframe symbols carrying PRS (diagonal comb, 8 of 14).
pub const PRS_SYMBOLS: [usize; 8] = [3, 5, 6, 8, 9, 10, 12, 13];

/// Comb period of the PRS frequency mapping.
pub const PRS_COMB: usize = 6;

/// OFDM numerology: subcarrier count, FFT size, CP layout, sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// Number of active subcarriers K.
    pub n_subcarriers: usize,
    /// FFT size (power of two, ≥ K).
    pub fft_size: usize,
    /// Subcarrier spacing Δf in Hz.
    pub subcarrier_spacing_hz: f64,
    /// Sampling period T_s in seconds (1 / (Δf · fft_size)).
    pub sample_period_s: f64,
    /// Cyclic prefix length in samples for each symbol of one subframe.
    pub cp_lengths: Vec<usize>,
    /// Number of resource blocks N_RB (K = 12 · N_RB).
    pub n_rb: usize,
    pub symbols_per_slot: usize,
    pub slots_per_subframe: usize,
}

impl SystemConfig {
    pub fn symbols_per_subframe(&self) -> usize {
        self.symbols_per_slot * self.slots_per_subframe
    }

    /// CP length of a symbol, indexed from the start of the stream.
    pub fn cp_len(&self, symbol: usize) -> usize {
        self.cp_lengths[symbol % self.symbols_per_subframe()]
    }

    /// Total samples in one subframe (CPs plus symbol bodies).
    pub fn samples_per_subframe(&self) -> usize {
        self.cp_lengths.iter().sum::<usize>() + self.symbols_per_subframe() * self.fft_size
    }

    /// Sample index of the start (first CP sample) of `symbol`.
    pub fn symbol_start(&self, symbol: usize) -> usize {
        let per_sf = self.symbols_per_subframe();
        let mut start = (symbol / per_sf) * self.samples_per_subframe();
        for s in 0..(symbol % per_sf) {
            start += self.cp_lengths[s] + self.fft_size;
        }
        start
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subcarriers != SUBCARRIERS_PER_RB * self.n_rb {
            return Err(ToaError::Config(format!(
                "K = {} but N_RB = {} requires K = {}",
                self.n_subcarriers,
                self.n_rb,
                SUBCARRIERS_PER_RB * self.n_rb
            )));
        }
        if self.fft_size < self.n_subcarriers {
            return Err(ToaError::Config(format!(
                "fft size {} smaller than K = {}",
                self.fft_size, self.n_subcarriers
            )));
        }
        let rate = self.subcarrier_spacing_hz * self.fft_size as f64;
        if (rate * self.sample_period_s - 1.0).abs() > 1e-9 {
            return Err(ToaError::Config(format!(
                "Δf · fft_size = {rate} is not 1 / T_s"
            )));
        }
        if self.cp_lengths.len() != self.symbols_per_subframe() {
            return Err(ToaError::Config(format!(
                "{} CP entries for {} symbols per subframe",
                self.cp_lengths.len(),
                self.symbols_per_subframe()
            )));
        }
        if self.cp_lengths.iter().any(|&c| c == 0) {
            return Err(ToaError::Config("zero-length cyclic prefix".into()));
        }
        Ok(())
    }
}

/// Build a named numerology preset. Only `"nbiot-1.4MHz"` is defined:
/// 72 subcarriers over 6 RBs at 15 kHz spacing, 128-point FFT, 1.92 Msps.
pub fn build_config(profile: &str) -> Result<SystemConfig> {
    match profile {
        "nbiot-1.4MHz" => {
            let symbols_per_slot = 7;
            let slots_per_subframe = 2;
            let mut cp_lengths = Vec::with_capacity(symbols_per_slot * slots_per_subframe);
            for _ in 0..slots_per_subframe {
                cp_lengths.push(10);
                cp_lengths.extend(std::iter::repeat(9).take(symbols_per_slot - 1));
            }
            let cfg = SystemConfig {
                n_subcarriers: 72,
                fft_size: 128,
                subcarrier_spacing_hz: 15_000.0,
                sample_period_s: 1.0 / 1.92e6,
                cp_lengths,
                n_rb: 6,
                symbols_per_slot,
                slots_per_subframe,
            };
            cfg.validate()?;
            Ok(cfg)
        }
        other => Err(ToaError::Config(format!("unknown profile {other:?}"))),
    }
}

/// Reference-symbol grid: one row per OFDM symbol, one column per subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct PrsGrid {
    /// QPSK values, zero on unoccupied cells. Indexed `[symbol][subcarrier]`.
    pub symbols: Vec<Vec<Complex64>>,
    /// Occupancy per `(symbol, subcarrier)`.
    pub mask: Vec<Vec<bool>>,
    pub n_subframes: usize,
}

impl PrsGrid {
    pub fn n_symbols(&self) -> usize {
        self.symbols.len()
    }
}

/// Complex baseband sample stream. `samples[i]` sits at absolute sample
/// index `start_offset + i` relative to the frame origin.
#[derive(Debug, Clone, PartialEq)]
pub struct BasebandSignal {
    pub samples: Vec<Complex64>,
    pub start_offset: i64,
}

impl BasebandSignal {
    /// Sample at an absolute index; zero outside the materialized range.
    pub fn sample_at(&self, abs_index: i64) -> Complex64 {
        let rel = abs_index - self.start_offset;
        if rel < 0 || rel as usize >= self.samples.len() {
            Complex64::new(0.0, 0.0)
        } else {
            self.samples[rel as usize]
        }
    }

    /// One past the last materialized absolute index.
    pub fn end_offset(&self) -> i64 {
        self.start_offset + self.samples.len() as i64
    }

    /// Mean per-sample power of the materialized samples.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }
}

/// Length-31 Gold sequence, standard two-LFSR construction with 1600-step
/// fast-forward. `x1` starts from the fixed unit state, `x2` from `c_init`.
fn gold_sequence(c_init: u32, len: usize) -> Vec<u8> {
    const NC: usize = 1600;
    let total = NC + len;
    let mut x1 = vec![0u8; total + 31];
    let mut x2 = vec![0u8; total + 31];
    x1[0] = 1;
    for i in 0..31 {
        x2[i] = ((c_init >> i) & 1) as u8;
    }
    for n in 0..total {
        x1[n + 31] = x1[n + 3] ^ x1[n];
        x2[n + 31] = x2[n + 3] ^ x2[n + 2] ^ x2[n + 1] ^ x2[n];
    }
    (0..len).map(|n| x1[n + NC] ^ x2[n + NC]).collect()
}

/// Sequence initialization per (cell, slot, symbol-in-slot), 31-bit.
fn prs_c_init(cell_id: u32, slot: usize, symbol_in_slot: usize) -> u32 {
    let ns = slot as u64;
    let l = symbol_in_slot as u64;
    let id = cell_id as u64;
    let init = (1u64 << 10) * (7 * (ns + 1) + l + 1) * (2 * id + 1) + 2 * id + 1;
    (init & 0x7FFF_FFFF) as u32
}

/// Generate the PRS grid for `n_subframes` subframes.
///
/// PRS occupies subframe symbols 3, 5, 6, 8, 9, 10, 12, 13, every 6th
/// subcarrier, with per-symbol frequency offset
/// `(cell_id + 18 − l) mod 6` so one subframe covers all K subcarriers.
pub fn generate_prs_grid(
    config: &SystemConfig,
    cell_id: u32,
    n_subframes: usize,
) -> Result<PrsGrid> {
    if cell_id > 503 {
        return Err(ToaError::Argument(format!(
            "cell_id {cell_id} outside [0, 503]"
        )));
    }
    if !(1..=2).contains(&n_subframes) {
        return Err(ToaError::Argument(format!(
            "n_subframes {n_subframes} outside {{1, 2}}"
        )));
    }
    let k_total = config.n_subcarriers;
    let per_sf = config.symbols_per_subframe();
    let n_symbols = n_subframes * per_sf;
    let v_shift = (cell_id as usize) % PRS_COMB;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;

    let mut symbols = vec![vec![Complex64::new(0.0, 0.0); k_total]; n_symbols];
    let mut mask = vec![vec![false; k_total]; n_symbols];

    for s in 0..n_symbols {
        let l = s % per_sf;
        if !PRS_SYMBOLS.contains(&l) {
            continue;
        }
        let slot = s / config.symbols_per_slot;
        let l_in_slot = s % config.symbols_per_slot;
        let n_re = k_total / PRS_COMB;
        let bits = gold_sequence(prs_c_init(cell_id, slot, l_in_slot), 2 * n_re);
        let offset = (v_shift + 18 - l) % PRS_COMB;
        for (m, k) in (offset..k_total).step_by(PRS_COMB).enumerate() {
            let re = 1.0 - 2.0 * f64::from(bits[2 * m]);
            let im = 1.0 - 2.0 * f64::from(bits[2 * m + 1]);
            symbols[s][k] = Complex64::new(re * inv_sqrt2, im * inv_sqrt2);
            mask[s][k] = true;
        }
    }

    Ok(PrsGrid {
        symbols,
        mask,
        n_subframes,
    })
}

/// Subcarrier indices of resource block `v`: `{12v, …, 12v + 11}`.
pub fn rb_subcarrier_set(config: &SystemConfig, v: usize) -> Result<Vec<usize>> {
    if v >= config.n_rb {
        return Err(ToaError::Argument(format!(
            "RB index {v} outside [0, {})",
            config.n_rb
        )));
    }
    Ok((SUBCARRIERS_PER_RB * v..SUBCARRIERS_PER_RB * (v + 1)).collect())
}

/// Modulate a grid to baseband: per-symbol inverse DFT (scaled 1/sqrt(N))
/// with the cyclic prefix prepended, symbols concatenated in time.
///
/// `subcarrier_set` restricts the modulated subcarriers (e.g. one RB);
/// `None` modulates the full band.
pub fn modulate_grid(
    config: &SystemConfig,
    grid: &PrsGrid,
    subcarrier_set: Option<&[usize]>,
) -> Result<BasebandSignal> {
    if let Some(set) = subcarrier_set {
        if let Some(&bad) = set.iter().find(|&&k| k >= config.n_subcarriers) {
            return Err(ToaError::Argument(format!(
                "subcarrier {bad} outside [0, {})",
                config.n_subcarriers
            )));
        }
    }
    let n = config.fft_size;
    let mut keep = vec![false; config.n_subcarriers];
    match subcarrier_set {
        Some(set) => set.iter().for_each(|&k| keep[k] = true),
        None => keep.iter_mut().for_each(|k| *k = true),
    }

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    let scale = 1.0 / (n as f64).sqrt();

    let mut samples =
        Vec::with_capacity(grid.n_subframes * config.samples_per_subframe());
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    for (s, row) in grid.symbols.iter().enumerate() {
        spectrum.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (k, &d) in row.iter().enumerate() {
            if keep[k] {
                spectrum[k] = d;
            }
        }
        ifft.process(&mut spectrum);
        spectrum.iter_mut().for_each(|c| *c *= scale);
        let cp = config.cp_len(s);
        samples.extend_from_slice(&spectrum[n - cp..]);
        samples.extend_from_slice(&spectrum);
    }

    Ok(BasebandSignal {
        samples,
        start_offset: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> SystemConfig {
        build_config("nbiot-1.4MHz").unwrap()
    }

    #[test]
    fn nbiot_preset_matches_numerology() {
        let c = cfg();
        assert_eq!(c.n_subcarriers, 72);
        assert_eq!(c.n_rb, 6);
        assert!((c.sample_period_s * 1e9 - 520.8333333333333).abs() < 1e-6);
        // Δf · fft_size = 1.92e6 = 1 / T_s
        let rate = c.subcarrier_spacing_hz * c.fft_size as f64;
        assert_eq!(rate, 1.92e6);
        assert!((rate * c.sample_period_s - 1.0).abs() < 1e-12);
        assert_eq!(c.samples_per_subframe(), 1920);
        assert_eq!(c.symbol_start(1), 10 + 128);
        assert_eq!(c.symbol_start(7), 960);
    }

    #[test]
    fn unknown_profile_is_config_error() {
        assert!(matches!(
            build_config("lte-5MHz"),
            Err(ToaError::Config(_))
        ));
    }

    #[test]
    fn grid_density_and_coverage() {
        let c = cfg();
        let grid = generate_prs_grid(&c, 0, 1).unwrap();
        let mut covered = vec![false; c.n_subcarriers];
        for (s, row) in grid.mask.iter().enumerate() {
            let occupied = row.iter().filter(|&&m| m).count();
            if PRS_SYMBOLS.contains(&s) {
                assert_eq!(occupied, c.n_subcarriers / PRS_COMB, "symbol {s}");
                // two occupied REs per RB per PRS symbol
                for rb in 0..c.n_rb {
                    let in_rb = (0..SUBCARRIERS_PER_RB)
                        .filter(|&i| row[rb * SUBCARRIERS_PER_RB + i])
                        .count();
                    assert_eq!(in_rb, 2, "symbol {s} rb {rb}");
                }
            } else {
                assert_eq!(occupied, 0, "symbol {s} should be empty");
            }
            for (k, &m) in row.iter().enumerate() {
                if m {
                    covered[k] = true;
                }
            }
        }
        assert!(covered.iter().all(|&c| c), "one subframe must cover all K");
    }

    #[test]
    fn grid_values_unit_modulus_and_zero_off_mask() {
        let c = cfg();
        let grid = generate_prs_grid(&c, 211, 2).unwrap();
        for (row, mrow) in grid.symbols.iter().zip(&grid.mask) {
            for (&d, &m) in row.iter().zip(mrow) {
                if m {
                    assert!((d.norm() - 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(d, Complex64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn grid_is_deterministic() {
        let c = cfg();
        let a = generate_prs_grid(&c, 17, 2).unwrap();
        let b = generate_prs_grid(&c, 17, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cell_id_shifts_mask_cyclically() {
        let c = cfg();
        let m0 = generate_prs_grid(&c, 0, 1).unwrap().mask;
        let m1 = generate_prs_grid(&c, 1, 1).unwrap().mask;
        for s in 0..m0.len() {
            for k in 0..c.n_subcarriers {
                assert_eq!(m1[s][(k + 1) % c.n_subcarriers], m0[s][k]);
            }
        }
    }

    #[test]
    fn bad_grid_arguments_rejected() {
        let c = cfg();
        assert!(matches!(
            generate_prs_grid(&c, 504, 1),
            Err(ToaError::Argument(_))
        ));
        assert!(matches!(
            generate_prs_grid(&c, 0, 3),
            Err(ToaError::Argument(_))
        ));
    }

    #[test]
    fn rb_sets_partition_the_band() {
        let c = cfg();
        assert_eq!(rb_subcarrier_set(&c, 0).unwrap(), (0..12).collect::<Vec<_>>());
        let mut seen = vec![false; c.n_subcarriers];
        for v in 0..c.n_rb {
            for k in rb_subcarrier_set(&c, v).unwrap() {
                assert!(!seen[k], "subcarrier {k} in two RBs");
                seen[k] = true;
            }
        }
        assert_eq!(seen.iter().filter(|&&s| s).count(), 72);
        assert!(matches!(
            rb_subcarrier_set(&c, 6),
            Err(ToaError::Argument(_))
        ));
    }

    #[test]
    fn single_tone_has_constant_modulus() {
        let c = cfg();
        let mut grid = generate_prs_grid(&c, 0, 1).unwrap();
        for row in grid.symbols.iter_mut() {
            row.iter_mut().for_each(|d| *d = Complex64::new(0.0, 0.0));
        }
        for row in grid.mask.iter_mut() {
            row.iter_mut().for_each(|m| *m = false);
        }
        grid.symbols[3][0] = Complex64::new(1.0, 0.0);
        grid.mask[3][0] = true;

        let sig = modulate_grid(&c, &grid, None).unwrap();
        let expected = 1.0 / (c.fft_size as f64).sqrt();
        let start = c.symbol_start(3);
        let span = c.cp_len(3) + c.fft_size;
        for i in 0..sig.samples.len() {
            let mag = sig.samples[i].norm();
            if (start..start + span).contains(&i) {
                assert!((mag - expected).abs() < 1e-12, "sample {i}: {mag}");
            } else {
                assert!(mag < 1e-15, "sample {i} should be zero");
            }
        }
    }

    #[test]
    fn cyclic_prefix_copies_symbol_tail() {
        let c = cfg();
        let grid = generate_prs_grid(&c, 3, 2).unwrap();
        let sig = modulate_grid(&c, &grid, None).unwrap();
        for s in 0..grid.n_symbols() {
            let start = c.symbol_start(s);
            let cp = c.cp_len(s);
            for i in 0..cp {
                assert_eq!(
                    sig.samples[start + i],
                    sig.samples[start + cp + c.fft_size - cp + i],
                    "symbol {s} CP sample {i}"
                );
            }
        }
    }

    #[test]
    fn rb_signals_sum_to_full_band() {
        let c = cfg();
        let grid = generate_prs_grid(&c, 42, 2).unwrap();
        let full = modulate_grid(&c, &grid, None).unwrap();
        let mut acc = vec![Complex64::new(0.0, 0.0); full.samples.len()];
        for v in 0..c.n_rb {
            let set = rb_subcarrier_set(&c, v).unwrap();
            let part = modulate_grid(&c, &grid, Some(&set)).unwrap();
            for (a, &p) in acc.iter_mut().zip(&part.samples) {
                *a += p;
            }
        }
        let peak = full.samples.iter().map(|s| s.norm()).fold(0.0, f64::max);
        for (a, &f) in acc.iter().zip(&full.samples) {
            assert!((*a - f).norm() <= 1e-12 * peak);
        }
    }

    #[test]
    fn rb_restriction_never_gains_energy() {
        let c = cfg();
        let grid = generate_prs_grid(&c, 7, 1).unwrap();
        let full_energy: f64 = modulate_grid(&c, &grid, None)
            .unwrap()
            .samples
            .iter()
            .map(|s| s.norm_sqr())
            .sum();
        for v in 0..c.n_rb {
            let set = rb_subcarrier_set(&c, v).unwrap();
            let e: f64 = modulate_grid(&c, &grid, Some(&set))
                .unwrap()
                .samples
                .iter()
                .map(|s| s.norm_sqr())
                .sum();
            assert!(e <= full_energy + 1e-9);
        }
    }

    #[test]
    fn modulation_is_deterministic() {
        let c = cfg();
        let grid = generate_prs_grid(&c, 99, 2).unwrap();
        let a = modulate_grid(&c, &grid, None).unwrap();
        let b = modulate_grid(&c, &grid, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_subcarrier_set_rejected() {
        let c = cfg();
        let grid = generate_prs_grid(&c, 0, 1).unwrap();
        assert!(matches!(
            modulate_grid(&c, &grid, Some(&[72])),
            Err(ToaError::Argument(_))
        ));
    }

    proptest! {
        #[test]
        fn rb_decomposition_is_exact(cell_id in 0u32..504, two_sf in proptest::bool::ANY) {
            let c = cfg();
            let n_sf = if two_sf { 2 } else { 1 };
            let grid = generate_prs_grid(&c, cell_id, n_sf).unwrap();
            let full = modulate_grid(&c, &grid, None).unwrap();
            let mut acc = vec![Complex64::new(0.0, 0.0); full.samples.len()];
            for v in 0..c.n_rb {
                let set = rb_subcarrier_set(&c, v).unwrap();
                let part = modulate_grid(&c, &grid, Some(&set)).unwrap();
                for (a, &p) in acc.iter_mut().zip(&part.samples) {
                    *a += p;
                }
            }
            let peak = full.samples.iter().map(|s| s.norm()).fold(0.0, f64::max);
            for (a, &f) in acc.iter().zip(&full.samples) {
                prop_assert!((*a - f).norm() <= 1e-12 * peak);
            }
        }
    }
}
