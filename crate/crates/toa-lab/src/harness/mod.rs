//! Dataset generation, estimator evaluation, and reporting.
//!
//! One record: draw a channel realization and a fractional-sample TOA
//! offset, propagate the PRS waveform, capture it from the frame origin
//! with a noise tail, add AWGN, coarse-sync on the wide full-band
//! correlation, then assemble the M-lag feature map from the full-band and
//! per-RB correlations. Per-record generators are seeded by
//! (master seed, record index), so parallel generation is order-independent
//! and files are byte-identical for a given configuration.

pub mod checkpoint;
pub mod dataset;
pub mod report;

use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{
    add_awgn, draw_realization, profile, propagate, ChannelCase, ChannelRealization,
};
use crate::classical::{
    estimate_cfr, toa_esprit, toa_ls, toa_music, toa_peak, EstimatorKind, ToaEstimate,
};
use crate::correlator::{
    build_feature_map, coarse_sync, correlation_dictionary, cross_correlate,
    CorrelationDictionary, CorrelationSeries, DelayGrid, FeatureMap,
};
use crate::error::{Result, ToaError};
use crate::neural::{self, NetworkParams, TrainHyper, TrainSample};
use crate::prs::{
    build_config, generate_prs_grid, modulate_grid, rb_subcarrier_set, BasebandSignal, PrsGrid,
    SystemConfig,
};
use dataset::Dataset;
use report::{entry_from_errors, MetricsReport, ReportMetadata};

/// Correlation feature window length M.
pub const FEATURE_WINDOW: usize = 32;
/// Lag span of the coarse-sync search.
pub const WIDE_SYNC_SPAN: usize = 32;
/// Noise-only samples appended to the receiver capture.
pub const CAPTURE_TAIL: usize = 64;
/// Subarray length for the subspace baselines (K/2).
pub const SUBSPACE_SUBARRAY: usize = 36;

/// Path-count prior for the classical baselines.
pub fn baseline_path_count(case: ChannelCase) -> usize {
    match case {
        ChannelCase::Static => 1,
        ChannelCase::Epa5 | ChannelCase::Eva5 => 3,
    }
}

/// Delay search grid of the least-squares baseline, relative to the anchor.
pub fn ls_delay_grid(config: &SystemConfig) -> DelayGrid {
    let t_s = config.sample_period_s;
    DelayGrid {
        min_s: -2.0 * t_s,
        max_s: 12.0 * t_s,
        step_s: t_s / 16.0,
    }
}

/// MUSIC pseudo-spectrum grid, relative to the anchor.
pub fn music_delay_grid(config: &SystemConfig) -> DelayGrid {
    let t_s = config.sample_period_s;
    DelayGrid {
        min_s: -2.0 * t_s,
        max_s: 6.0 * t_s,
        step_s: t_s / 64.0,
    }
}

/// Mix a master seed with a record index (splitmix64) so records get
/// independent, order-free generator streams.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

static POOL_INIT: OnceLock<bool> = OnceLock::new();

/// Honor TOA_LAB_THREADS: 0 (or 1) forces single-threaded execution, any
/// larger value caps the worker pool. Returns whether parallelism is on.
pub fn init_worker_pool() -> bool {
    *POOL_INIT.get_or_init(|| match std::env::var("TOA_LAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Ok(1) => false,
            Ok(n) => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                true
            }
            Err(_) => true,
        },
        Err(_) => true,
    })
}

fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if init_worker_pool() {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Scenario for dataset generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub case: ChannelCase,
    pub snr_list_db: Vec<f64>,
    pub n_records: usize,
    pub n_subframes: usize,
    pub cell_id: u32,
    pub seed: u64,
    /// TOA offsets are drawn uniformly from this range (seconds).
    pub tau0_range_s: (f64, f64),
}

impl ScenarioConfig {
    pub fn new(case: ChannelCase, snr_list_db: Vec<f64>, n_records: usize, seed: u64) -> Self {
        let t_s = 1.0 / 1.92e6;
        ScenarioConfig {
            case,
            snr_list_db,
            n_records,
            n_subframes: 2,
            cell_id: 0,
            seed,
            tau0_range_s: (0.0, 10.0 * t_s),
        }
    }

    pub fn validate(&self, config: &SystemConfig) -> Result<()> {
        if self.n_records == 0 {
            return Err(ToaError::Argument("n_records must be positive".into()));
        }
        if self.snr_list_db.is_empty() {
            return Err(ToaError::Argument("snr list must be nonempty".into()));
        }
        if !(1..=2).contains(&self.n_subframes) {
            return Err(ToaError::Argument(format!(
                "n_subframes {} outside {{1, 2}}",
                self.n_subframes
            )));
        }
        let (lo, hi) = self.tau0_range_s;
        let max_tau = (WIDE_SYNC_SPAN as f64 - 8.0) * config.sample_period_s;
        if !(0.0..=max_tau).contains(&lo) || !(lo..=max_tau).contains(&hi) {
            return Err(ToaError::Argument(format!(
                "tau0 range [{lo:.3e}, {hi:.3e}] outside [0, {max_tau:.3e}]"
            )));
        }
        Ok(())
    }
}

/// Reference signals shared by every record of a (cell, subframes) setup.
pub struct SignalContext {
    pub config: SystemConfig,
    pub grid: PrsGrid,
    pub reference_full: BasebandSignal,
    pub reference_rbs: Vec<BasebandSignal>,
    /// Correlation span N_t: the whole modulated reference.
    pub n_t: usize,
}

impl SignalContext {
    pub fn new(cell_id: u32, n_subframes: usize) -> Result<Self> {
        let config = build_config("nbiot-1.4MHz")?;
        let grid = generate_prs_grid(&config, cell_id, n_subframes)?;
        let reference_full = modulate_grid(&config, &grid, None)?;
        let reference_rbs = (0..config.n_rb)
            .map(|v| {
                let set = rb_subcarrier_set(&config, v)?;
                modulate_grid(&config, &grid, Some(&set))
            })
            .collect::<Result<Vec<_>>>()?;
        let n_t = reference_full.samples.len();
        Ok(SignalContext {
            config,
            grid,
            reference_full,
            reference_rbs,
            n_t,
        })
    }
}

/// Everything produced for one record.
pub struct Observation {
    pub received: BasebandSignal,
    pub realization: ChannelRealization,
    pub anchor: i64,
    pub full: CorrelationSeries,
    pub rbs: Vec<CorrelationSeries>,
    pub feature_map: FeatureMap,
    pub snr_db: f64,
}

/// Materialize the receiver capture: the stream from the frame origin,
/// with integer delay realized as leading silence and a noise tail.
fn capture(faded: &BasebandSignal) -> BasebandSignal {
    let lead = faded.start_offset.max(0) as usize;
    let mut samples = Vec::with_capacity(lead + faded.samples.len() + CAPTURE_TAIL);
    samples.extend(std::iter::repeat(num_complex::Complex64::new(0.0, 0.0)).take(lead));
    samples.extend_from_slice(&faded.samples);
    samples.extend(std::iter::repeat(num_complex::Complex64::new(0.0, 0.0)).take(CAPTURE_TAIL));
    BasebandSignal {
        samples,
        start_offset: 0,
    }
}

/// Synthesize one observation at the given SNR and TOA offset.
pub fn synthesize_observation<R: Rng>(
    ctx: &SignalContext,
    case: ChannelCase,
    snr_db: f64,
    tau0_s: f64,
    rng: &mut R,
) -> Result<Observation> {
    let mut realization = draw_realization(&profile(case), tau0_s, rng)?;
    realization.snr_db = snr_db;
    let faded = propagate(&ctx.reference_full, &realization, &ctx.config)?;
    let received = add_awgn(&capture(&faded), snr_db, rng);

    let wide = cross_correlate(&received, &ctx.reference_full, 0, WIDE_SYNC_SPAN, ctx.n_t)?;
    let anchor = coarse_sync(&wide);
    let full = cross_correlate(&received, &ctx.reference_full, anchor, FEATURE_WINDOW, ctx.n_t)?;
    let rbs = ctx
        .reference_rbs
        .iter()
        .map(|rb| cross_correlate(&received, rb, anchor, FEATURE_WINDOW, ctx.n_t))
        .collect::<Result<Vec<_>>>()?;
    let feature_map = build_feature_map(&full, &rbs, FEATURE_WINDOW)?;

    Ok(Observation {
        received,
        realization,
        anchor,
        full,
        rbs,
        feature_map,
        snr_db,
    })
}

/// Synthesize the record for index `i` of a scenario.
pub fn synthesize_record(
    ctx: &SignalContext,
    scenario: &ScenarioConfig,
    index: usize,
) -> Result<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed, index as u64));
    let (lo, hi) = scenario.tau0_range_s;
    let tau0 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let snr_db = scenario.snr_list_db[index % scenario.snr_list_db.len()];
    let obs = synthesize_observation(ctx, scenario.case, snr_db, tau0, &mut rng)?;
    Ok(TrainSample {
        feature_map: obs.feature_map,
        toa_true_ns: (tau0 * 1e9) as f32,
        case: scenario.case,
        snr_db: snr_db as f32,
    })
}

/// Generate all records of a scenario (in index order, regardless of the
/// worker count). Records whose synthesis fails an invariant are dropped
/// with a logged reason.
pub fn gen_records(scenario: &ScenarioConfig) -> Result<Vec<TrainSample>> {
    let ctx = SignalContext::new(scenario.cell_id, scenario.n_subframes)?;
    scenario.validate(&ctx.config)?;
    let results = indexed_map(scenario.n_records, |i| synthesize_record(&ctx, scenario, i));
    let mut records = Vec::with_capacity(scenario.n_records);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => eprintln!("record {i} dropped: {e}"),
        }
    }
    if records.is_empty() {
        return Err(ToaError::Dataset("every record failed synthesis".into()));
    }
    Ok(records)
}

/// Generate a scenario and write it as a dataset file.
pub fn gen_dataset(scenario: &ScenarioConfig, out_path: &Path) -> Result<Dataset> {
    let ds = Dataset::from_records(gen_records(scenario)?)?;
    dataset::write_file(&ds, out_path)?;
    Ok(ds)
}

/// Evaluation settings. Subspace estimators re-synthesize each record's
/// observation (same TOA, case, and SNR; fresh noise seeded by
/// (seed, index)) because dataset files store only the feature maps.
pub struct EvalOptions<'a> {
    pub estimator: EstimatorKind,
    pub params: Option<&'a NetworkParams<f32>>,
    pub cell_id: u32,
    pub n_subframes: usize,
    pub seed: u64,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        EvalOptions {
            estimator: EstimatorKind::Peak,
            params: None,
            cell_id: 0,
            n_subframes: 2,
            seed: 0,
        }
    }
}

/// Rebuild the complex correlation series of one feature-map column
/// (amplitudes are normalized; delay estimates are scale-invariant).
fn series_from_map(map: &FeatureMap, col: usize, n_t: usize) -> CorrelationSeries {
    let values = (0..map.m)
        .map(|m| {
            num_complex::Complex64::from_polar(
                f64::from(map.amplitude(m, col)),
                f64::from(map.phase(m, col)),
            )
        })
        .collect();
    CorrelationSeries {
        values,
        anchor: map.anchor,
        window: map.m,
        search_span: n_t,
    }
}

fn fnv64(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

enum RecordEstimator<'a> {
    FromMap(Box<dyn Fn(&TrainSample) -> Result<ToaEstimate> + Sync + 'a>),
    Resimulate(Box<dyn Fn(&TrainSample, usize) -> Result<ToaEstimate> + Sync + 'a>),
}

/// Run one estimator over every record of a dataset and aggregate RMSE,
/// median error, and the error CDF per (case, SNR) group.
pub fn evaluate(ds: &Dataset, opts: &EvalOptions) -> Result<MetricsReport> {
    let ctx = SignalContext::new(opts.cell_id, opts.n_subframes)?;
    let config = &ctx.config;
    let dict: Option<CorrelationDictionary> = match opts.estimator {
        EstimatorKind::Ls => Some(correlation_dictionary(
            config,
            &ctx.reference_full,
            ls_delay_grid(config),
            FEATURE_WINDOW,
            ctx.n_t,
        )?),
        _ => None,
    };
    let estimator: RecordEstimator = match opts.estimator {
        EstimatorKind::Peak => RecordEstimator::FromMap(Box::new(|rec: &TrainSample| {
            let series = series_from_map(&rec.feature_map, 0, ctx.n_t);
            Ok(toa_peak(&series, config))
        })),
        EstimatorKind::Ls => {
            let dict = dict.as_ref().unwrap();
            RecordEstimator::FromMap(Box::new(move |rec: &TrainSample| {
                let series = series_from_map(&rec.feature_map, 0, ctx.n_t);
                toa_ls(&series, dict, baseline_path_count(rec.case), config)
            }))
        }
        EstimatorKind::Nn => {
            let params = opts.params.ok_or_else(|| {
                ToaError::Argument("nn estimator needs a checkpoint".into())
            })?;
            RecordEstimator::FromMap(Box::new(move |rec: &TrainSample| {
                let rel_ns = neural::predict(params, rec.case, &rec.feature_map)?;
                Ok(ToaEstimate {
                    toa_s: rec.anchor() as f64 * config.sample_period_s + rel_ns * 1e-9,
                    method: EstimatorKind::Nn,
                    diagnostics: None,
                })
            }))
        }
        EstimatorKind::Music | EstimatorKind::Esprit => {
            let kind = opts.estimator;
            let seed = opts.seed;
            let ctx_ref = &ctx;
            RecordEstimator::Resimulate(Box::new(move |rec: &TrainSample, i: usize| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x5eed, i as u64));
                let obs = synthesize_observation(
                    ctx_ref,
                    rec.case,
                    f64::from(rec.snr_db),
                    rec.toa_true_s(),
                    &mut rng,
                )?;
                let cfr = estimate_cfr(&obs.received, &ctx_ref.grid, config, obs.anchor)?;
                let l = baseline_path_count(rec.case);
                match kind {
                    EstimatorKind::Music => toa_music(
                        &cfr,
                        SUBSPACE_SUBARRAY,
                        l,
                        music_delay_grid(config),
                        config,
                        obs.anchor,
                    ),
                    _ => toa_esprit(&cfr, SUBSPACE_SUBARRAY, l, config, obs.anchor),
                }
            }))
        }
    };

    let outcomes: Vec<Result<f64>> = indexed_map(ds.records.len(), |i| {
        let rec = &ds.records[i];
        let est = match &estimator {
            RecordEstimator::FromMap(f) => f(rec)?,
            RecordEstimator::Resimulate(f) => f(rec, i)?,
        };
        Ok((est.toa_s - rec.toa_true_s()).abs() * 1e9)
    });

    let mut groups: std::collections::BTreeMap<(u8, u32), Vec<f64>> = Default::default();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(err_ns) => {
                let rec = &ds.records[i];
                let key = (neural::case_index(rec.case) as u8, rec.snr_db.to_bits());
                groups.entry(key).or_default().push(err_ns);
            }
            Err(e) => eprintln!("record {i} skipped during evaluation: {e}"),
        }
    }
    if groups.is_empty() {
        return Err(ToaError::Dataset("no record could be evaluated".into()));
    }

    let entries = groups
        .into_iter()
        .map(|((case_idx, snr_bits), errors)| {
            entry_from_errors(
                opts.estimator,
                ChannelCase::ALL[case_idx as usize],
                f32::from_bits(snr_bits),
                errors,
            )
        })
        .collect();
    let config_hash = format!(
        "{:016x}",
        fnv64(&format!(
            "{}|{}|{}|{}|{}|{}",
            opts.estimator,
            ds.m,
            ds.n_rb,
            ds.records.len(),
            opts.cell_id,
            opts.n_subframes
        ))
    );
    Ok(MetricsReport {
        metadata: ReportMetadata {
            seed: opts.seed,
            config_hash,
        },
        entries,
    })
}

/// Stage-1 training defaults (joint extractor + heads).
pub fn default_stage1_hyper(seed: u64) -> TrainHyper {
    TrainHyper {
        lr: 2e-2,
        lr_min: 5e-4,
        max_epochs: 200,
        patience: 25,
        seed,
        ..TrainHyper::default()
    }
}

/// Stage-2 training defaults (head-only fine-tuning).
pub fn default_stage2_hyper(seed: u64) -> TrainHyper {
    TrainHyper {
        lr: 1e-3,
        lr_min: 1e-5,
        max_epochs: 150,
        patience: 25,
        seed,
        ..TrainHyper::default()
    }
}

fn check(name: &str, ok: bool) -> Result<()> {
    if ok {
        println!("ok {name}");
        Ok(())
    } else {
        Err(ToaError::Dataset(format!("selftest failed: {name}")))
    }
}

/// Quick invariant suite behind `toa-lab selftest`.
pub fn run_selftest() -> Result<()> {
    let config = build_config("nbiot-1.4MHz")?;
    check(
        "numerology identity",
        (config.subcarrier_spacing_hz * config.fft_size as f64 * config.sample_period_s - 1.0)
            .abs()
            < 1e-12,
    )?;

    let ctx = SignalContext::new(0, 1)?;
    let mut acc = vec![num_complex::Complex64::new(0.0, 0.0); ctx.reference_full.samples.len()];
    for rb in &ctx.reference_rbs {
        for (a, &b) in acc.iter_mut().zip(&rb.samples) {
            *a += b;
        }
    }
    let peak = ctx
        .reference_full
        .samples
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    let max_err = acc
        .iter()
        .zip(&ctx.reference_full.samples)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    check("rb decomposition", max_err <= 1e-12 * peak)?;

    let mut cp_ok = true;
    for s in 0..config.symbols_per_subframe() {
        let start = config.symbol_start(s);
        let cp = config.cp_len(s);
        for i in 0..cp {
            cp_ok &= ctx.reference_full.samples[start + i]
                == ctx.reference_full.samples[start + cp + config.fft_size - cp + i];
        }
    }
    check("cyclic prefix structure", cp_ok)?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mean: f64 = (0..1000)
        .map(|_| {
            draw_realization(&profile(ChannelCase::Eva5), 0.0, &mut rng)
                .unwrap()
                .gains
                .iter()
                .map(|g| g.norm_sqr())
                .sum::<f64>()
        })
        .sum::<f64>()
        / 1000.0;
    check("fading gain normalization", (mean - 1.0).abs() < 0.1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = synthesize_observation(
        &ctx,
        ChannelCase::Epa5,
        10.0,
        2.4 * config.sample_period_s,
        &mut rng,
    )?;
    let mut sum = vec![num_complex::Complex64::new(0.0, 0.0); FEATURE_WINDOW];
    for rb in &obs.rbs {
        for (s, &v) in sum.iter_mut().zip(&rb.values) {
            *s += v;
        }
    }
    let scale = obs.full.values.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let rb_err = sum
        .iter()
        .zip(&obs.full.values)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    check("rb-sum identity", rb_err <= 1e-9 * scale)?;

    let map = &obs.feature_map;
    let mut ranges_ok = true;
    let mut col0_max = 0.0f32;
    for m in 0..map.m {
        for col in 0..map.n_cols() {
            let amp = map.amplitude(m, col);
            ranges_ok &= (0.0..=1.0).contains(&amp)
                && map.phase(m, col).abs() <= std::f32::consts::PI;
            if col == 0 {
                col0_max = col0_max.max(amp);
            }
        }
    }
    check("feature map ranges", ranges_ok && col0_max == 1.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let obs = synthesize_observation(
        &ctx,
        ChannelCase::Static,
        f64::INFINITY,
        5.0 * config.sample_period_s,
        &mut rng,
    )?;
    let est = toa_peak(&obs.full, &config);
    check(
        "integer-delay peak detection",
        est.toa_s == 5.0 * config.sample_period_s,
    )?;

    let tau = 0.43 * config.sample_period_s;
    let cfr_values: Vec<num_complex::Complex64> = (0..config.n_subcarriers)
        .map(|k| {
            num_complex::Complex64::from_polar(
                1.0,
                -2.0 * std::f64::consts::PI * k as f64 * config.subcarrier_spacing_hz * tau,
            )
        })
        .collect();
    let cfr = crate::classical::Cfr {
        values: cfr_values,
        mask: vec![true; config.n_subcarriers],
    };
    let est = toa_esprit(&cfr, SUBSPACE_SUBARRAY, 1, &config, 0)?;
    check("subspace fractional delay", (est.toa_s - tau).abs() <= 1e-9)?;

    let params = neural::init_network::<f32>(FEATURE_WINDOW, config.n_rb, 11)?;
    let digest = params.extractor_digest();
    let sample = TrainSample {
        feature_map: obs.feature_map.clone(),
        toa_true_ns: 2604.0,
        case: ChannelCase::Static,
        snr_db: 10.0,
    };
    let hyper = TrainHyper {
        max_epochs: 2,
        ..TrainHyper::default()
    };
    let stage2 = neural::train_stage2(
        &params,
        ChannelCase::Static,
        &vec![sample.clone(); 8],
        config.sample_period_s,
        &hyper,
        None,
    )?;
    check("extractor freeze", stage2.params.extractor_digest() == digest)?;

    let tmp = std::env::temp_dir().join(format!("toa-lab-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&tmp)?;
    let ds = Dataset::from_records(vec![sample.clone(); 3])?;
    let ds_path = tmp.join("selftest.toad");
    dataset::write_file(&ds, &ds_path)?;
    let ds_back = dataset::read_file(&ds_path)?;
    let ckpt_path = tmp.join("selftest.toap");
    checkpoint::write_file(&params, &ckpt_path)?;
    let ckpt_back = checkpoint::read_file(&ckpt_path)?;
    let roundtrip_ok = dataset::encode(&ds_back) == dataset::encode(&ds)
        && checkpoint::encode(&ckpt_back) == checkpoint::encode(&params);
    std::fs::remove_dir_all(&tmp).ok();
    check("file format round-trips", roundtrip_ok)?;

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scenario(case: ChannelCase, n: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig::new(case, vec![0.0, 10.0], n, seed)
    }

    #[test]
    fn generation_is_deterministic_bytewise() {
        let scenario = small_scenario(ChannelCase::Epa5, 12, 7);
        let a = dataset::encode(&Dataset::from_records(gen_records(&scenario).unwrap()).unwrap());
        let b = dataset::encode(&Dataset::from_records(gen_records(&scenario).unwrap()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn record_count_matches_request() {
        let scenario = small_scenario(ChannelCase::Static, 10, 3);
        let records = gen_records(&scenario).unwrap();
        assert_eq!(records.len(), 10);
        let ds = Dataset::from_records(records).unwrap();
        let bytes = dataset::encode(&ds);
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert_eq!(count, 10);
    }

    #[test]
    fn noiseless_static_peak_errors_stay_subsample() {
        let mut scenario = small_scenario(ChannelCase::Static, 40, 5);
        scenario.snr_list_db = vec![f64::INFINITY];
        let records = gen_records(&scenario).unwrap();
        let config = build_config("nbiot-1.4MHz").unwrap();
        let ctx = SignalContext::new(0, 2).unwrap();
        for rec in &records {
            let series = series_from_map(&rec.feature_map, 0, ctx.n_t);
            let est = toa_peak(&series, &config);
            let err = (est.toa_s - rec.toa_true_s()).abs();
            assert!(
                err < config.sample_period_s,
                "peak error {} ns",
                err * 1e9
            );
        }
    }

    #[test]
    fn tau_offsets_span_the_configured_range() {
        let scenario = small_scenario(ChannelCase::Static, 200, 11);
        let records = gen_records(&scenario).unwrap();
        let t_s = 1.0 / 1.92e6;
        let min = records.iter().map(|r| r.toa_true_s()).fold(f64::MAX, f64::min);
        let max = records.iter().map(|r| r.toa_true_s()).fold(0.0, f64::max);
        assert!(min >= 0.0 && max <= 10.0 * t_s);
        assert!(max - min > 5.0 * t_s, "offsets poorly spread: {min}..{max}");
    }

    #[test]
    fn metric_math_on_oracle_errors() {
        // a perfect estimator has zero RMSE, a constant offset shows up
        // verbatim in both RMSE and median
        for (offset_ns, expect) in [(0.0, 0.0), (100.0, 100.0)] {
            let errors: Vec<f64> = vec![offset_ns; 9];
            let entry = entry_from_errors(EstimatorKind::Peak, ChannelCase::Epa5, 0.0, errors);
            assert!((entry.rmse_ns - expect).abs() < 1e-9, "rmse {}", entry.rmse_ns);
            assert!((entry.median_abs_ns - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluate_peak_runs_and_groups_by_snr() {
        let scenario = small_scenario(ChannelCase::Static, 12, 17);
        let ds = Dataset::from_records(gen_records(&scenario).unwrap()).unwrap();
        let report = evaluate(&ds, &EvalOptions::default()).unwrap();
        assert_eq!(report.entries.len(), 2, "two SNR groups expected");
        for e in &report.entries {
            assert_eq!(e.count, 6);
            assert!(e.rmse_ns >= 0.0);
            for w in e.cdf_ns.windows(2) {
                assert!(w[1] >= w[0]);
            }
            // Jensen: RMSE^2 >= mean^2
            let mean = e.cdf_ns.iter().sum::<f64>() / e.count as f64;
            assert!(e.rmse_ns * e.rmse_ns >= mean * mean - 1e-9);
        }
    }

    #[test]
    fn evaluate_nn_without_checkpoint_is_an_error() {
        let scenario = small_scenario(ChannelCase::Static, 3, 19);
        let ds = Dataset::from_records(gen_records(&scenario).unwrap()).unwrap();
        let opts = EvalOptions {
            estimator: EstimatorKind::Nn,
            ..EvalOptions::default()
        };
        assert!(matches!(evaluate(&ds, &opts), Err(ToaError::Argument(_))));
    }

    #[test]
    fn subspace_evaluation_beats_peak_on_noiseless_static() {
        let mut scenario = small_scenario(ChannelCase::Static, 16, 23);
        scenario.snr_list_db = vec![f64::INFINITY];
        let ds = Dataset::from_records(gen_records(&scenario).unwrap()).unwrap();
        let peak = evaluate(&ds, &EvalOptions::default()).unwrap();
        let esprit = evaluate(
            &ds,
            &EvalOptions {
                estimator: EstimatorKind::Esprit,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert!(esprit.entries[0].rmse_ns < peak.entries[0].rmse_ns / 10.0,
            "esprit {} ns vs peak {} ns", esprit.entries[0].rmse_ns, peak.entries[0].rmse_ns);
    }

    #[test]
    fn selftest_suite_passes() {
        run_selftest().unwrap();
    }
}
