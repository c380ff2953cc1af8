//! Runtime benchmarks: tree construction, forward and backward passes over
//! batches of synthetic clouds, in wall-clock or abstract-cost units.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use erwin_core::geometry::{generate, PointCloud, SyntheticKind, SyntheticSpec};
use erwin_core::model::{Erwin, ForwardOptions, Prepared};
use erwin_core::numerics::Tape;
use rayon::prelude::*;

use crate::error::{HarnessError, Result};
use crate::fit::{fit_power_law, PowerLawFit, MIN_FIT_POINTS, MIN_FIT_SIZE};

pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_REPEATS: usize = 5;
pub const DEFAULT_WARMUPS: usize = 3;
pub const MIN_REPEATS: usize = 5;

/// What a benchmark measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostMode {
    /// Elapsed time in milliseconds.
    WallClock,
    /// Deterministic operation counts: tree-construction node visits for the
    /// build phase, kNN distance evaluations plus tape flops for the forward
    /// phase, swept tape flops for the backward phase.
    Abstract,
}

impl CostMode {
    pub fn unit(self) -> &'static str {
        match self {
            CostMode::WallClock => "ms",
            CostMode::Abstract => "ops",
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMode::WallClock => "wall-clock",
            CostMode::Abstract => "abstract",
        })
    }
}

/// Cost of one batch, split by phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseCost {
    pub build: f64,
    pub forward: f64,
    pub backward: Option<f64>,
}

/// Something that can be measured at a given problem size.
pub trait Workload {
    /// Runs one batch at size `n` and reports its cost in every mode of
    /// [`Workload::modes`], in that order. `seed` selects the batch
    /// contents; warmups and repeats reuse the same seed.
    fn run(&mut self, n: usize, seed: u64) -> Result<Vec<PhaseCost>>;

    fn modes(&self) -> Vec<CostMode>;

    /// Clouds per batch.
    fn batch(&self) -> usize;

    /// Worker threads the workload runs on.
    fn threads(&self) -> usize {
        1
    }
}

/// Median cost of one size.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub n: usize,
    pub batch: usize,
    pub repeats: usize,
    pub threads: usize,
    pub mode: CostMode,
    pub seed: u64,
    pub build: f64,
    pub forward: f64,
    pub backward: Option<f64>,
}

impl BenchRecord {
    /// `build / (build + forward)`.
    pub fn build_share(&self) -> f64 {
        let total = self.build + self.forward;
        if total > 0.0 {
            self.build / total
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl BenchOptions {
    pub fn new(sizes: Vec<usize>, seed: u64) -> Self {
        BenchOptions {
            sizes,
            repeats: DEFAULT_REPEATS,
            warmups: DEFAULT_WARMUPS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(HarnessError::Validation("no sizes given".into()));
        }
        if self.sizes.contains(&0) {
            return Err(HarnessError::Validation("sizes must be positive".into()));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Validation("sizes must be strictly ascending".into()));
        }
        if self.repeats < MIN_REPEATS {
            return Err(HarnessError::Validation(format!(
                "at least {MIN_REPEATS} repeats are required, got {}",
                self.repeats
            )));
        }
        Ok(())
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Runs `warmups` discarded batches and `repeats` measured batches per size
/// and reports per-phase medians: one record per size and mode, grouped by
/// mode in the order of [`Workload::modes`].
pub fn run_bench<W: Workload + ?Sized>(w: &mut W, opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    opts.validate()?;
    let modes = w.modes();
    let mut per_mode: Vec<Vec<BenchRecord>> = vec![Vec::with_capacity(opts.sizes.len()); modes.len()];
    for &n in &opts.sizes {
        for _ in 0..opts.warmups {
            w.run(n, opts.seed)?;
        }
        let mut samples: Vec<Vec<PhaseCost>> = vec![Vec::with_capacity(opts.repeats); modes.len()];
        for _ in 0..opts.repeats {
            let costs = w.run(n, opts.seed)?;
            if costs.len() != modes.len() {
                return Err(HarnessError::Validation(format!(
                    "workload reported {} costs for {} modes",
                    costs.len(),
                    modes.len()
                )));
            }
            for (acc, c) in samples.iter_mut().zip(costs) {
                acc.push(c);
            }
        }
        for ((mode, runs), out) in modes.iter().zip(&samples).zip(&mut per_mode) {
            let mut build: Vec<f64> = runs.iter().map(|c| c.build).collect();
            let mut forward: Vec<f64> = runs.iter().map(|c| c.forward).collect();
            let mut backward: Vec<f64> = runs.iter().filter_map(|c| c.backward).collect();
            out.push(BenchRecord {
                n,
                batch: w.batch(),
                repeats: opts.repeats,
                threads: w.threads(),
                mode: *mode,
                seed: opts.seed,
                build: median(&mut build),
                forward: median(&mut forward),
                backward: (!backward.is_empty()).then(|| median(&mut backward)),
            });
        }
    }
    Ok(per_mode.into_iter().flatten().collect())
}

#[derive(Clone, Debug)]
pub struct ScalingReport {
    pub records: Vec<BenchRecord>,
    /// Fit of the forward cost against `n`, per mode.
    pub fits: Vec<(CostMode, Option<PowerLawFit>)>,
    pub warnings: Vec<String>,
}

impl ScalingReport {
    pub fn fit(&self, mode: CostMode) -> Option<PowerLawFit> {
        self.fits.iter().find(|(m, _)| *m == mode).and_then(|(_, f)| *f)
    }

    pub fn records(&self, mode: CostMode) -> impl Iterator<Item = &BenchRecord> {
        self.records.iter().filter(move |r| r.mode == mode)
    }
}

/// Benchmarks every size and fits the forward cost to a power law.
pub fn bench_scaling<W: Workload + ?Sized>(w: &mut W, opts: &BenchOptions) -> Result<ScalingReport> {
    let records = run_bench(w, opts)?;
    let mut fits = Vec::new();
    let mut warnings = Vec::new();
    for mode in w.modes() {
        let samples: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.n, r.forward))
            .collect();
        let fit = fit_power_law(&samples);
        if fit.is_none() {
            warnings.push(format!(
                "{mode} power-law fit skipped: it needs at least {MIN_FIT_POINTS} distinct sizes n ≥ {MIN_FIT_SIZE}"
            ));
        }
        fits.push((mode, fit));
    }
    Ok(ScalingReport {
        records,
        fits,
        warnings,
    })
}

/// Build-only benchmark; forward cost is still measured for the share.
pub fn bench_treebuild<W: Workload + ?Sized>(w: &mut W, opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    run_bench(w, opts)
}

pub const CSV_HEADER: &str = "n,batch,repeats,threads,mode,unit,seed,build,forward,backward,build_share";

/// Writes records as CSV. Values are printed with Rust's shortest
/// round-trip formatting, so abstract-mode output is byte-stable.
pub fn write_csv<W: Write>(records: &[BenchRecord], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.n,
            r.batch,
            r.repeats,
            r.threads,
            r.mode,
            r.mode.unit(),
            r.seed,
            r.build,
            r.forward,
            r.backward.map(|b| b.to_string()).unwrap_or_default(),
            r.build_share()
        )?;
    }
    Ok(())
}

/// Cost given by a closed-form function of `n`, for testing the harness.
pub struct SyntheticWorkload<F: FnMut(usize) -> PhaseCost> {
    pub cost: F,
    pub mode: CostMode,
}

impl<F: FnMut(usize) -> PhaseCost> Workload for SyntheticWorkload<F> {
    fn run(&mut self, n: usize, _seed: u64) -> Result<Vec<PhaseCost>> {
        Ok(vec![(self.cost)(n)])
    }

    fn modes(&self) -> Vec<CostMode> {
        vec![self.mode]
    }

    fn batch(&self) -> usize {
        1
    }
}

/// The network on batches of synthetic clouds.
pub struct ErwinWorkload {
    model: Erwin,
    kind: SyntheticKind,
    batch: usize,
    modes: Vec<CostMode>,
    backward: bool,
    pool: rayon::ThreadPool,
    threads: usize,
    cache: Option<(usize, u64, Vec<PointCloud>)>,
}

impl ErwinWorkload {
    /// Every execution is both timed and counted; `modes` selects what is
    /// reported.
    pub fn new(model: Erwin, kind: SyntheticKind, batch: usize, modes: &[CostMode], threads: usize) -> Result<Self> {
        if modes.is_empty() {
            return Err(HarnessError::Validation("no cost mode selected".into()));
        }
        if batch == 0 {
            return Err(HarnessError::Validation("batch must be positive".into()));
        }
        if threads == 0 {
            return Err(HarnessError::Validation("threads must be positive".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| HarnessError::Validation(format!("thread pool: {e}")))?;
        Ok(ErwinWorkload {
            model,
            kind,
            batch,
            modes: modes.to_vec(),
            backward: false,
            pool,
            threads,
            cache: None,
        })
    }

    /// Also measure a backward pass of the mean output.
    pub fn with_backward(mut self, on: bool) -> Self {
        self.backward = on;
        self
    }

    fn clouds(&mut self, n: usize, seed: u64) -> Result<&[PointCloud]> {
        let fresh = !matches!(&self.cache, Some((cn, cs, _)) if *cn == n && *cs == seed);
        if fresh {
            let dim = self.model.config.dim;
            let clouds = (0..self.batch as u64)
                .map(|i| {
                    generate(&SyntheticSpec::new(
                        self.kind,
                        n,
                        dim,
                        seed.wrapping_mul(1_000_003).wrapping_add(i),
                    ))
                })
                .collect::<erwin_core::Result<Vec<_>>>()?;
            self.cache = Some((n, seed, clouds));
        }
        Ok(&self.cache.as_ref().expect("filled above").2)
    }
}

/// Forward (and optionally backward) of one cloud in single precision,
/// returning `(forward ops, backward ops)`.
fn pass(model: &Erwin, cloud: &PointCloud, prep: &Prepared, backward: bool) -> erwin_core::Result<(u64, u64)> {
    let nbhd = model.neighborhood(prep)?;
    let tape = Tape::<f32>::new();
    let b = model.params.bind(&tape);
    let input = tape.constant(model.input_tensor(&cloud.view())?);
    let out = model.forward(&b, prep, &nbhd, &input, ForwardOptions::default())?;
    let fwd = nbhd.evaluations + tape.flops();
    if backward {
        let loss = out.out.mean()?;
        tape.backward(loss)?;
    }
    Ok((fwd, tape.backward_flops()))
}

impl Workload for ErwinWorkload {
    fn run(&mut self, n: usize, seed: u64) -> Result<Vec<PhaseCost>> {
        self.clouds(n, seed)?;
        let clouds = &self.cache.as_ref().expect("generated").2;
        let model = &self.model;
        let backward = self.backward;
        let modes = &self.modes;
        self.pool.install(|| -> Result<Vec<PhaseCost>> {
            let t0 = Instant::now();
            let preps = clouds
                .par_iter()
                .map(|c| model.prepare(&c.view()))
                .collect::<erwin_core::Result<Vec<_>>>()?;
            let build_ms = t0.elapsed().as_secs_f64() * 1e3;
            let build_ops: u64 = preps.iter().map(|p| p.build_visits).sum();

            let t1 = Instant::now();
            let fwd = clouds
                .par_iter()
                .zip(&preps)
                .map(|(c, p)| pass(model, c, p, false))
                .collect::<erwin_core::Result<Vec<_>>>()?;
            let forward_ms = t1.elapsed().as_secs_f64() * 1e3;
            let forward_ops: u64 = fwd.iter().map(|f| f.0).sum();

            let (mut backward_ms, mut backward_ops) = (None, None);
            if backward {
                // forward + backward, minus the forward-only loop above
                let t2 = Instant::now();
                let both = clouds
                    .par_iter()
                    .zip(&preps)
                    .map(|(c, p)| pass(model, c, p, true))
                    .collect::<erwin_core::Result<Vec<_>>>()?;
                backward_ms = Some((t2.elapsed().as_secs_f64() * 1e3 - forward_ms).max(0.0));
                backward_ops = Some(both.iter().map(|f| f.1).sum::<u64>() as f64);
            }
            Ok(modes
                .iter()
                .map(|m| match m {
                    CostMode::WallClock => PhaseCost {
                        build: build_ms,
                        forward: forward_ms,
                        backward: backward_ms,
                    },
                    CostMode::Abstract => PhaseCost {
                        build: build_ops as f64,
                        forward: forward_ops as f64,
                        backward: backward_ops,
                    },
                })
                .collect())
        })
    }

    fn modes(&self) -> Vec<CostMode> {
        self.modes.clone()
    }

    fn batch(&self) -> usize {
        self.batch
    }

    fn threads(&self) -> usize {
        self.threads
    }
}

/// Standard doubling sizes `2^lo ..= 2^hi`.
pub fn doubling_sizes(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|e| 1usize << e).collect()
}
