use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use erwin_core::balltree::BallTree;
use erwin_core::geometry::{generate, load_csv, SyntheticKind, SyntheticSpec};
use erwin_core::model::{Erwin, ErwinConfig};
use erwin_harness::bench::{self, BenchOptions, CostMode, ErwinWorkload};
use erwin_harness::gradsuite::{self, END_TO_END_TOLERANCE, OP_TOLERANCE};
use erwin_harness::probe::{self, Probe};
use erwin_harness::train::{self, Task, TrainOptions};
use erwin_harness::{presets, HarnessError, Result};

#[derive(Parser)]
#[command(
    name = "erwin",
    version,
    about = "Ball-tree transformer benchmarks, probes and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Random seed for data, parameters and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Model configuration (TOML); replaces the command's built-in preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write the command's table as CSV to this path ("-" for stdout).
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Worker threads for batch processing.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Build a ball tree and summarise its levels.
    Build(BuildArgs),
    /// Forward-pass scaling over batches of clouds with a power-law fit.
    BenchScaling(BenchArgs),
    /// Tree-construction cost and its share of build + forward.
    BenchTree(BenchArgs),
    /// Receptive field of one output point.
    ProbeRf(ProbeArgs),
    /// Train on a synthetic task and emit the loss curve.
    Train(TrainArgs),
    /// Finite-difference checks of every operation and of the whole model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Point cloud CSV (first `dim` columns are coordinates); "-" reads stdin.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Synthetic generator used when no input is given.
    #[arg(long, default_value = "uniform-box")]
    kind: SyntheticKind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    dim: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated ascending sizes.
    #[arg(long, value_delimiter = ',', default_values_t = bench::doubling_sizes(10, 16))]
    sizes: Vec<usize>,
    /// Report deterministic operation counts instead of milliseconds.
    #[arg(long)]
    abstract_cost: bool,
    #[arg(long, default_value_t = bench::DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = bench::DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUPS)]
    warmups: usize,
    /// Also measure a backward pass.
    #[arg(long)]
    backward: bool,
    #[arg(long, default_value = "uniform-box")]
    kind: SyntheticKind,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeModel {
    /// One plain ball-attention block.
    Attention,
    /// Six message-passing steps on the 16-NN graph.
    Mpnn,
    /// Full encoder/decoder reaching a single root ball.
    Full,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, value_enum, default_value = "full")]
    model: ProbeModel,
    #[arg(long, default_value_t = 800)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// Also compute the field by bumping every input (one forward per entry).
    #[arg(long)]
    perturb: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "density-regression")]
    task: Task,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Learning rate (default depends on the task).
    #[arg(long)]
    lr: Option<f64>,
    /// Points (or samples) in the training set.
    #[arg(long, default_value_t = 256)]
    n: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Points in the end-to-end cloud.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Parameter entries sampled for the end-to-end check.
    #[arg(long, default_value_t = 20)]
    samples: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Returns `Ok(false)` when a check ran but did not pass.
fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    if c.threads == 0 {
        return Err(HarnessError::Validation("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Build(a) => build(c, a).map(|_| true),
        Command::BenchScaling(a) => bench_scaling(c, a).map(|_| true),
        Command::BenchTree(a) => bench_tree(c, a).map(|_| true),
        Command::ProbeRf(a) => probe_rf(c, a).map(|_| true),
        Command::Train(a) => train_cmd(c, a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(c, a),
    }
}

fn config_or(c: &Common, preset: &str) -> Result<ErwinConfig> {
    match &c.config {
        Some(p) => Ok(ErwinConfig::load(p)?),
        None => presets::load(preset),
    }
}

fn csv_sink(path: &Path) -> Result<Box<dyn Write>> {
    Ok(if path == Path::new("-") {
        Box::new(io::stdout().lock())
    } else {
        Box::new(BufWriter::new(File::create(path)?))
    })
}

fn build(c: &Common, a: &BuildArgs) -> Result<()> {
    let cloud = match &a.input {
        Some(p) => load_csv(p, a.dim)?,
        None => generate(&SyntheticSpec::new(a.kind, a.n, a.dim, c.seed))?,
    };
    let tree = BallTree::from_cloud(&cloud)?;
    println!(
        "{} points in {}D: depth {}, {} slots ({} virtual), {} node visits",
        tree.num_real(),
        tree.dim(),
        tree.depth(),
        tree.num_slots(),
        tree.num_slots() - tree.num_real(),
        tree.build_visits()
    );
    println!(
        "{:>5} {:>8} {:>10} {:>12} {:>12}",
        "level", "balls", "ball_size", "max_radius", "mean_radius"
    );
    for i in 0..=tree.depth() {
        let v = tree.level_view(i)?;
        let max = v.radii.iter().copied().fold(0.0, f64::max);
        let mean = v.radii.iter().sum::<f64>() / v.ball_count as f64;
        println!(
            "{:>5} {:>8} {:>10} {:>12.6} {:>12.6}",
            i, v.ball_count, v.ball_size, max, mean
        );
    }
    if let Some(path) = &c.csv {
        let mut w = csv_sink(path)?;
        let centers: Vec<String> = (0..tree.dim()).map(|k| format!("center_{k}")).collect();
        writeln!(w, "level,ball,slot_start,slot_end,count,radius,{}", centers.join(","))?;
        for i in 0..=tree.depth() {
            let v = tree.level_view(i)?;
            for b in 0..v.ball_count {
                let r = v.slot_range(b);
                let cs: Vec<String> = v.center(b).iter().map(f64::to_string).collect();
                writeln!(
                    w,
                    "{i},{b},{},{},{},{},{}",
                    r.start,
                    r.end,
                    v.counts[b],
                    v.radii[b],
                    cs.join(",")
                )?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn workload(c: &Common, a: &BenchArgs) -> Result<(ErwinWorkload, BenchOptions)> {
    let model = Erwin::new(config_or(c, presets::BENCH)?, c.seed)?;
    let mode = if a.abstract_cost {
        CostMode::Abstract
    } else {
        CostMode::WallClock
    };
    let w = ErwinWorkload::new(model, a.kind, a.batch, &[mode], c.threads)?.with_backward(a.backward);
    let mut opts = BenchOptions::new(a.sizes.clone(), c.seed);
    opts.repeats = a.repeats;
    opts.warmups = a.warmups;
    Ok((w, opts))
}

fn print_records(records: &[bench::BenchRecord]) {
    println!(
        "{:>8} {:>6} {:>8} {:>16} {:>16} {:>16} {:>8}",
        "n", "batch", "unit", "build", "forward", "backward", "share"
    );
    for r in records {
        let bwd = r.backward.map(|b| format!("{b:.3}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>8} {:>6} {:>8} {:>16.3} {:>16.3} {:>16} {:>7.2}%",
            r.n,
            r.batch,
            r.mode.unit(),
            r.build,
            r.forward,
            bwd,
            100.0 * r.build_share()
        );
    }
}

fn bench_scaling(c: &Common, a: &BenchArgs) -> Result<()> {
    let (mut w, opts) = workload(c, a)?;
    eprintln!("threads: {}", c.threads);
    let report = bench::bench_scaling(&mut w, &opts)?;
    print_records(&report.records);
    for (mode, fit) in &report.fits {
        if let Some(f) = fit {
            println!(
                "{mode} fit over {} sizes ≥ {}: runtime = {:.6e} · n^{:.4}  (R² = {:.4})",
                f.points,
                erwin_harness::fit::MIN_FIT_SIZE,
                f.c,
                f.beta,
                f.r2
            );
        }
    }
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    if let Some(path) = &c.csv {
        let mut sink = csv_sink(path)?;
        bench::write_csv(&report.records, &mut sink)?;
        sink.flush()?;
    }
    Ok(())
}

fn bench_tree(c: &Common, a: &BenchArgs) -> Result<()> {
    let (mut w, opts) = workload(c, a)?;
    eprintln!("threads: {}", c.threads);
    let records = bench::bench_treebuild(&mut w, &opts)?;
    print_records(&records);
    if let Some(path) = &c.csv {
        let mut sink = csv_sink(path)?;
        bench::write_csv(&records, &mut sink)?;
        sink.flush()?;
    }
    Ok(())
}

fn probe_rf(c: &Common, a: &ProbeArgs) -> Result<()> {
    let preset = match a.model {
        ProbeModel::Attention => presets::PROBE_ATTENTION,
        ProbeModel::Mpnn => presets::PROBE_MPNN,
        ProbeModel::Full => presets::PROBE_FULL,
    };
    let config = config_or(c, preset)?;
    let model = Erwin::new(config.clone(), c.seed)?;
    let cloud = probe::probe_cloud(&config, a.n, c.seed)?;
    let p = Probe::new(&model, &cloud.view())?;
    let mag = p.gradient_magnitudes(a.target)?;
    let field: Vec<bool> = mag.iter().map(|m| *m > probe::GRADIENT_THRESHOLD).collect();
    println!(
        "receptive field of point {}: {} of {} points (gradient threshold {:e})",
        a.target,
        probe::count(&field),
        a.n,
        probe::GRADIENT_THRESHOLD
    );
    let perturbed = if a.perturb {
        let f = p.perturbation_field(a.target)?;
        println!(
            "perturbation field: {} points, {} with the gradient field",
            probe::count(&f),
            if f == field { "identical" } else { "different from" }
        );
        Some(f)
    } else {
        None
    };
    if let Some(path) = &c.csv {
        let mut w = csv_sink(path)?;
        let coords: Vec<String> = (0..config.dim).map(|k| format!("x{k}")).collect();
        write!(w, "index,{},gradient,in_field", coords.join(","))?;
        writeln!(
            w,
            "{}",
            if perturbed.is_some() {
                ",in_perturbation_field"
            } else {
                ""
            }
        )?;
        for i in 0..a.n {
            let xs: Vec<String> = cloud.point(i).iter().map(f64::to_string).collect();
            write!(w, "{i},{},{},{}", xs.join(","), mag[i], u8::from(field[i]))?;
            match &perturbed {
                Some(f) => writeln!(w, ",{}", u8::from(f[i]))?,
                None => writeln!(w)?,
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn train_cmd(c: &Common, a: &TrainArgs) -> Result<()> {
    let config = config_or(c, presets::TRAIN)?;
    let mut opts = TrainOptions::new(a.task, a.steps, c.seed);
    opts.n = a.n;
    if let Some(lr) = a.lr {
        opts.lr = lr;
    }
    let report = train::train_synthetic(a.task, &config, &opts)?;
    println!(
        "{}: {} steps, loss {:.6} → {:.6} (ratio {:.4})",
        a.task,
        a.steps,
        report.initial(),
        report.final_loss(),
        report.ratio()
    );
    if let (Some(o), Some(r)) = (report.optimum, report.optimum_ratio()) {
        println!("least-squares optimum {o:.6}; final / optimum = {r:.4}");
    }
    if let Some(path) = &c.csv {
        let mut w = csv_sink(path)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn gradcheck(c: &Common, a: &GradcheckArgs) -> Result<bool> {
    let mut ok = true;
    let checks = gradsuite::op_suite()?;
    let mut rows = Vec::new();
    for chk in &checks {
        let pass = chk.report.passes(OP_TOLERANCE);
        ok &= pass;
        println!(
            "{:<20} rel {:.3e}  abs {:.3e}  ({} coords)  {}",
            chk.name,
            chk.report.max_rel_error,
            chk.report.max_abs_error,
            chk.report.checked,
            if pass { "ok" } else { "FAIL" }
        );
        rows.push((chk.name.to_string(), chk.report.clone(), OP_TOLERANCE));
    }
    let config = config_or(c, gradsuite::END_TO_END_CONFIG)?;
    let e2e = gradsuite::end_to_end(&config, a.n, a.samples, c.seed)?;
    let pass = e2e.passes(END_TO_END_TOLERANCE);
    ok &= pass;
    println!(
        "{:<20} rel {:.3e}  abs {:.3e}  ({} coords)  {}",
        "end-to-end",
        e2e.max_rel_error,
        e2e.max_abs_error,
        e2e.checked,
        if pass { "ok" } else { "FAIL" }
    );
    rows.push(("end-to-end".into(), e2e, END_TO_END_TOLERANCE));
    if let Some(path) = &c.csv {
        let mut w = csv_sink(path)?;
        writeln!(w, "check,max_rel_error,max_abs_error,coords,tolerance,pass")?;
        for (name, r, tol) in rows {
            writeln!(
                w,
                "{name},{},{},{},{tol},{}",
                r.max_rel_error,
                r.max_abs_error,
                r.checked,
                u8::from(r.passes(tol))
            )?;
        }
        w.flush()?;
    }
    Ok(ok)
}
