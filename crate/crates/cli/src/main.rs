//! `kvtier` command-line front end.
//!
//! Settings resolve as flags > config file > built-in defaults; the resolved
//! values and where each came from are printed to stderr at startup.
//! Exit status: 0 ok, 1 configuration error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use kvtier::experiment::{
    build_figures, execute, execute_all, load_spec, plan, runs_dir, write_run, ConfigFile, ExperimentError,
    ExperimentSpec, Figure, PlannedRun, WorkloadSource,
};
use kvtier::model::builtin_profile;
use kvtier::policy::PolicyKind;
use kvtier::rope::{verify, DEFAULT_THETA_BASE};
use kvtier::sim::Mode;
use kvtier::trace::trace_stats;
use kvtier::units::ByteSize;

#[derive(Parser)]
#[command(name = "kvtier", version, about = "Tiered KV-cache simulator for multi-turn LLM serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write its artifacts.
    Run {
        #[command(flatten)]
        opts: Overrides,
        /// Run directory name under `<out>/runs/`.
        #[arg(long)]
        label: Option<String>,
        /// Also write the raw event stream.
        #[arg(long)]
        events: bool,
    },
    /// Run figure recipes or a capacity sweep (in parallel).
    Sweep {
        #[command(flatten)]
        opts: Overrides,
        /// Comma-separated capacity / per-unit-time-capacity ratios.
        #[arg(long, value_delimiter = ',')]
        capacity_ratio: Vec<f64>,
        /// Comma-separated figures (fig13, fig17, fig19, fig21, fig22) or `all`.
        #[arg(long, value_delimiter = ',')]
        recipe: Vec<String>,
    },
    /// Assemble figure CSVs from completed runs.
    Figures {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Allow runs derived from different base specs in one bundle.
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Print workload statistics.
    Stats {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        json: bool,
    },
    /// Check the rotary-attention kernel against its oracle.
    RopeVerify {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Default)]
struct Overrides {
    /// TOML config file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A resolved spec snapshot (`spec.toml` from a previous run).
    #[arg(long, conflicts_with = "config")]
    spec: Option<PathBuf>,
    /// llama-13b, llama-65b, llama-70b, falcon-40b or mistral-7b.
    #[arg(long)]
    profile: Option<String>,
    /// JSON-lines trace; `.gz` is decompressed.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Seeds workload generation and synthesized arrivals.
    #[arg(long)]
    seed: Option<u64>,
    /// re, as, hbm, hbm-dram, nkvt or of.
    #[arg(long)]
    mode: Option<String>,
    /// scheduler-aware, lru or fifo.
    #[arg(long)]
    policy: Option<String>,
    /// Host-memory tier, e.g. `128GB`.
    #[arg(long)]
    dram: Option<ByteSize>,
    /// Disk tier, e.g. `10TB`.
    #[arg(long)]
    disk: Option<ByteSize>,
    /// HBM read buffer for pre-loading.
    #[arg(long)]
    read_buffer: Option<ByteSize>,
    /// HBM write buffer for asynchronous saving.
    #[arg(long)]
    write_buffer: Option<ByteSize>,
    /// Seconds since last access before an item expires.
    #[arg(long)]
    ttl: Option<f64>,
    /// Output directory (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

#[derive(Clone, Copy)]
enum Source {
    Default,
    File,
    Flag,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "config",
            Source::Flag => "flag",
        }
    }
}

fn pick<T>(flag: &Option<T>, in_file: bool) -> Source {
    if flag.is_some() {
        Source::Flag
    } else if in_file {
        Source::File
    } else {
        Source::Default
    }
}

impl Overrides {
    /// Resolves the spec and prints the provenance table.
    fn resolve(&self) -> Result<ExperimentSpec, Failure> {
        let (mut spec, file) = match (&self.spec, &self.config) {
            (Some(p), _) => (load_spec(p)?, None),
            (None, Some(p)) => {
                let c = ConfigFile::load(p)?;
                (c.resolve()?, Some(c))
            }
            (None, None) => (ConfigFile::default().resolve()?, None),
        };
        let snapshot = self.spec.is_some();
        let f = file.unwrap_or_default();
        let from_file = |set: bool| set || snapshot;

        if let Some(name) = &self.profile {
            spec.sim.profile = builtin_profile(name).map_err(|e| Failure::Config(e.to_string()))?;
        }
        if let Some(path) = &self.trace {
            let (rate, think) = match &spec.workload {
                WorkloadSource::Synthetic(s) => (s.rate, s.think),
                WorkloadSource::Trace { rate, think, .. } => (*rate, *think),
            };
            spec.workload = WorkloadSource::Trace { path: path.clone(), rate, think };
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(m) = &self.mode {
            spec.sim.mode = m.parse::<Mode>().map_err(Failure::Config)?;
        }
        if let Some(p) = &self.policy {
            spec.sim.policy.kind = p.parse::<PolicyKind>().map_err(Failure::Config)?;
        }
        let t = &mut spec.sim.tiers;
        if let Some(b) = self.dram {
            t.dram_capacity = b;
        }
        if let Some(b) = self.disk {
            t.disk_capacity = b;
        }
        if let Some(b) = self.read_buffer {
            t.hbm_read_buffer = b;
        }
        if let Some(b) = self.write_buffer {
            t.hbm_write_buffer = b;
        }
        if self.ttl.is_some() {
            spec.sim.ttl = self.ttl;
        }
        if let Some(o) = &self.out {
            spec.output_dir.clone_from(o);
        }
        spec.validate()?;

        let tiers_in_file = from_file(f.tiers.is_some());
        let workload = match &spec.workload {
            WorkloadSource::Trace { path, .. } => path.display().to_string(),
            WorkloadSource::Synthetic(s) => format!("synthetic ({} sessions, {}/s)", s.sessions, s.rate),
        };
        let t = &spec.sim.tiers;
        let rows = [
            ("profile", spec.sim.profile.name.clone(), pick(&self.profile, from_file(f.profile.is_some() || f.model.is_some()))),
            ("workload", workload, pick(&self.trace, from_file(f.trace.is_some() || f.synthetic.is_some()))),
            ("seed", spec.seed.to_string(), pick(&self.seed, from_file(f.seed.is_some()))),
            ("mode", spec.sim.mode.label().to_string(), pick(&self.mode, from_file(f.mode.is_some()))),
            ("policy", spec.sim.policy.kind.as_str().to_string(), pick(&self.policy, from_file(f.policy.is_some()))),
            ("dram", t.dram_capacity.to_string(), pick(&self.dram, tiers_in_file)),
            ("disk", t.disk_capacity.to_string(), pick(&self.disk, tiers_in_file)),
            ("read_buffer", t.hbm_read_buffer.to_string(), pick(&self.read_buffer, tiers_in_file)),
            ("write_buffer", t.hbm_write_buffer.to_string(), pick(&self.write_buffer, tiers_in_file)),
            (
                "ttl",
                spec.sim.ttl.map_or("none".into(), |x| format!("{x}s")),
                pick(&self.ttl, from_file(f.ttl.is_some())),
            ),
            ("out", spec.output_dir.display().to_string(), pick(&self.out, from_file(f.output_dir.is_some()))),
        ];
        eprintln!("settings (flag > config > default):");
        for (k, v, src) in rows {
            eprintln!("  {k:<13} {v:<32} [{}]", src.name());
        }
        eprintln!("  spec_hash     {}", spec.hash());
        Ok(spec)
    }
}

fn summary(label: &str, r: &kvtier::metrics::MetricsReport) -> String {
    format!(
        "{label}: hit {:.3} (mem {:.3}, disk {:.3})  ttft {:.4}s  p99 {:.4}s  gpu {:.0}s  cost ${:.2}",
        r.overall_hit_rate, r.mem_hit_rate, r.disk_hit_rate, r.mean_ttft, r.p99_ttft, r.gpu_time, r.cost_usd
    )
}

fn cmd_run(opts: &Overrides, label: Option<&str>, events: bool) -> Result<(), Failure> {
    let mut spec = opts.resolve()?;
    spec.sim.record_events |= events;
    let label = label.map_or_else(
        || format!("{}-{}-{}", spec.sim.profile.name, spec.sim.mode.label(), spec.sim.policy.kind.as_str()),
        str::to_string,
    );
    let t0 = Instant::now();
    let out = execute(&spec)?;
    let dir = runs_dir(&spec.output_dir).join(&label);
    let hash = spec.hash();
    write_run(&dir, &PlannedRun::single(&label, spec), &hash, &out)?;
    println!("{}", summary(&label, &out.report));
    eprintln!("wrote {} in {:.2?}", dir.display(), t0.elapsed());
    Ok(())
}

fn cmd_sweep(opts: &Overrides, ratios: &[f64], recipes: &[String]) -> Result<(), Failure> {
    let base = opts.resolve()?;
    let mut figures: Vec<Figure> = Vec::new();
    for r in recipes {
        if r == "all" {
            figures.extend(Figure::ALL);
        } else {
            figures.push(r.parse().map_err(Failure::Config)?);
        }
    }
    if !ratios.is_empty() && !figures.contains(&Figure::Capacity) {
        figures.push(Figure::Capacity);
    }
    if figures.is_empty() {
        return Err(Failure::Config("nothing to sweep: pass --capacity-ratio or --recipe".into()));
    }
    figures.sort();
    figures.dedup();
    let ratios = if ratios.is_empty() { kvtier::experiment::DEFAULT_CAPACITY_RATIOS.to_vec() } else { ratios.to_vec() };
    let mut runs = Vec::new();
    for f in figures {
        runs.extend(plan(f, &base, &ratios)?);
    }
    eprintln!("running {} simulations", runs.len());
    let t0 = Instant::now();
    let results = execute_all(&runs, &base.output_dir, &base.hash());
    let mut failed = 0;
    for (run, res) in runs.iter().zip(results) {
        match res {
            Ok(rec) => println!("{}", summary(&run.label, &rec.report)),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", run.label);
            }
        }
    }
    eprintln!("finished in {:.2?}; runs under {}", t0.elapsed(), runs_dir(&base.output_dir).display());
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} run(s) failed")));
    }
    Ok(())
}

fn cmd_figures(out: &Path, allow_mixed: bool) -> Result<(), Failure> {
    let bundle = build_figures(out, allow_mixed).map_err(|e| match e {
        ExperimentError::MixedHashes(_) => Failure::Config(e.to_string()),
        other => other.into(),
    })?;
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    for m in &bundle.missing {
        eprintln!("missing run, skipped: {m}");
    }
    for p in &bundle.written {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_stats(opts: &Overrides, json: bool) -> Result<(), Failure> {
    let spec = opts.resolve()?;
    let w = spec.load_workload()?;
    let s = trace_stats(&w);
    if json {
        println!("{}", serde_json::to_string_pretty(&s).map_err(|e| Failure::Runtime(e.to_string()))?);
    } else {
        print!("{}", s.to_table());
    }
    Ok(())
}

fn cmd_rope_verify(instances: usize, seed: u64) -> Result<(), Failure> {
    if instances == 0 {
        return Err(Failure::Config("need at least one instance".into()));
    }
    let r = verify::run_suite(instances, seed, DEFAULT_THETA_BASE).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("instances                 {}", r.instances);
    println!("max rel err (full)        {:.3e}", r.max_full_rel_err);
    println!("max rel err (truncated)   {:.3e}", r.max_truncated_rel_err);
    println!("naive divergent (>0.01)   {}/{}", r.naive_divergent, r.instances);
    println!("min naive deviation       {:.3e}", r.min_naive_dev);
    let exact = r.max_full_rel_err <= 1e-6 && r.max_truncated_rel_err <= 1e-6;
    if !exact {
        return Err(Failure::Runtime("decoupled attention disagrees with the oracle".into()));
    }
    println!("decoupled cache matches the oracle");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match &cli.command {
        Command::Run { opts, label, events } => cmd_run(opts, label.as_deref(), *events),
        Command::Sweep { opts, capacity_ratio, recipe } => cmd_sweep(opts, capacity_ratio, recipe),
        Command::Figures { out, allow_mixed } => cmd_figures(out, *allow_mixed),
        Command::Stats { opts, json } => cmd_stats(opts, *json),
        Command::RopeVerify { instances, seed } => cmd_rope_verify(*instances, *seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

