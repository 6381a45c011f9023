//! Command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use ramdsir_core::checkpoint::{load_network, save_network};
use ramdsir_core::image::ImageTensor;
use ramdsir_core::metrics::domain_spread;
use ramdsir_core::model::Network;
use ramdsir_core::rng::{derive_seed, seeded};
use ramdsir_core::spectral::{ram_augment, MixRatio, DEFAULT_BETA};
use ramdsir_core::synthdata::{build_benchmark, DataConfig, DomainSample};
use ramdsir_core::trainer::{evaluate, fit_pool, Ablation};
use rand::seq::IndexedRandom;

use crate::config::{fingerprint, RunConfig};
use crate::dataset::{read_info, read_manifest, save_benchmark, write_image_pgm, write_image_raw, AuditedLoader, ManifestEntry, Split};
use crate::experiment::EVAL_BATCH;
use crate::report::{gnuplot_data, read_numeric_csv, train_log_csv, EvalReport};

/// Environment variable that, when set, roots every relative output path.
pub const OUT_ENV: &str = "RAMDSIR_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// A problem with the invocation rather than with the work itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "ramdsir", version, about = "Amplitude-mixup domain-generalizable segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain benchmark on disk.
    GenData(GenDataArgs),
    /// Amplitude-mix a dataset's training images and report the domain spread.
    Augment(AugmentArgs),
    /// Train with one domain held out.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the 2x2x2 component grid.
    Ablate(AblateArgs),
    /// Merge run outputs into plot-ready data files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    #[arg(long, default_value_t = 50)]
    pub per_domain: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// 1 for grayscale with one class, 3 for color with two nested classes.
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave this domain out of the pool.
    #[arg(long)]
    pub held_out: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.held_out` from the config.
    #[arg(long)]
    pub held_out: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Domains to score; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<usize>,
    /// `train`, `test` or `all`.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// Overrides `train.held_out` from the config.
    #[arg(long)]
    pub held_out: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories containing `train_log.csv` and optionally `eval.csv`.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolves an output path against [`OUT_ENV`] when it is relative.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: &Path) -> Result<(RunConfig, Vec<u8>)> {
    if !path.is_file() {
        return Err(usage(format!("config file {} not found", path.display())));
    }
    RunConfig::load(path)
}

/// Runs a parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Augment(a) => augment(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Report(a) => report(&a),
    }
}

/// Parses `argv`, runs it and maps the outcome to an exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = match a.channels {
        1 => DataConfig { height: a.size, width: a.size, ..DataConfig::default() },
        3 => DataConfig { height: a.size, width: a.size, ..DataConfig::fundus_like() },
        c => return Err(usage(format!("--channels must be 1 or 3, got {c}"))),
    };
    let benchmark = build_benchmark(a.domains, a.per_domain, a.seed, &cfg)?;
    let out = output_path(&a.out);
    let entries = save_benchmark(&benchmark, a.per_domain, &out)?;
    println!("wrote {} samples in {} domains to {}", entries.len(), a.domains, out.display());
    Ok(())
}

fn check_held_out(held_out: usize, domains: usize) -> Result<()> {
    if held_out >= domains {
        return Err(usage(format!("held-out domain {held_out} out of range for {domains} domains")));
    }
    Ok(())
}

fn augment(a: &AugmentArgs) -> Result<()> {
    let info = read_info(&a.data)?;
    let manifest = read_manifest(&a.data)?;
    if let Some(h) = a.held_out {
        check_held_out(h, info.domains)?;
    }
    ensure!((0.0..=1.0).contains(&a.beta), "beta must lie in [0, 1]");
    let loader = AuditedLoader::new(&a.data, info.classes);
    let keep = |e: &ManifestEntry| e.split == Split::Train && Some(e.domain) != a.held_out;
    let entries: Vec<&ManifestEntry> = manifest.iter().filter(|e| keep(e)).collect();
    let samples = loader.load_where(&manifest, keep)?;
    let mut rng = seeded(derive_seed(a.seed, 0xa06));
    let out = output_path(&a.out);
    let mut augmented = Vec::with_capacity(samples.len());
    for (s, e) in samples.iter().zip(&entries) {
        let partners: Vec<&DomainSample> = samples.iter().filter(|p| p.domain != s.domain).collect();
        let p = partners.choose(&mut rng).ok_or_else(|| anyhow::anyhow!("augmentation needs at least two domains"))?;
        let img = ram_augment(&s.image, &p.image, a.beta, MixRatio::sample(&mut rng))?;
        let path = out.join(&e.image);
        fs::create_dir_all(path.parent().expect("manifest paths have a directory"))?;
        if img.channels() == 1 {
            write_image_pgm(&path, &img)?;
        } else {
            write_image_raw(&path, &img)?;
        }
        augmented.push((s.domain, img));
    }
    let mut domains: Vec<usize> = samples.iter().map(|s| s.domain).collect();
    domains.sort_unstable();
    domains.dedup();
    let before = domain_spread(&group_by_domain(&domains, samples.iter().map(|s| (s.domain, &s.image))))?;
    let after = domain_spread(&group_by_domain(&domains, augmented.iter().map(|(d, i)| (*d, i))))?;
    let mut w = csv::Writer::from_path(out.join("spread.csv"))?;
    w.write_record(["pool", "spread"])?;
    w.write_record(["original", &format!("{before:.6}")])?;
    w.write_record(["augmented", &format!("{after:.6}")])?;
    w.flush()?;
    println!("domain spread: original {before:.4}, augmented {after:.4}");
    Ok(())
}

fn group_by_domain<'a>(domains: &[usize], imgs: impl Iterator<Item = (usize, &'a ImageTensor)>) -> Vec<Vec<&'a ImageTensor>> {
    let mut groups = vec![Vec::new(); domains.len()];
    for (d, img) in imgs {
        if let Some(i) = domains.iter().position(|&k| k == d) {
            groups[i].push(img);
        }
    }
    groups
}

/// Source-domain training samples, loaded through `loader` so reads can be audited.
fn load_sources(loader: &AuditedLoader, manifest: &[ManifestEntry], held_out: usize) -> Result<Vec<DomainSample>> {
    loader.load_where(manifest, |e| e.split == Split::Train && e.domain != held_out)
}

fn train(a: &TrainArgs) -> Result<()> {
    let (mut cfg, bytes) = load_config(&a.config)?;
    if let Some(h) = a.held_out {
        cfg.train.held_out = h;
    }
    let info = read_info(&a.data)?;
    check_held_out(cfg.train.held_out, info.domains)?;
    let manifest = read_manifest(&a.data)?;
    let out = output_path(&a.out);
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::write(out.join("config.toml"), &bytes)?;

    let loader = AuditedLoader::new(&a.data, info.classes);
    let pool = load_sources(&loader, &manifest, cfg.train.held_out)?;
    let refs: Vec<&DomainSample> = pool.iter().collect();
    let train_cfg = cfg.train_config();
    let result = fit_pool(&refs, info.domains, &train_cfg, |ev| {
        if ev.checkpoint {
            let p = out.join("checkpoints").join(format!("epoch_{:03}.rdsk", ev.log.epoch + 1));
            fs::write(&p, save_network(ev.network))
                .map_err(|e| ramdsir_core::Error::Aborted(format!("cannot write {}: {e}", p.display())))?;
        }
        let l = ev.log.losses;
        println!("epoch {:>3} lr {:.6} total {:.4} seg {:.4} aug {:.4} rec {:.4} consist {:.4}", ev.log.epoch, ev.log.lr, l.total, l.seg_orig, l.seg_aug, l.rec, l.consist);
        Ok(())
    })?;
    fs::write(out.join("train_log.csv"), train_log_csv(&result.log)?)?;
    fs::write(out.join("final.rdsk"), save_network(&result.network))?;
    let audit: String = loader.reads().iter().map(|p| format!("{}\n", p.display())).collect();
    fs::write(out.join("audit.txt"), audit)?;
    println!("config {} trained on {} samples; outputs in {}", fingerprint(&bytes), pool.len(), out.display());
    Ok(())
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(usage(format!("--split must be train, test or all, got {other}"))),
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (cfg, bytes) = load_config(&a.config)?;
    let split = parse_split(&a.split)?;
    let info = read_info(&a.data)?;
    let manifest = read_manifest(&a.data)?;
    let mut net = Network::new(cfg.train_config().model_config(info.channels, info.classes, info.domains), 0)?;
    let ckpt = fs::read(&a.checkpoint).with_context(|| format!("cannot read checkpoint {}", a.checkpoint.display()))?;
    load_network(&mut net, &ckpt)?;
    let domains: Vec<usize> = if a.domains.is_empty() { (0..info.domains).collect() } else { a.domains.clone() };
    for &d in &domains {
        check_held_out(d, info.domains)?;
    }
    let loader = AuditedLoader::new(&a.data, info.classes);
    let mut per_domain = Vec::new();
    for &d in &domains {
        let samples = loader.load_where(&manifest, |e| e.domain == d && split.is_none_or(|s| e.split == s))?;
        if samples.is_empty() {
            bail!("no samples for domain {d}");
        }
        let refs: Vec<&DomainSample> = samples.iter().collect();
        per_domain.push((d, evaluate(&net, &refs, EVAL_BATCH)?));
    }
    let report = EvalReport::new(&per_domain, fingerprint(&bytes), vec![info.seed, cfg.train.seed])?;
    let out = output_path(&a.out);
    fs::create_dir_all(&out)?;
    fs::write(out.join("eval.csv"), report.to_csv()?)?;
    let table = report.to_table();
    fs::write(out.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let (mut cfg, bytes) = load_config(&a.config)?;
    if let Some(h) = a.held_out {
        cfg.train.held_out = h;
    }
    ensure!(!a.seeds.is_empty(), "at least one seed is required");
    let info = read_info(&a.data)?;
    let held_out = cfg.train.held_out;
    check_held_out(held_out, info.domains)?;
    let manifest = read_manifest(&a.data)?;
    let loader = AuditedLoader::new(&a.data, info.classes);
    let pool = load_sources(&loader, &manifest, held_out)?;
    let refs: Vec<&DomainSample> = pool.iter().collect();

    let mut rows = Vec::new();
    let mut trained = Vec::new();
    for ablation in Ablation::all() {
        for &seed in &a.seeds {
            let mut run_cfg = cfg.train_config();
            run_cfg.ablation = ablation;
            run_cfg.seed = seed;
            let r = fit_pool(&refs, info.domains, &run_cfg, |_| Ok(()))?;
            trained.push((ablation, seed, r.network));
        }
    }
    // held-out images are only read once every model is trained
    let test = loader.load_where(&manifest, |e| e.domain == held_out)?;
    let test_refs: Vec<&DomainSample> = test.iter().collect();
    for (ablation, seed, net) in &trained {
        let scores = evaluate(net, &test_refs, EVAL_BATCH)?;
        let dice = 100.0 * scores.iter().map(|s| s.dice.iter().sum::<f64>() / s.dice.len() as f64).sum::<f64>() / scores.len() as f64;
        rows.push((*ablation, *seed, dice));
        println!("{:<22} seed {seed}: held-out Dice {dice:.2}", ablation.label());
    }

    let out = output_path(&a.out);
    fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("ablation_runs.csv"))?;
    w.write_record(["ram_aug", "dsir", "consistency", "label", "seed", "held_out", "dice"])?;
    for (ab, seed, dice) in &rows {
        w.write_record([
            u8::from(ab.ram_aug).to_string(),
            u8::from(ab.dsir).to_string(),
            u8::from(ab.consistency).to_string(),
            ab.label(),
            seed.to_string(),
            held_out.to_string(),
            format!("{dice:.4}"),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record(["ram_aug", "dsir", "consistency", "label", "mean_dice", "runs", "fingerprint"])?;
    let mut dat_rows = Vec::new();
    for ab in Ablation::all() {
        let v: Vec<f64> = rows.iter().filter(|r| r.0 == ab).map(|r| r.2).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        w.write_record([
            u8::from(ab.ram_aug).to_string(),
            u8::from(ab.dsir).to_string(),
            u8::from(ab.consistency).to_string(),
            ab.label(),
            format!("{mean:.4}"),
            v.len().to_string(),
            fingerprint(&bytes),
        ])?;
        dat_rows.push(vec![ab.label(), format!("{mean:.4}")]);
    }
    w.flush()?;
    fs::write(out.join("ablation.dat"), gnuplot_data(&["config".into(), "mean_dice".into()], &dat_rows))?;
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let out = output_path(&a.out);
    fs::create_dir_all(&out)?;
    let mut summary = Vec::new();
    for (i, run) in a.runs.iter().enumerate() {
        let name = run.file_name().map_or_else(|| format!("run{i}"), |n| n.to_string_lossy().into_owned());
        let log_path = run.join("train_log.csv");
        if !log_path.is_file() {
            return Err(usage(format!("{} has no train_log.csv", run.display())));
        }
        let (header, rows) = read_numeric_csv(&log_path)?;
        let text_rows: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(f64::to_string).collect()).collect();
        fs::write(out.join(format!("{name}_loss.dat")), gnuplot_data(&header, &text_rows))?;
        let final_total = rows.last().and_then(|r| r.last()).copied().unwrap_or(f64::NAN);
        let eval_path = run.join("eval.csv");
        if eval_path.is_file() {
            let mut r = csv::Reader::from_path(&eval_path)?;
            for rec in r.records() {
                let rec = rec?;
                summary.push(vec![name.clone(), rec[0].to_string(), rec[1].to_string(), rec[2].to_string(), final_total.to_string()]);
            }
        } else {
            summary.push(vec![name.clone(), "-".into(), "-".into(), "-".into(), final_total.to_string()]);
        }
    }
    let header: Vec<String> = ["run", "domain", "class", "dice", "final_total_loss"].iter().map(|s| s.to_string()).collect();
    fs::write(out.join("summary.dat"), gnuplot_data(&header, &summary))?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(&header)?;
    for r in &summary {
        w.write_record(r)?;
    }
    w.flush()?;
    println!("merged {} runs into {}", a.runs.len(), out.display());
    Ok(())
}
