use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use contiseg::checkpoint::{self, Checkpoint};
use contiseg::config::{Component, Config, OrderMode};
use contiseg::data::ClassId;
use contiseg::harness::{self, evaluate, Dataset, Item, RunOptions, RunRecord, StagePlan};
use contiseg::metrics::{group_report, mean, GroupReport};
use contiseg::par::Exec;
use contiseg::storage::{self, ReferenceScale, StorageLine};
use contiseg::Error;

/// Directory under which `train` creates run directories when `--out` is not given.
const RUN_ROOT_ENV: &str = "CONTISEG_RUN_ROOT";

#[derive(Parser)]
#[command(name = "contiseg", version, about = "Class-incremental segmentation on a synthetic shapes world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a stage plan end to end, writing checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate checkpoints and print base/new/all/avg groups.
    Eval(EvalArgs),
    /// Byte accounting of virtual-query banks and image-replay directories.
    StorageReport(StorageArgs),
    /// Write raw replay images (the storage baseline) to a directory.
    ImageReplay(ImageReplayArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.hidden_dim=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> contiseg::Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Ascending,
    Descending,
    Shuffle,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Disable a component: psd, qpa, csl or vq. Repeatable.
    #[arg(long, value_name = "COMPONENT")]
    ablate: Vec<String>,
    /// Class order of the plan.
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    /// Seed of a shuffled order.
    #[arg(long)]
    order_seed: Option<u64>,
    /// Model and sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Train every class in a single stage (offline upper bound).
    #[arg(long)]
    joint: bool,
    /// Run directory; defaults to `$CONTISEG_RUN_ROOT/run-<config hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue after the last completed stage in the run directory.
    #[arg(long)]
    resume: bool,
    /// Process batch items one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GroupBy {
    Order,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file. Repeat with `--group-by order` to compare runs.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// One row per checkpoint labelled by its class order, plus mean and std.
    #[arg(long, value_enum)]
    group_by: Option<GroupBy>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct StorageArgs {
    /// Checkpoint whose virtual-query bank is measured. Repeatable.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Directory of raw replay images. Repeatable.
    #[arg(long)]
    image_dir: Vec<PathBuf>,
    /// Bytes per stored real for query banks.
    #[arg(long, default_value_t = 4)]
    bytes_per_real: usize,
    /// Add the comparison at 150 classes, 256 dims, 80 half-precision queries per class.
    #[arg(long)]
    reference: bool,
}

#[derive(Args)]
struct ImageReplayArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Images kept per class of the first stage.
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::StorageReport(a) => cmd_storage_report(a),
        Command::ImageReplay(a) => cmd_image_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn cmd_train(a: TrainArgs) -> contiseg::Result<()> {
    let mut cfg = a.config.load()?;
    for name in &a.ablate {
        cfg.set_component(Component::parse(name)?, false);
    }
    if let Some(o) = a.order {
        cfg.plan.order = match o {
            OrderArg::Ascending => OrderMode::Ascending,
            OrderArg::Descending => OrderMode::Descending,
            OrderArg::Shuffle => OrderMode::Shuffle,
        };
    }
    if let Some(s) = a.order_seed {
        cfg.plan.order_seed = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dir = match a.out {
        Some(d) => d,
        None => {
            let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            let tag = if a.joint { "joint-" } else { "" };
            root.join(format!("run-{tag}{}", &cfg.hash()[..12]))
        }
    };
    let opts = RunOptions {
        exec: if a.sequential { Exec::Sequential } else { Exec::Parallel },
        run_dir: Some(dir.clone()),
        resume: a.resume,
    };
    let record = if a.joint { harness::run_joint(&cfg, &opts)? } else { harness::run(&cfg, &opts)? };
    print!("{}", format_record(&record));
    println!("run directory: {}", dir.display());
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |v| format!("{:.1}", 100.0 * v))
}

fn format_record(record: &RunRecord) -> String {
    let mut out = String::from("stage   base    new    all    avg\n");
    for r in &record.records {
        let _ = writeln!(out, "{:>5} {:>6} {:>6} {:>6} {:>6}", r.stage, pct(r.pq.base), pct(r.pq.new), pct(r.pq.all), pct(r.pq.avg));
    }
    out
}

/// Stage lists the checkpoint was trained under: the configured plan when it
/// agrees with the checkpoint's seen classes, otherwise one joint stage.
fn checkpoint_stages(ckpt: &Checkpoint) -> contiseg::Result<Vec<Vec<ClassId>>> {
    let plan = StagePlan::from_config(&ckpt.config)?;
    if ckpt.stage <= plan.num_stages() && plan.seen(ckpt.stage) == ckpt.seen {
        Ok(plan.stages[..ckpt.stage].to_vec())
    } else {
        Ok(vec![ckpt.seen.clone()])
    }
}

struct EvalRow {
    label: String,
    pq: GroupReport,
    miou: GroupReport,
}

fn eval_checkpoint(path: &Path, split: Split) -> contiseg::Result<EvalRow> {
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = checkpoint::load(path)?;
    let stages = checkpoint_stages(&ckpt)?;
    let t = stages.len();
    let data = Dataset::from_config(&ckpt.config);
    let seen: BTreeSet<ClassId> = ckpt.seen.iter().copied().collect();
    let items: Vec<Item> = match split {
        Split::Test => data.test_items(&seen),
        Split::Train => {
            let stage = data.stage_data(&seen);
            (0..stage.len()).map(|k| stage.get(k).clone()).collect()
        }
    };
    let eval = evaluate(&ckpt.model, &ckpt.config, &items, &ckpt.seen, Exec::Parallel)?;
    // "avg" needs the earlier stages' results, which only the run record has
    let prior = path.parent().map(|d| d.join(harness::RECORD_JSON)).and_then(|p| fs::read(p).ok());
    let prior: Option<RunRecord> = prior.and_then(|b| serde_json::from_slice(&b).ok());
    let prev = |f: fn(&harness::StageRecord) -> Option<f64>| -> Vec<f64> {
        match (&prior, split) {
            (Some(r), Split::Test) if r.stages.len() >= t && r.stages[..t] == stages[..] => {
                r.records.iter().filter(|s| s.stage < t).filter_map(f).collect()
            }
            _ => Vec::new(),
        }
    };
    let mut pq = group_report(&eval.pq.per_class_pq(), &stages, t, &prev(|s| s.pq.all));
    let mut miou = group_report(&eval.iou.per_class_iou(), &stages, t, &prev(|s| s.miou.all));
    if t > 1 && prev(|s| s.pq.all).len() != t - 1 {
        pq.avg = None;
        miou.avg = None;
    }
    let label = match ckpt.config.plan.order {
        OrderMode::Ascending => "ascending".to_string(),
        OrderMode::Descending => "descending".to_string(),
        OrderMode::Shuffle => format!("shuffle:{}", ckpt.config.plan.order_seed),
    };
    Ok(EvalRow { label, pq, miou })
}

fn std_dev(values: &[f64]) -> Option<f64> {
    let m = mean(values.iter().copied())?;
    mean(values.iter().map(|v| (v - m) * (v - m))).map(f64::sqrt)
}

fn cmd_eval(a: EvalArgs) -> contiseg::Result<()> {
    if a.group_by.is_none() && a.checkpoint.len() != 1 {
        return Err(Error::InvalidArgument("several checkpoints need --group-by order".into()));
    }
    let rows = a.checkpoint.iter().map(|p| eval_checkpoint(p, a.split)).collect::<contiseg::Result<Vec<_>>>()?;
    let mut table = String::new();
    let mut csv = String::from("row,group,metric,value\n");
    if a.group_by.is_some() {
        let _ = writeln!(table, "{:<14} {:>6} {:>6} {:>6}", "order", "base", "new", "all");
        for r in &rows {
            let _ = writeln!(table, "{:<14} {:>6} {:>6} {:>6}", r.label, pct(r.pq.base), pct(r.pq.new), pct(r.pq.all));
        }
        let col = |f: fn(&GroupReport) -> Option<f64>| rows.iter().filter_map(|r| f(&r.pq)).collect::<Vec<_>>();
        let cols = [col(|g| g.base), col(|g| g.new), col(|g| g.all)];
        let stat = |f: fn(&[f64]) -> Option<f64>| cols.iter().map(|c| pct(f(c))).collect::<Vec<_>>();
        let m = stat(|c| mean(c.iter().copied()));
        let s = stat(std_dev);
        let _ = writeln!(table, "{:<14} {:>6} {:>6} {:>6}", "mean", m[0], m[1], m[2]);
        let _ = writeln!(table, "{:<14} {:>6} {:>6} {:>6}", "std", s[0], s[1], s[2]);
    } else {
        let r = &rows[0];
        let _ = writeln!(table, "{:<6} {:>6} {:>6} {:>6} {:>6}", "metric", "base", "new", "all", "avg");
        for (name, g) in [("PQ", &r.pq), ("mIoU", &r.miou)] {
            let _ = writeln!(table, "{:<6} {:>6} {:>6} {:>6} {:>6}", name, pct(g.base), pct(g.new), pct(g.all), pct(g.avg));
        }
    }
    for r in &rows {
        for (metric, g) in [("pq", &r.pq), ("miou", &r.miou)] {
            for (group, v) in g.groups() {
                let v = v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
                let _ = writeln!(csv, "{},{group},{metric},{v}", r.label);
            }
        }
    }
    print!("{table}");
    if let Some(p) = a.csv {
        fs::write(p, csv)?;
    }
    Ok(())
}

fn storage_lines(a: &StorageArgs) -> contiseg::Result<Vec<StorageLine>> {
    let mut lines = Vec::new();
    for p in &a.checkpoint {
        let ckpt = checkpoint::load(p)?;
        let bank = &ckpt.bank;
        lines.push(StorageLine {
            method: format!("virtual queries {}", p.display()),
            items: bank.total(),
            bytes: storage::bank_payload_bytes(bank, a.bytes_per_real),
        });
        lines.push(StorageLine {
            method: format!("  capacity h={} x {} classes x D={}", bank.capacity, bank.classes().len(), bank.dim),
            items: bank.capacity * bank.classes().len(),
            bytes: storage::vq_capacity_bytes(bank.capacity, bank.classes().len(), bank.dim, a.bytes_per_real),
        });
    }
    for d in &a.image_dir {
        let (n, bytes) = storage::image_replay_dir_bytes(d)?;
        lines.push(StorageLine { method: format!("image replay {}", d.display()), items: n, bytes });
    }
    Ok(lines)
}

fn cmd_storage_report(a: StorageArgs) -> contiseg::Result<()> {
    let lines = storage_lines(&a)?;
    println!("{:<60} {:>8} {:>12}", "method", "items", "bytes");
    for l in &lines {
        println!("{:<60} {:>8} {:>12}", l.method, l.items, l.bytes);
    }
    if a.reference {
        let r = ReferenceScale::default();
        println!(
            "reference: {} queries/class x {} classes x D={} x {} B = {} B ({:.2} MiB)",
            r.queries_per_class,
            r.classes,
            r.dim,
            r.bytes_per_real,
            r.vq_bytes(),
            storage::mib(r.vq_bytes())
        );
        println!("reference: image replay {:.1} MiB = {} B", r.image_replay_mib, r.image_bytes());
        println!("reference: virtual queries use {:.1}% of the image-replay storage", 100.0 * r.ratio());
    }
    Ok(())
}

fn cmd_image_replay(a: ImageReplayArgs) -> contiseg::Result<()> {
    let cfg = a.config.load()?;
    let plan = StagePlan::from_config(&cfg)?;
    let data = Dataset::from_config(&cfg);
    let visible: BTreeSet<ClassId> = plan.stages[0].iter().copied().collect();
    let stage = data.stage_data(&visible);
    let items: Vec<&Item> = (0..stage.len()).map(|k| stage.get(k)).collect();
    let mut picked = BTreeSet::new();
    for &c in &plan.stages[0] {
        let with_c = items.iter().filter(|it| it.annotation.segments.iter().any(|s| s.class_id == c));
        picked.extend(with_c.take(a.per_class).map(|it| it.index));
    }
    let images: Vec<_> = items.iter().filter(|it| picked.contains(&it.index)).map(|it| it.image.clone()).collect();
    let bytes = storage::write_image_replay(&a.out, &images)?;
    println!("wrote {} images, {bytes} bytes, to {}", images.len(), a.out.display());
    Ok(())
}
