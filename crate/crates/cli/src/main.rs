//! `prefixmix`: synthetic corpora, router training, sharding, expert and dense
//! training, evaluation and analytical cost reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prefixmix::config::{key_values, ExperimentConfig};
use prefixmix::corpus::{write_packed, Dataset};
use prefixmix::cost::{
    comm_interval, ddp_comm, dense_inference_flops, dense_train_flops, preset, router_comm, table7_csv, table7_rows, ArchSpec,
    CommModelInput, PRESETS,
};
use prefixmix::eval::prefix_sweep;
use prefixmix::pipeline::{self, RouterVariant, RunDir, RunManifest};
use prefixmix::Error;

const TRAIN_TOLERANCE: f64 = 0.005;
const INFERENCE_TOLERANCE: f64 = 0.01;
const OVERHEAD_TOLERANCE: f64 = 0.05;

#[derive(Parser)]
#[command(name = "prefixmix", version, about = "Mixtures of independently trained language models routed by prefix likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct RunArgs {
    /// Experiment config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set E=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic training and test corpora.
    Synth(RunArgs),
    /// Pack a raw byte file into fixed-length sequences.
    Pack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long = "seq-len", default_value_t = 128)]
        seq_len: usize,
    },
    /// Train the router ensemble by alternating assignment rounds.
    TrainRouters(RunArgs),
    /// Score and balance the training set into one shard per expert.
    Shard(RunArgs),
    /// Train one expert on its shard.
    TrainExpert {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        index: usize,
    },
    /// Train every expert, several at a time.
    TrainAllExperts {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train the dense baseline on the full training set.
    TrainDense(RunArgs),
    /// Evaluate the mixture and the dense baseline on the test set.
    Eval(RunArgs),
    /// Mixture perplexity for several inference prefix lengths.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated prefix lengths; defaults to `eval_prefixes`.
        #[arg(long, value_delimiter = ',')]
        prefixes: Vec<usize>,
    },
    /// Train and evaluate alternative routers against the same data and dense baseline.
    CompareRouters {
        #[command(flatten)]
        run: RunArgs,
        /// Router designs: `lm:LAYERSxHIDDENxHEADS` or `tfidf:COMPONENTS`.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
    },
    /// Every phase from corpus generation to evaluation.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Replay every command recorded in a manifest into a fresh directory.
    Reproduce {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Training and inference FLOPs of one architecture.
    Flops(FlopsArgs),
    /// Communication volume of router training against data-parallel training.
    Comm(CommArgs),
    /// The FLOPs table of the reference configurations.
    Table7 {
        /// Exit with status 4 unless every row is within tolerance.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// One of `335m-dense`, `1.3b-dense`, `router-4.4m`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    layers: Option<u64>,
    #[arg(long)]
    hidden: Option<u64>,
    #[arg(long)]
    heads: Option<u64>,
    #[arg(long = "seq-len")]
    seq_len: Option<u64>,
    #[arg(long)]
    batch: Option<u64>,
    #[arg(long)]
    vocab: Option<u64>,
    /// Feedforward width; defaults to 4 × hidden.
    #[arg(long)]
    ff: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Count the batch in every inference term.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CommArgs {
    #[arg(long, default_value_t = 45_000_000)]
    tokens: u64,
    #[arg(long, default_value_t = 32)]
    experts: u64,
    #[arg(long = "seq-len", default_value_t = 1024)]
    seq_len: u64,
    #[arg(long = "router-steps", default_value_t = 128_000)]
    router_steps: u64,
    #[arg(long = "router-batch", default_value_t = 32)]
    router_batch: u64,
    #[arg(long, default_value_t = 1_300_000_000)]
    params: u64,
    #[arg(long = "message-bytes", default_value_t = (1 << 31) - 1)]
    message_bytes: u64,
    #[arg(long, default_value_t = 128)]
    batch: u64,
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Lib(Error::Config(_)) => 2,
        Failure::Lib(Error::Diverged { .. }) => 3,
        Failure::Check(_) => 4,
        Failure::Lib(_) => 1,
    }
}

/// Defaults, then the config file, then `--set` overrides, then dedicated flags.
fn resolve(run: &RunArgs, workers: Option<usize>) -> Result<(ExperimentConfig, RunDir), Error> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &run.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in key_values(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    for kv in &run.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(out) = &run.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    let root = cfg.out_dir.clone().ok_or_else(|| Error::Config("no run directory: pass --out or set out_dir".into()))?;
    fs::create_dir_all(&root)?;
    Ok((cfg, RunDir::new(root)))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable report"));
}

/// Runs one phase against its run directory and records the manifest.
fn phase(
    name: &str,
    args: &[String],
    run: &RunArgs,
    workers: Option<usize>,
    body: impl FnOnce(&ExperimentConfig, &RunDir) -> Result<(), Error>,
) -> Outcome {
    let started = pipeline::unix_now();
    let (cfg, dir) = resolve(run, workers)?;
    body(&cfg, &dir)?;
    RunManifest::collect(name, args, &cfg, &dir, started)?.write(&dir)?;
    Ok(())
}

fn flops(a: &FlopsArgs) -> Outcome {
    let (mut arch, mut steps) = match &a.preset {
        Some(name) => preset(name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}; known: {}", PRESETS.join(", "))))?,
        None => {
            let need = |v: Option<u64>, flag: &str| v.ok_or_else(|| Error::Config(format!("--{flag} is required without --preset")));
            let arch = ArchSpec::new(
                need(a.layers, "layers")?,
                need(a.hidden, "hidden")?,
                need(a.heads, "heads")?,
                need(a.seq_len, "seq-len")?,
                a.batch.unwrap_or(1),
                need(a.vocab, "vocab")?,
            );
            (arch, 1)
        }
    };
    let fields = [(&mut arch.layers, a.layers), (&mut arch.hidden, a.hidden), (&mut arch.heads, a.heads), (&mut arch.seq_len, a.seq_len), (&mut arch.batch, a.batch), (&mut arch.vocab, a.vocab)];
    for (slot, v) in fields {
        if let Some(v) = v {
            *slot = v;
        }
    }
    arch.ff = a.ff.unwrap_or(if a.preset.is_some() && a.hidden.is_none() { arch.ff } else { 4 * arch.hidden });
    if let Some(s) = a.steps {
        steps = s;
    }
    arch.validate().map_err(|e| Error::Config(e.to_string()))?;
    let train = dense_train_flops(&arch, steps);
    let inference = dense_inference_flops(&ArchSpec { batch: if a.strict { arch.batch } else { 1 }, ..arch }, a.strict);
    print_json(&serde_json::json!({ "arch": arch, "steps": steps, "train": train, "inference": inference }));
    if let Some(path) = &a.csv {
        let text = format!(
            "model,steps,train_1e19,inference_1e12\n{},{},{:.2},{:.2}\n",
            a.preset.as_deref().unwrap_or("custom"),
            steps,
            train.total / 1e19,
            inference.total / 1e12
        );
        fs::write(path, text)?;
    }
    Ok(())
}

fn comm(a: &CommArgs) -> Outcome {
    let input = CommModelInput {
        tokens_between_exchanges: a.tokens,
        message_bytes: a.message_bytes,
        model_params: a.params,
        ..CommModelInput::default()
    };
    let router = router_comm(&input, a.router_steps, a.router_batch, a.seq_len, a.experts)?;
    print_json(&serde_json::json!({
        "router": router,
        "ddp_bytes_per_step": ddp_comm(&input),
        "expert_steps_between_exchanges": comm_interval(a.message_bytes, a.batch, a.experts)?,
    }));
    Ok(())
}

fn table7(check: bool, csv: Option<&Path>) -> Outcome {
    let results: Vec<_> = table7_rows().iter().map(|r| r.evaluate()).collect();
    let mut buf = Vec::new();
    table7_csv(&results, &mut buf)?;
    match csv {
        Some(path) => fs::write(path, &buf)?,
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    if !check {
        return Ok(());
    }
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.train_error < TRAIN_TOLERANCE && r.overhead_error < OVERHEAD_TOLERANCE && r.inference_error < INFERENCE_TOLERANCE;
        println!(
            "{} {}: train {:.3}% overhead {:.3}% inference {:.3}%",
            if ok { "PASS" } else { "FAIL" },
            r.label,
            100.0 * r.train_error,
            100.0 * r.overhead_error,
            100.0 * r.inference_error
        );
        if !ok {
            failed.push(r.label.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("rows outside tolerance: {}", failed.join(", "))))
    }
}

/// Drops the directory and config flags so a recorded command can be pointed elsewhere.
fn strip_run_flags(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        match a.as_str() {
            "--config" | "--out" | "--set" => skip = true,
            _ if a.starts_with("--config=") || a.starts_with("--out=") || a.starts_with("--set=") => {}
            _ => out.push(a.clone()),
        }
    }
    out
}

fn reproduce(manifest: &Path, out: &Path) -> Outcome {
    let m = RunManifest::read(manifest)?;
    let snapshots = out.join("reproduce");
    fs::create_dir_all(&snapshots)?;
    for (i, step) in m.history.iter().enumerate() {
        if step.command == "reproduce" {
            continue;
        }
        let cfg_path = snapshots.join(format!("step_{i}.cfg"));
        fs::write(&cfg_path, &step.config_text)?;
        let mut argv = vec!["prefixmix".to_string()];
        argv.extend(strip_run_flags(&step.args));
        argv.extend(["--config".into(), cfg_path.display().to_string(), "--out".into(), out.display().to_string()]);
        log::info!("replaying {}", argv[1..].join(" "));
        let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config(format!("manifest step {i}: {e}")))?;
        dispatch(cli.command, &argv[1..])?;
    }
    Ok(())
}

fn dispatch(command: Command, args: &[String]) -> Outcome {
    let args = args.to_vec();
    match command {
        Command::Synth(run) => phase("synth", &args, &run, None, |cfg, dir| pipeline::prepare_data(cfg, dir).map(|_| ())),
        Command::Pack { input, output, seq_len } => {
            let data = Dataset::from_bytes(&fs::read(&input)?, seq_len)?;
            write_packed(&output, &data)?;
            println!("{} sequences of {} tokens", data.len(), seq_len);
            Ok(())
        }
        Command::TrainRouters(run) => phase("train-routers", &args, &run, None, |cfg, dir| {
            let split = pipeline::load_data(dir)?;
            let (_, rounds) = pipeline::run_train_routers(cfg, dir, &split)?;
            print_json(&rounds);
            Ok(())
        }),
        Command::Shard(run) => phase("shard", &args, &run, None, |cfg, dir| {
            let split = pipeline::load_data(dir)?;
            let routers = pipeline::load_routers(cfg, dir)?;
            let (_, confusion) = pipeline::run_shard(cfg, dir, &split, &routers)?;
            print_json(&confusion);
            Ok(())
        }),
        Command::TrainExpert { run, index } => phase("train-expert", &args, &run, None, |cfg, dir| {
            if index >= cfg.experts {
                return Err(Error::Config(format!("--index {index} with {} experts", cfg.experts)));
            }
            let split = pipeline::load_data(dir)?;
            let shard = prefixmix::mixture::Shard::read(&dir.shard(index))?;
            pipeline::run_train_expert(cfg, dir, &split, &shard)?;
            pipeline::rebuild_metrics(dir, cfg.experts)
        }),
        Command::TrainAllExperts { run, workers } => phase("train-all-experts", &args, &run, workers, |cfg, dir| {
            let split = pipeline::load_data(dir)?;
            let shards = pipeline::load_shards(cfg, dir)?;
            pipeline::run_train_all_experts(cfg, dir, &split, &shards).map(|_| ())
        }),
        Command::TrainDense(run) => phase("train-dense", &args, &run, None, |cfg, dir| {
            let split = pipeline::load_data(dir)?;
            pipeline::run_train_dense(cfg, dir, &split).map(|_| ())
        }),
        Command::Eval(run) => phase("eval", &args, &run, None, |cfg, dir| {
            let split = pipeline::load_data(dir)?;
            let s = pipeline::run_eval(cfg, dir, &split, "lm")?;
            print_json(&serde_json::json!({ "dense_ppl": s.dense_perplexity, "mixture_ppl": s.mixture.perplexity, "shares": s.mixture.shares() }));
            Ok(())
        }),
        Command::Sweep { run, prefixes } => phase("sweep", &args, &run, None, |cfg, dir| {
            let split = pipeline::load_data(dir)?;
            let routers = pipeline::load_routers(cfg, dir)?;
            let experts = pipeline::load_experts(cfg, dir)?;
            let prefixes = if prefixes.is_empty() { cfg.eval_prefixes.clone() } else { prefixes };
            let test: Vec<&[u32]> = split.test.sequences.iter().map(|s| s.ids.as_slice()).collect();
            let sweep = prefix_sweep(&routers, &experts, &test, &prefixes, cfg.prefix)?;
            let mut file = fs::File::create(dir.root.join("sweep.csv"))?;
            sweep.write_csv(&mut file)?;
            sweep.write_csv(&mut std::io::stdout())
        }),
        Command::CompareRouters { run, variants } => phase("compare-routers", &args, &run, None, |cfg, dir| {
            let variants = variants.iter().map(|v| RouterVariant::parse(v)).collect::<Result<Vec<_>, _>>()?;
            let split = pipeline::load_data(dir)?;
            let rows = pipeline::compare_routers(cfg, dir, &split, &variants)?;
            print_json(&rows);
            Ok(())
        }),
        Command::Run { run, workers } => phase("run", &args, &run, workers, |cfg, dir| {
            let s = pipeline::run_all(cfg, dir)?;
            print_json(&serde_json::json!({
                "dense_ppl": s.dense_perplexity,
                "mixture_ppl": s.mixture.perplexity,
                "shares": s.mixture.shares(),
                "test_confusion": s.test_confusion.matrix,
            }));
            Ok(())
        }),
        Command::Reproduce { manifest, out } => reproduce(&manifest, &out),
        Command::Flops(a) => flops(&a),
        Command::Comm(a) => comm(&a),
        Command::Table7 { check, csv } => table7(check, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match dispatch(cli.command, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Check(m) => eprintln!("check failed: {m}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
