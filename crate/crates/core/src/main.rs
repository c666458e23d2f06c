use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tshsr::config::RunConfig;
use tshsr::data::{gen_synthetic, read_dataset, write_dataset, Dataset};
use tshsr::eval::{evaluate, EvalReport};
use tshsr::numerics::{GradCheckReport, DEFAULT_EPSILON};
use tshsr::train::{load_checkpoint, loss_gradients, numeric_loss_gradients, save_checkpoint, train};
use tshsr::{Error, Model, ModelConfig, StreamMode, Tensor};

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_MAX_PARAMS: usize = 20_000;

#[derive(Parser)]
#[command(name = "tshsr", version, about = "Two-stream hierarchical similarity reasoning for image-text matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Report Recall@K of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare backward gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate a grid of reasoning depths, gate settings and streams.
    Ablate(AblateArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file merged before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Machine-readable copy of the output table.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    #[arg(long)]
    raw_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sim_dim: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hierarchical: Option<bool>,
    #[arg(long)]
    row_softmax: Option<bool>,
    /// `both`, `i2t` or `t2i`.
    #[arg(long)]
    stream: Option<StreamMode>,
    #[arg(long)]
    share_sim_weights: Option<bool>,
    /// Parameter initialisation seed.
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Epoch where the decay starts, or `none`.
    #[arg(long)]
    decay_epoch: Option<String>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    draw: Option<usize>,
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    captions_per_image: Option<usize>,
    #[arg(long)]
    region_scale: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Validation set used to pick the best epoch.
    #[arg(long)]
    val_dataset: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step loss curve, `step,loss`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// Regions per synthetic image.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Pairs in the checked batch.
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adds one to the first analytic gradient entry of this parameter.
    #[arg(long, hide = true)]
    corrupt_grad: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Training set.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Evaluation set; defaults to the training set.
    #[arg(long)]
    eval_dataset: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    /// Reasoning depths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    layers_list: Vec<usize>,
    /// Gate settings, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "true,false")]
    hierarchical_list: Vec<bool>,
    /// Stream modes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "both")]
    streams: Vec<StreamMode>,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Dimension(_) | Error::Input(_) | Error::Load { .. } | Error::Io(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn base_config(common: &Common) -> CliResult<RunConfig> {
    config_over(RunConfig::default(), common)
}

/// Merges the config file, then `--set` entries, onto `cfg`.
fn config_over(mut cfg: RunConfig, common: &Common) -> CliResult<RunConfig> {
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        cfg.merge(&tshsr::kv::KvDoc::parse(&text)?)?;
    }
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(p) = &common.out_csv {
        cfg.out_csv = Some(p.clone());
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut ModelConfig, f: &ModelFlags) {
    macro_rules! over {
        ($($field:ident => $target:ident),* $(,)?) => {
            $(if let Some(v) = f.$field.clone() { cfg.$target = v; })*
        };
    }
    over!(
        raw_dim => raw_dim,
        embed_dim => embed_dim,
        dim => dim,
        sim_dim => sim_dim,
        vocab_size => vocab_size,
        max_len => max_len,
        lambda => lambda,
        layers => layers,
        hierarchical => hierarchical,
        row_softmax => row_softmax,
        stream => stream,
        share_sim_weights => share_sim_weights,
        model_seed => seed,
    );
}

fn apply_train(cfg: &mut RunConfig, f: &TrainFlags) -> CliResult {
    let t = &mut cfg.train;
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.lr_decay {
        t.lr_decay = v;
    }
    if let Some(v) = &f.decay_epoch {
        cfg.set("train.decay_epoch", v)?;
    }
    let t = &mut cfg.train;
    if let Some(v) = f.margin {
        t.margin = v;
    }
    if let Some(v) = f.max_steps {
        t.max_steps = Some(v);
    }
    if let Some(v) = f.seed {
        t.seed = v;
    }
    Ok(())
}

fn echo(cfg: &RunConfig) {
    eprintln!("# effective configuration");
    for line in cfg.to_kv().to_string().lines() {
        eprintln!("{line}");
    }
}

fn require_path<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("missing --{flag}")))
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(io_failure(path, std::io::ErrorKind::NotFound.into()));
    }
    Ok(read_dataset(path)?)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// Model dimensions that must agree with the data.
fn fit_model_to_data(model: &mut ModelConfig, data: &Dataset, explicit: &ModelFlags) {
    let (_, d_raw) = data.region_shape();
    if explicit.raw_dim.is_none() && d_raw > 0 {
        model.raw_dim = d_raw;
    }
    if explicit.vocab_size.is_none() {
        model.vocab_size = data.vocab_size;
    }
    if explicit.max_len.is_none() {
        model.max_len = data.max_len;
    }
}

fn cmd_gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg = base_config(&a.common)?;
    let s = &mut cfg.synth;
    macro_rules! over {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { s.$field = v; })* };
    }
    over!(pairs => n_pairs, k => k, draw => d_raw, len => len, vocab => vocab_size, seed => seed,
          signal => signal_strength, captions_per_image => captions_per_image, region_scale => region_scale);
    if let Some(p) = &a.out {
        cfg.out = Some(p.clone());
    }
    echo(&cfg);
    let out = require_path(&cfg.out, "out")?;
    let data = gen_synthetic(&cfg.synth)?;
    let m = write_dataset(&data, out)?;
    println!("wrote {}", out.display());
    println!("name: {}", m.name);
    println!("images: {}  captions: {}  tokens: {}", m.images, m.captions, m.tokens);
    println!("regions: {} x {}  vocab: {}  max_len: {}", m.k, m.d_raw, m.vocab_size, m.max_len);
    for (blob, bytes, crc) in &m.blobs {
        println!("{blob}: {bytes} bytes, crc32 {crc:08x}");
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = base_config(&a.common)?;
    apply_model(&mut cfg.model, &a.model);
    apply_train(&mut cfg, &a.train)?;
    for (slot, flag) in [
        (&mut cfg.dataset, &a.dataset),
        (&mut cfg.val_dataset, &a.val_dataset),
        (&mut cfg.out, &a.out),
        (&mut cfg.loss_csv, &a.loss_csv),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    let data = load_data(require_path(&cfg.dataset, "dataset")?)?;
    let val = cfg.val_dataset.as_deref().map(load_data).transpose()?;
    fit_model_to_data(&mut cfg.model, &data, &a.model);
    echo(&cfg);
    let out = require_path(&cfg.out, "out")?.to_path_buf();
    cfg.train.validate()?;

    let model = Model::new(cfg.model.clone())?;
    eprintln!("parameters: {}", model.params.num_scalars());
    let start = Instant::now();
    let outcome = train(model, &data, val.as_ref(), &cfg.train, |r| {
        match r.val_rsum {
            Some(v) => eprintln!("epoch {:>3}  lr {:.2e}  loss {:.6}  val rsum {:.1}", r.epoch, r.lr, r.mean_loss, v),
            None => eprintln!("epoch {:>3}  lr {:.2e}  loss {:.6}", r.epoch, r.lr, r.mean_loss),
        }
    })?;
    save_checkpoint(&outcome.best, &out)?;
    if let Some(p) = &cfg.loss_csv {
        write_text(p, &outcome.loss_csv())?;
    }
    println!(
        "steps: {}  final loss: {:.6}  best epoch: {}  time: {:.1}s",
        outcome.loss_curve.len(),
        outcome.final_loss().unwrap_or(f64::NAN),
        outcome.best_epoch,
        start.elapsed().as_secs_f64()
    );
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn print_report(report: &EvalReport, csv: Option<&Path>) -> CliResult {
    println!("{}", EvalReport::table_header());
    println!("{}", report.table_row());
    if let Some(p) = csv {
        write_text(p, &format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let mut cfg = base_config(&a.common)?;
    if a.checkpoint.is_some() {
        cfg.checkpoint.clone_from(&a.checkpoint);
    }
    if a.dataset.is_some() {
        cfg.dataset.clone_from(&a.dataset);
    }
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    echo(&cfg);
    let ckpt = require_path(&cfg.checkpoint, "checkpoint")?;
    if !ckpt.exists() {
        return Err(io_failure(ckpt, std::io::ErrorKind::NotFound.into()));
    }
    let model = load_checkpoint(ckpt)?;
    let data = load_data(require_path(&cfg.dataset, "dataset")?)?;
    let report = evaluate(&model, &data, cfg.folds)?;
    println!("images: {}  captions: {}  folds: {}", data.num_images(), data.num_captions(), report.folds);
    print_report(&report, cfg.out_csv.as_deref())
}

/// The model dimensions `gradcheck` uses unless overridden.
fn tiny_gradcheck_config() -> ModelConfig {
    ModelConfig {
        raw_dim: 6,
        embed_dim: 6,
        dim: 8,
        sim_dim: 6,
        vocab_size: 50,
        max_len: 5,
        layers: 2,
        ..ModelConfig::default()
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let tiny = RunConfig {
        model: tiny_gradcheck_config(),
        ..RunConfig::default()
    };
    let mut cfg = config_over(tiny, &a.common)?;
    apply_model(&mut cfg.model, &a.model);
    cfg.synth.n_pairs = a.batch;
    cfg.synth.k = a.k;
    cfg.synth.d_raw = cfg.model.raw_dim;
    cfg.synth.len = cfg.model.max_len;
    cfg.synth.vocab_size = cfg.model.vocab_size;
    cfg.synth.seed = a.seed;
    echo(&cfg);
    if a.batch < 2 {
        return Err(usage("--batch must be at least 2"));
    }

    let model = Model::new(cfg.model.clone())?;
    let n = model.params.num_scalars();
    if n > GRADCHECK_MAX_PARAMS {
        return Err(usage(format!(
            "{n} parameters exceed the gradcheck bound of {GRADCHECK_MAX_PARAMS}"
        )));
    }
    let data = gen_synthetic(&cfg.synth)?;
    let images: Vec<&Tensor> = data.bundles.iter().map(|b| &b.regions).collect();
    // every caption at the full configured length
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let tokens: Vec<Vec<u32>> = (0..a.batch)
        .map(|_| {
            (0..cfg.model.max_len)
                .map(|_| rng.gen_range(0..cfg.model.vocab_size as u32))
                .collect()
        })
        .collect();
    let caps: Vec<&[u32]> = tokens.iter().map(Vec::as_slice).collect();
    let start = Instant::now();
    let (loss, mut analytic) = loss_gradients(&model, &images, &caps, cfg.train.margin)?;
    if let Some(name) = &a.corrupt_grad {
        let g = analytic
            .get_mut(name)
            .ok_or_else(|| usage(format!("no parameter named `{name}`")))?;
        g.data_mut()[0] += 1.0;
    }
    let numeric = numeric_loss_gradients(&model, &images, &caps, cfg.train.margin, DEFAULT_EPSILON)?;
    let report = GradCheckReport::compare(&analytic, &numeric, GRADCHECK_TOLERANCE)?;

    println!("loss {loss:.6}  parameters {n}  tolerance {GRADCHECK_TOLERANCE:e}");
    println!("{:<24} {:>6} {:>12}  status", "parameter", "size", "max rel err");
    let mut csv = String::from("parameter,size,max_rel_error,passed\n");
    for e in &report.entries {
        let ok = e.max_rel_error < report.tolerance;
        println!(
            "{:<24} {:>6} {:>12.3e}  {}",
            e.name,
            e.numel,
            e.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!("{},{},{},{ok}\n", e.name, e.numel, e.max_rel_error));
    }
    println!(
        "{}: worst {:.3e} over {} parameters in {:.1}s",
        if report.passed() { "PASS" } else { "FAIL" },
        report.worst(),
        report.entries.len(),
        start.elapsed().as_secs_f64()
    );
    if let Some(p) = &cfg.out_csv {
        write_text(p, &csv)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: "gradient check failed".into(),
        })
    }
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let mut cfg = base_config(&a.common)?;
    apply_model(&mut cfg.model, &a.model);
    apply_train(&mut cfg, &a.train)?;
    if a.dataset.is_some() {
        cfg.dataset.clone_from(&a.dataset);
    }
    if a.eval_dataset.is_some() {
        cfg.val_dataset.clone_from(&a.eval_dataset);
    }
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    let data = load_data(require_path(&cfg.dataset, "dataset")?)?;
    let test = match &cfg.val_dataset {
        Some(p) => load_data(p)?,
        None => data.clone(),
    };
    fit_model_to_data(&mut cfg.model, &data, &a.model);
    echo(&cfg);
    cfg.train.validate()?;
    if a.layers_list.is_empty() || a.hierarchical_list.is_empty() || a.streams.is_empty() {
        return Err(usage("ablation lists must not be empty"));
    }

    let mut layers = a.layers_list.clone();
    layers.sort_unstable();
    layers.dedup();
    println!("{:>2} {:>5} {:>6} |   R@1    R@5   R@10 |    R@1    R@5   R@10 |    rsum", "M", "gate", "stream");
    let mut csv = format!("layers,hierarchical,stream,{}\n", EvalReport::csv_header());
    for &m in &layers {
        for &hier in &a.hierarchical_list {
            for &stream in &a.streams {
                let model_cfg = ModelConfig {
                    layers: m,
                    hierarchical: hier,
                    stream,
                    ..cfg.model.clone()
                };
                let model = Model::new(model_cfg)?;
                let outcome = train(model, &data, None, &cfg.train, |_| {})?;
                let report = evaluate(&outcome.best, &test, cfg.folds)?;
                println!(
                    "{:>2} {:>5} {:>6} | {}",
                    m,
                    if hier { "on" } else { "off" },
                    stream.as_str(),
                    report.table_row()
                );
                csv.push_str(&format!("{m},{hier},{},{}\n", stream.as_str(), report.csv_row()));
            }
        }
    }
    if let Some(p) = &cfg.out_csv {
        write_text(p, &csv)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
