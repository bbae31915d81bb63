//! Operator surface: dataset generation, training, evaluation, and metrics
//! export. Every subcommand reads a `key = value` config file plus flag
//! overrides, writes its full effective config into the output directory
//! before doing any work, and exits 0 on success, 2 on configuration errors,
//! 1 on runtime failures.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::ckpt;
use crate::config::ConfigMap;
use crate::data::{Dataset, Split};
use crate::metrics::{MetricsWriter, HEADER};
use crate::model::{Carnet, CarnetConfig};
use crate::tensor::Params;
use crate::train::{
    evaluate_imitation, init_params, pretrain_autoencoder, random_policy_reward,
    train_dqn, train_ensemble, train_imitation, DqnConfig, IlFeatures, TrainConfig,
};

/// Configuration problems exit with 2, runtime failures with 1.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

trait Phase<T> {
    fn config_err(self) -> Result<T, CliError>;
    fn runtime_err(self) -> Result<T, CliError>;
}

impl<T> Phase<T> for Result<T> {
    fn config_err(self) -> Result<T, CliError> {
        self.map_err(CliError::Config)
    }
    fn runtime_err(self) -> Result<T, CliError> {
        self.map_err(CliError::Runtime)
    }
}

#[derive(Parser)]
#[command(name = "carnet", about = "CARNet latent dynamics: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll the scripted autopilot and write an episode dataset.
    GenerateData(RunArgs),
    /// Train the autoencoder on single-frame reconstruction.
    PretrainAe(RunArgs),
    /// Jointly train autoencoder + GRU on the full objective.
    TrainCarnet(RunArgs),
    /// Imitation-learn the controller head on expert windows.
    TrainIl(RunArgs),
    /// Train a DQN policy on frozen latent features.
    TrainRl(RunArgs),
    /// Report controller accuracy of one or more checkpoints.
    Eval(EvalArgs),
    /// Merge metrics CSVs into one stream with the fixed header.
    ExportMetrics(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoints, metrics, and the effective config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate; repeat for a mean ± std over several.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args)]
struct ExportArgs {
    /// Metrics CSV files to merge, in order.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse argv and run; the returned code is the process exit status.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap uses 0 for --help/--version and 2 for usage errors
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Ok(v) = std::env::var("CARNET_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenerateData(a) => generate_data(a),
        Cmd::PretrainAe(a) => pretrain_ae(a),
        Cmd::TrainCarnet(a) => train_carnet(a),
        Cmd::TrainIl(a) => train_il(a),
        Cmd::TrainRl(a) => train_rl(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::ExportMetrics(a) => export_metrics(a),
    }
}

fn check_device(device: &str) -> Result<()> {
    if device != "cpu" {
        bail!("unsupported device '{device}'; only 'cpu' is available");
    }
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigMap> {
    match path {
        Some(p) => ConfigMap::load(p),
        None => Ok(ConfigMap::default()),
    }
}

const MODEL_KEYS: &[&str] = &[
    "input_size",
    "latent",
    "window",
    "sensor_dim",
    "action_dim",
    "use_attention",
    "sensor_embed",
];

fn model_config(cfg: &ConfigMap) -> Result<CarnetConfig> {
    let desk = CarnetConfig::desk();
    Ok(CarnetConfig {
        input_size: cfg.get_usize("input_size", desk.input_size)?,
        latent: cfg.get_usize("latent", desk.latent)?,
        window: cfg.get_usize("window", desk.window)?,
        sensor_dim: cfg.get_usize("sensor_dim", desk.sensor_dim)?,
        action_dim: cfg.get_usize("action_dim", desk.action_dim)?,
        use_attention: cfg.get_bool("use_attention", desk.use_attention)?,
        sensor_embed: cfg.get_usize("sensor_embed", desk.sensor_embed)?,
    })
}

fn echo_model_config(eff: &mut ConfigMap, mc: &CarnetConfig) {
    eff.set("input_size", mc.input_size);
    eff.set("latent", mc.latent);
    eff.set("window", mc.window);
    eff.set("sensor_dim", mc.sensor_dim);
    eff.set("action_dim", mc.action_dim);
    eff.set("use_attention", mc.use_attention);
    eff.set("sensor_embed", mc.sensor_embed);
}

fn model_config_from_echo(lines: &[(String, String)]) -> Result<CarnetConfig> {
    let mut cfg = ConfigMap::default();
    for (k, v) in lines {
        if MODEL_KEYS.contains(&k.as_str()) {
            cfg.set(k, v);
        }
    }
    for key in MODEL_KEYS {
        if cfg.get(key).is_none() {
            bail!("checkpoint config echo is missing '{key}'");
        }
    }
    model_config(&cfg)
}

fn il_features(s: &str) -> Result<IlFeatures> {
    match s {
        "carnet" => Ok(IlFeatures::Carnet),
        "ae" => Ok(IlFeatures::AeOnly),
        other => bail!("features must be 'carnet' or 'ae', got '{other}'"),
    }
}

fn il_features_from_echo(lines: &[(String, String)]) -> Result<IlFeatures> {
    match lines.iter().find(|(k, _)| k == "features") {
        Some((_, v)) => il_features(v),
        None => Ok(IlFeatures::Carnet),
    }
}

fn ckpt_config_lines(eff: &ConfigMap) -> Vec<(String, String)> {
    eff.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Persist the fully resolved configuration before any work happens.
fn write_effective(out: &Path, eff: &ConfigMap) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    std::fs::write(out.join("config_effective.txt"), eff.to_text())
        .context("writing config_effective.txt")?;
    Ok(())
}

fn train_config(cfg: &ConfigMap, seed: u64, default_epochs: usize) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        epochs: cfg.get_usize("epochs", default_epochs)?,
        batch_size: cfg.get_usize("batch_size", d.batch_size)?,
        lr: cfg.get_f64("lr", d.lr)?,
        patience: cfg.get_usize("patience", d.patience)?,
        seed,
    })
}

fn echo_train_config(eff: &mut ConfigMap, tc: &TrainConfig) {
    eff.set("epochs", tc.epochs);
    eff.set("batch_size", tc.batch_size);
    eff.set("lr", tc.lr);
    eff.set("patience", tc.patience);
    eff.set("seed", tc.seed);
}

fn load_dataset(cfg: &ConfigMap) -> Result<(PathBuf, Dataset)> {
    let dir = PathBuf::from(cfg.require("data")?);
    let ds = Dataset::load(&dir)?;
    Ok((dir, ds))
}

const TRAIN_KEYS: &[&str] = &["data", "epochs", "batch_size", "lr", "patience"];

fn generate_data(a: RunArgs) -> Result<(), CliError> {
    check_device(&a.device).config_err()?;
    let cfg = load_config(&a.config).config_err()?;
    cfg.check_keys(&["n_steps", "window"]).config_err()?;
    let n_steps = cfg.get_usize("n_steps", 20_000).config_err()?;
    let window = cfg.get_usize("window", 4).config_err()?;
    if window < 2 || n_steps < window {
        return Err(CliError::Config(anyhow!(
            "need window ≥ 2 and n_steps ≥ window, got {n_steps}/{window}"
        )));
    }
    let mut eff = ConfigMap::default();
    eff.set("n_steps", n_steps);
    eff.set("window", window);
    eff.set("seed", a.seed);
    write_effective(&a.out, &eff).runtime_err()?;

    let ds = Dataset::generate(n_steps, window, a.seed);
    ds.save(&a.out.join("dataset")).runtime_err()?;
    println!(
        "wrote {} episodes / {} windows to {}",
        ds.episodes.len(),
        ds.windows.len(),
        a.out.join("dataset").display()
    );
    Ok(())
}

fn pretrain_ae(a: RunArgs) -> Result<(), CliError> {
    check_device(&a.device).config_err()?;
    let cfg = load_config(&a.config).config_err()?;
    cfg.check_keys(&[TRAIN_KEYS, MODEL_KEYS].concat()).config_err()?;
    let (_, ds) = load_dataset(&cfg).config_err()?;
    let mc = model_config(&cfg).config_err()?;
    let model = Carnet::new(mc.clone()).map_err(|e| CliError::Config(e.into()))?;
    let tc = train_config(&cfg, a.seed, 10).config_err()?;

    let mut eff = ConfigMap::default();
    eff.set("data", cfg.require("data").config_err()?);
    echo_train_config(&mut eff, &tc);
    echo_model_config(&mut eff, &mc);
    write_effective(&a.out, &eff).runtime_err()?;

    let mut mw =
        MetricsWriter::create(&a.out.join("metrics.csv"), &format!("pretrain-s{}", a.seed))
            .runtime_err()?;
    let (params, curve) = pretrain_autoencoder(&ds, &model, &tc, Some(&mut mw)).runtime_err()?;
    ckpt::save(&a.out.join("pretrain.ckpt"), &params, &ckpt_config_lines(&eff)).runtime_err()?;
    if let Some((tr, va)) = curve.last() {
        println!("pretrain done: train loss {tr:.6}, val loss {va:.6}");
    }
    Ok(())
}

fn load_backbone(
    path: &str,
    model: &Carnet,
    reference: &Params<f32>,
) -> Result<(Params<f32>, CarnetConfig)> {
    let (params, lines) = ckpt::load::<f32>(Path::new(path))?;
    let mc = model_config_from_echo(&lines)?;
    if mc.input_size != model.cfg.input_size || mc.latent != model.cfg.latent {
        bail!(
            "checkpoint model ({}px, latent {}) does not match run config ({}px, latent {})",
            mc.input_size,
            mc.latent,
            model.cfg.input_size,
            model.cfg.latent
        );
    }
    // the checkpoint may lack the controller; check only what it carries
    let mut merged = reference.clone();
    for (name, t) in params.iter() {
        match merged.get_mut(name) {
            Some(slot) => {
                if slot.shape != t.shape {
                    bail!(
                        "parameter '{name}': checkpoint shape {:?} vs model shape {:?}",
                        t.shape,
                        slot.shape
                    );
                }
                *slot = t.clone();
            }
            None => bail!("checkpoint parameter '{name}' is unknown to this model"),
        }
    }
    Ok((merged, mc))
}

fn train_carnet(a: RunArgs) -> Result<(), CliError> {
    check_device(&a.device).config_err()?;
    let cfg = load_config(&a.config).config_err()?;
    cfg.check_keys(&[TRAIN_KEYS, MODEL_KEYS, &["init"]].concat())
        .config_err()?;
    let (_, ds) = load_dataset(&cfg).config_err()?;
    let mc = model_config(&cfg).config_err()?;
    let model = Carnet::new(mc.clone()).map_err(|e| CliError::Config(e.into()))?;
    let tc = train_config(&cfg, a.seed, 10).config_err()?;
    let fresh = init_params(&model, a.seed);
    let params = match cfg.get("init") {
        Some(p) => load_backbone(p, &model, &fresh).config_err()?.0,
        None => fresh,
    };

    let mut eff = ConfigMap::default();
    eff.set("data", cfg.require("data").config_err()?);
    if let Some(p) = cfg.get("init") {
        eff.set("init", p);
    }
    echo_train_config(&mut eff, &tc);
    echo_model_config(&mut eff, &mc);
    write_effective(&a.out, &eff).runtime_err()?;

    let mut mw =
        MetricsWriter::create(&a.out.join("metrics.csv"), &format!("carnet-s{}", a.seed))
            .runtime_err()?;
    let (params, curve) = train_ensemble(
        &ds,
        &model,
        params,
        &tc,
        &[Split::Train],
        &[Split::Val],
        Some(&mut mw),
    )
    .runtime_err()?;
    ckpt::save(&a.out.join("carnet.ckpt"), &params, &ckpt_config_lines(&eff)).runtime_err()?;
    if let Some(last) = curve.last() {
        println!(
            "carnet done: total {:.6} (recon {:.6}, pred {:.6}, latent {:.6}), val {:.6}",
            last.total, last.recon, last.pred, last.latent, last.val_total
        );
    }
    Ok(())
}

fn train_il(a: RunArgs) -> Result<(), CliError> {
    check_device(&a.device).config_err()?;
    let cfg = load_config(&a.config).config_err()?;
    cfg.check_keys(&[TRAIN_KEYS, MODEL_KEYS, &["backbone", "joint", "features"]].concat())
        .config_err()?;
    let (_, ds) = load_dataset(&cfg).config_err()?;
    let mc = model_config(&cfg).config_err()?;
    let model = Carnet::new(mc.clone()).map_err(|e| CliError::Config(e.into()))?;
    let tc = train_config(&cfg, a.seed, 5)?;
    let joint = cfg.get_bool("joint", true).config_err()?;
    let features = il_features(cfg.get("features").as_deref().unwrap_or("carnet")).config_err()?;
    let fresh = init_params(&model, a.seed);
    let backbone = match cfg.get("backbone") {
        Some(p) => load_backbone(p, &model, &fresh).config_err()?.0,
        None => fresh,
    };

    let mut eff = ConfigMap::default();
    eff.set("data", cfg.require("data").config_err()?);
    if let Some(p) = cfg.get("backbone") {
        eff.set("backbone", p);
    }
    eff.set("joint", joint);
    eff.set(
        "features",
        match features {
            IlFeatures::Carnet => "carnet",
            IlFeatures::AeOnly => "ae",
        },
    );
    echo_train_config(&mut eff, &tc);
    echo_model_config(&mut eff, &mc);
    write_effective(&a.out, &eff).runtime_err()?;

    let mut mw = MetricsWriter::create(&a.out.join("metrics.csv"), &format!("il-s{}", a.seed))
        .runtime_err()?;
    let (params, val_acc) =
        train_imitation(&ds, &model, &backbone, &tc, joint, features, Some(&mut mw))
            .runtime_err()?;
    let test_acc = evaluate_imitation(&ds, &model, &params, Split::Test, tc.batch_size, features)
        .runtime_err()?;
    ckpt::save(&a.out.join("il.ckpt"), &params, &ckpt_config_lines(&eff)).runtime_err()?;
    println!(
        "il done: val accuracy {:.2}%, test accuracy {:.2}%",
        100.0 * val_acc,
        100.0 * test_acc
    );
    Ok(())
}

fn train_rl(a: RunArgs) -> Result<(), CliError> {
    check_device(&a.device).config_err()?;
    let cfg = load_config(&a.config).config_err()?;
    let rl_keys = [
        "backbone",
        "training_steps",
        "buffer_capacity",
        "batch_size",
        "lr",
        "gamma",
        "alpha",
        "beta0",
        "eps_start",
        "eps_end",
        "eps_frac",
        "target_sync",
        "learn_start",
        "eval_every",
        "select_episodes",
        "eval_episodes",
    ];
    cfg.check_keys(&[MODEL_KEYS, &rl_keys].concat()).config_err()?;
    let mc = model_config(&cfg).config_err()?;
    let model = Carnet::new(mc.clone()).map_err(|e| CliError::Config(e.into()))?;
    let d = DqnConfig::default();
    let dc = (|| -> Result<DqnConfig> {
        Ok(DqnConfig {
            training_steps: cfg.get_usize("training_steps", d.training_steps)?,
            buffer_capacity: cfg.get_usize("buffer_capacity", d.buffer_capacity)?,
            batch_size: cfg.get_usize("batch_size", d.batch_size)?,
            lr: cfg.get_f64("lr", d.lr)?,
            gamma: cfg.get_f64("gamma", d.gamma)?,
            alpha: cfg.get_f64("alpha", d.alpha)?,
            beta0: cfg.get_f64("beta0", d.beta0)?,
            eps_start: cfg.get_f64("eps_start", d.eps_start)?,
            eps_end: cfg.get_f64("eps_end", d.eps_end)?,
            eps_frac: cfg.get_f64("eps_frac", d.eps_frac)?,
            target_sync: cfg.get_usize("target_sync", d.target_sync)?,
            learn_start: cfg.get_usize("learn_start", d.learn_start)?,
            eval_every: cfg.get_usize("eval_every", d.eval_every)?,
            select_episodes: cfg.get_usize("select_episodes", d.select_episodes)?,
            eval_episodes: cfg.get_usize("eval_episodes", d.eval_episodes)?,
            seed: a.seed,
        })
    })()
    .config_err()?;
    let fresh = init_params(&model, a.seed);
    let backbone = match cfg.get("backbone") {
        Some(p) => load_backbone(p, &model, &fresh).config_err()?.0,
        None => fresh,
    };

    let mut eff = ConfigMap::default();
    if let Some(p) = cfg.get("backbone") {
        eff.set("backbone", p);
    }
    eff.set("training_steps", dc.training_steps);
    eff.set("buffer_capacity", dc.buffer_capacity);
    eff.set("batch_size", dc.batch_size);
    eff.set("lr", dc.lr);
    eff.set("gamma", dc.gamma);
    eff.set("alpha", dc.alpha);
    eff.set("beta0", dc.beta0);
    eff.set("eps_start", dc.eps_start);
    eff.set("eps_end", dc.eps_end);
    eff.set("eps_frac", dc.eps_frac);
    eff.set("target_sync", dc.target_sync);
    eff.set("learn_start", dc.learn_start);
    eff.set("eval_every", dc.eval_every);
    eff.set("select_episodes", dc.select_episodes);
    eff.set("eval_episodes", dc.eval_episodes);
    eff.set("seed", a.seed);
    echo_model_config(&mut eff, &mc);
    write_effective(&a.out, &eff).runtime_err()?;

    let mut mw = MetricsWriter::create(&a.out.join("metrics.csv"), &format!("rl-s{}", a.seed))
        .runtime_err()?;
    let out = train_dqn(&model, &backbone, &dc, Some(&mut mw)).runtime_err()?;
    let (rand_mean, rand_std) =
        random_policy_reward(&model, &backbone, dc.eval_episodes, a.seed).runtime_err()?;
    ckpt::save(&a.out.join("dqn.ckpt"), &out.params, &ckpt_config_lines(&eff)).runtime_err()?;
    println!(
        "rl done: greedy reward {:.2} ± {:.2}, random baseline {:.2} ± {:.2}",
        out.eval_mean, out.eval_std, rand_mean, rand_std
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    check_device(&a.device).config_err()?;
    let cfg = load_config(&a.config).config_err()?;
    cfg.check_keys(&["data", "batch_size"]).config_err()?;
    let split = Split::parse(&a.split)
        .ok_or_else(|| CliError::Config(anyhow!("unknown split '{}'", a.split)))?;
    let (_, ds) = load_dataset(&cfg).config_err()?;
    let batch_size = cfg.get_usize("batch_size", 64).config_err()?;

    let mut accs = Vec::with_capacity(a.checkpoint.len());
    for path in &a.checkpoint {
        let (params, lines) = ckpt::load::<f32>(path).config_err()?;
        let mc = model_config_from_echo(&lines).config_err()?;
        let features = il_features_from_echo(&lines).config_err()?;
        let model = Carnet::new(mc).map_err(|e| CliError::Config(e.into()))?;
        let acc = evaluate_imitation(&ds, &model, &params, split, batch_size, features)
            .runtime_err()?;
        accs.push(100.0 * acc);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std = (accs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    println!("accuracy {mean:.2} ± {std:.2} ({} on {} checkpoints)", a.split, accs.len());
    Ok(())
}

fn export_metrics(a: ExportArgs) -> Result<(), CliError> {
    let mut merged = String::from(HEADER);
    merged.push('\n');
    for path in &a.inputs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .config_err()?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == HEADER => {}
            other => {
                return Err(CliError::Config(anyhow!(
                    "{}: unexpected header '{}'",
                    path.display(),
                    other.unwrap_or("")
                )))
            }
        }
        for line in lines {
            merged.push_str(line);
            merged.push('\n');
        }
    }
    match &a.out {
        Some(p) => std::fs::write(p, merged)
            .with_context(|| format!("writing {}", p.display()))
            .runtime_err()?,
        None => print!("{merged}"),
    }
    Ok(())
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}
