//! Batch command-line front end. Exit codes: 0 success, 1 validation or
//! usage error, 2 I/O error.

use clap::{Args, Parser, Subcommand};
use energyrank::checkpoint::{config_hash, Checkpoint};
use energyrank::datagen::{gen_labeled, gen_unlabeled_pair, GenConfig};
use energyrank::dataset::{read_jsonl_path, write_jsonl_path};
use energyrank::error::Error;
use energyrank::evaluator::bucketize;
use energyrank::featurizer::FeaturizerSalts;
use energyrank::losses::PhiKind;
use energyrank::msdae::{pretrain, CorruptionConfig, Msdae, PretrainConfig};
use energyrank::pipeline::{
    empty_meta, featurize_intents, msdae_from_checkpoint, msdae_to_checkpoint, train_pipeline,
    Pipeline,
};
use energyrank::stats::{mean_ci95, welch_t_test};
use energyrank::trainer::{LossParadigm, TrainConfig};
use energyrank::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "energyrank", version, about = "Energy-based intent ranking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled train/validation/test splits and optional P/Q sets
    GenData(GenDataArgs),
    /// Pretrain the multisource denoising autoencoder
    Pretrain(PretrainArgs),
    /// Train the full ranker (pretraining included unless --dae is given)
    Train(TrainArgs),
    /// Error rate of a trained model on a labeled set
    Evaluate(EvaluateArgs),
    /// Robustness M between top-score distributions on two sets
    Robustness(RobustnessArgs),
    /// Numerical gradient verification of the model stack
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgsCommon {
    #[arg(long, env = "ERNK_SEED", default_value_t = 0)]
    seed: u64,
    /// Multiplier on the default split sizes (12,000/4,000/8,000)
    #[arg(long, env = "ERNK_SCALE", default_value_t = 1.0)]
    scale: f64,
    /// Information-state correlation strength in [0,1]
    #[arg(long, env = "ERNK_RHO", default_value_t = 0.8)]
    rho: f64,
    #[arg(long, default_value_t = 9.0)]
    mean_intents: f64,
    #[arg(long, default_value_t = 0.41)]
    first_error: f64,
    /// Score temperature applied to the shifted set Q
    #[arg(long, default_value_t = 1.3)]
    tau: f64,
    /// Score offset applied to Q
    #[arg(long, default_value_t = 0.08)]
    delta: f64,
    /// Per-token drift probability in Q
    #[arg(long, default_value_t = 0.15)]
    token_drift: f64,
}

impl GenArgsCommon {
    fn to_config(&self) -> GenConfig {
        GenConfig {
            n_requests: 1,
            mean_intents: self.mean_intents,
            rho: self.rho,
            first_error_target: self.first_error,
            tau: self.tau,
            delta: self.delta,
            token_drift: self.token_drift,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    gen: GenArgsCommon,
    /// Output directory for train/validation/test JSONL files
    #[arg(long, env = "ERNK_OUT", default_value = ".")]
    out: PathBuf,
    /// Also write p.jsonl / q.jsonl at this fraction of 80,000 requests
    #[arg(long)]
    unlabeled_scale: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Labeled training set (intents are used, labels ignored)
    #[arg(long, env = "ERNK_DATA")]
    data: PathBuf,
    #[arg(long, env = "ERNK_OUT")]
    out: PathBuf,
    /// Per-epoch mean loss log (one JSON record per line)
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, env = "ERNK_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: u32,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Disable the affine corruption (masking noise is kept)
    #[arg(long)]
    no_affine_noise: bool,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, env = "ERNK_TRAIN")]
    train: PathBuf,
    #[arg(long, env = "ERNK_VALID")]
    valid: PathBuf,
    /// Optional held-out set reported after training
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, env = "ERNK_OUT")]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Reuse a pretrained autoencoder checkpoint instead of pretraining
    #[arg(long)]
    dae: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss, default_value = "pairwise")]
    loss: LossParadigm,
    #[arg(long, value_parser = parse_phi, default_value = "lf")]
    phi: PhiKind,
    #[arg(long)]
    no_affine_noise: bool,
    #[arg(long, env = "ERNK_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 150)]
    epochs: u32,
    #[arg(long, default_value_t = 20)]
    pretrain_epochs: u32,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Repeat training over N seeds and report mean +/- 95% CI
    #[arg(long, default_value_t = 1)]
    runs: u32,
    /// Second configuration as comma-separated overrides
    /// (loss=..., phi=..., no-affine-noise); adds a two-sided t-test
    #[arg(long)]
    vs: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, env = "ERNK_MODEL")]
    model: PathBuf,
    #[arg(long, env = "ERNK_DATA")]
    data: PathBuf,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long, env = "ERNK_MODEL")]
    model: PathBuf,
    #[arg(long)]
    p: PathBuf,
    #[arg(long)]
    q: PathBuf,
    /// Write 201-point density grids as two-column text files with this
    /// prefix (suffixes `.p.txt` / `.q.txt`)
    #[arg(long)]
    pdf_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, env = "ERNK_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_loss(s: &str) -> std::result::Result<LossParadigm, String> {
    match s {
        "pairwise" => Ok(LossParadigm::Pairwise),
        "listwise" => Ok(LossParadigm::Listwise),
        other => Err(format!("unknown loss {other:?} (expected pairwise|listwise)")),
    }
}

fn parse_phi(s: &str) -> std::result::Result<PhiKind, String> {
    PhiKind::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage text on stderr, exit 1 for unknown flags per contract
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) => {
            eprintln!("i/o error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => do_pretrain(a),
        Command::Train(a) => do_train(a),
        Command::Evaluate(a) => do_evaluate(a),
        Command::Robustness(a) => do_robustness(a),
        Command::Gradcheck(a) => do_gradcheck(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = a.gen.to_config();
    std::fs::create_dir_all(&a.out)?;
    let splits = gen_labeled(&cfg, a.gen.scale)?;
    write_jsonl_path(&a.out.join("train.jsonl"), &splits.train)?;
    write_jsonl_path(&a.out.join("validation.jsonl"), &splits.validation)?;
    write_jsonl_path(&a.out.join("test.jsonl"), &splits.test)?;
    println!(
        "wrote {} train / {} validation / {} test requests to {}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        a.out.display()
    );
    if let Some(us) = a.unlabeled_scale {
        let (p, q) = gen_unlabeled_pair(&cfg, us)?;
        write_jsonl_path(&a.out.join("p.jsonl"), &p)?;
        write_jsonl_path(&a.out.join("q.jsonl"), &q)?;
        println!("wrote {} P + {} Q unlabeled requests", p.len(), q.len());
    }
    Ok(())
}

fn corruption_for(no_affine: bool) -> CorruptionConfig {
    if no_affine {
        CorruptionConfig::disabled()
    } else {
        CorruptionConfig::default()
    }
}

fn write_metric_lines<S: serde::Serialize>(path: &Path, lines: &[S]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for l in lines {
        let s = serde_json::to_string(l).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{s}")?;
    }
    Ok(())
}

fn do_pretrain(a: PretrainArgs) -> Result<()> {
    let records = read_jsonl_path(&a.data)?;
    let salts = FeaturizerSalts::default();
    let triples = featurize_intents(&records, salts)?;
    let cfg = PretrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        base_lr: a.lr,
        corruption: corruption_for(a.no_affine_noise),
        ..Default::default()
    };
    let mut msdae = Msdae::<f32>::init(&mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let curve = pretrain(&mut msdae, &triples, &cfg)?;
    if let Some(m) = &a.metrics {
        let lines: Vec<BTreeMap<&str, f64>> = curve
            .iter()
            .enumerate()
            .map(|(e, &l)| BTreeMap::from([("epoch", e as f64), ("train_loss", l)]))
            .collect();
        write_metric_lines(m, &lines)?;
    }
    let mut meta = empty_meta();
    meta.seed = a.seed;
    meta.epoch = a.epochs;
    meta.config_hash = config_hash(
        &serde_json::to_string(&cfg).map_err(|e| Error::Format(e.to_string()))?,
    );
    if let Some(&last) = curve.last() {
        meta.metrics.insert("final_train_loss".to_string(), last);
    }
    msdae_to_checkpoint(&msdae, salts, meta).save_path(&a.out)?;
    println!(
        "pretrained {} epochs on {} intents, final loss {:.4}",
        a.epochs,
        triples.len(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

struct NamedConfig {
    label: String,
    loss: LossParadigm,
    phi: PhiKind,
    no_affine_noise: bool,
}

fn apply_overrides(base: &TrainArgs, overrides: &str) -> Result<NamedConfig> {
    let mut cfg = NamedConfig {
        label: overrides.to_string(),
        loss: base.loss,
        phi: base.phi,
        no_affine_noise: base.no_affine_noise,
    };
    for part in overrides.split(',') {
        let part = part.trim();
        match part.split_once('=') {
            Some(("loss", v)) => cfg.loss = parse_loss(v).map_err(Error::Validation)?,
            Some(("phi", v)) => cfg.phi = parse_phi(v).map_err(Error::Validation)?,
            None if part == "no-affine-noise" => cfg.no_affine_noise = true,
            _ => {
                return Err(Error::validation(format!(
                    "bad override {part:?} (expected loss=..., phi=..., no-affine-noise)"
                )))
            }
        }
    }
    Ok(cfg)
}

fn train_once(
    a: &TrainArgs,
    named: &NamedConfig,
    seed: u64,
    train: &[energyrank::dataset::RequestRecord],
    valid: &[energyrank::dataset::RequestRecord],
) -> Result<(Pipeline, energyrank::trainer::FitReport)> {
    let salts = FeaturizerSalts::default();
    let cfg = TrainConfig {
        max_epochs: a.epochs,
        base_lr: a.lr,
        seed,
        loss: named.loss,
        phi: named.phi,
        ..Default::default()
    };
    if let Some(dae_path) = &a.dae {
        let ck = Checkpoint::load_path(dae_path)?;
        if ck.meta.salts != salts {
            return Err(Error::Compatibility(
                "autoencoder checkpoint salts differ from configured salts".to_string(),
            ));
        }
        let msdae = msdae_from_checkpoint(&ck)?;
        let (pipe, report) =
            energyrank::pipeline::train_ranker_stage(msdae, train, valid, salts, &cfg)?;
        Ok((pipe, report))
    } else {
        let pre = PretrainConfig {
            epochs: a.pretrain_epochs,
            seed,
            corruption: corruption_for(named.no_affine_noise),
            ..Default::default()
        };
        let (pipe, _, report) = train_pipeline(train, valid, salts, &pre, &cfg)?;
        Ok((pipe, report))
    }
}

fn do_train(a: TrainArgs) -> Result<()> {
    let train = read_jsonl_path(&a.train)?;
    let valid = read_jsonl_path(&a.valid)?;
    let test = a.test.as_ref().map(|p| read_jsonl_path(p)).transpose()?;
    let base = NamedConfig {
        label: "base".to_string(),
        loss: a.loss,
        phi: a.phi,
        no_affine_noise: a.no_affine_noise,
    };
    if a.runs == 0 {
        return Err(Error::validation("--runs must be at least 1"));
    }

    let run_config = |named: &NamedConfig| -> Result<(Vec<f64>, Option<(Pipeline, energyrank::trainer::FitReport)>)> {
        let mut errs = Vec::with_capacity(a.runs as usize);
        let mut first = None;
        for r in 0..a.runs {
            let seed = a.seed.wrapping_add(r as u64);
            let (pipe, report) = train_once(&a, named, seed, &train, &valid)?;
            let err = match &test {
                Some(t) => pipe.evaluate(t)?.error_rate,
                None => report.best_validation_error,
            };
            errs.push(err);
            if first.is_none() {
                first = Some((pipe, report));
            }
        }
        Ok((errs, first))
    };

    let (errs, first) = run_config(&base)?;
    let (pipe, report) = first.expect("at least one run");
    if let Some(m) = &a.metrics {
        write_metric_lines(m, &report.metrics)?;
    }
    let mut meta = empty_meta();
    meta.seed = a.seed;
    meta.epoch = report.best_epoch;
    meta.config_hash = config_hash(&format!(
        "{:?}/{:?}/{}/{}/{}",
        base.loss, base.phi, base.no_affine_noise, a.epochs, a.lr
    ));
    meta.metrics
        .insert("best_validation_error".to_string(), report.best_validation_error);
    pipe.to_checkpoint(meta).save_path(&a.out)?;

    let label = if test.is_some() { "test error" } else { "validation error" };
    if a.runs == 1 {
        println!("{label}: {:.4}", errs[0]);
    } else {
        let ci = mean_ci95(&errs)?;
        println!(
            "{label} over {} runs: {:.4} +/- {:.4} (95% CI)",
            a.runs, ci.mean, ci.half_width
        );
    }

    if let Some(vs) = &a.vs {
        let other = apply_overrides(&a, vs)?;
        let (errs_b, _) = run_config(&other)?;
        if a.runs < 2 {
            return Err(Error::validation("--vs needs --runs >= 2 for a t-test"));
        }
        let ci_b = mean_ci95(&errs_b)?;
        let t = welch_t_test(&errs, &errs_b)?;
        println!(
            "{label} [{}]: {:.4} +/- {:.4} (95% CI)",
            other.label, ci_b.mean, ci_b.half_width
        );
        println!("two-sided t-test: t = {:.3}, p = {:.4}", t.t, t.p_value);
    }
    Ok(())
}

fn do_evaluate(a: EvaluateArgs) -> Result<()> {
    let pipe = Pipeline::from_checkpoint(&Checkpoint::load_path(&a.model)?)?;
    pipe.check_compatibility(FeaturizerSalts::default())?;
    let records = read_jsonl_path(&a.data)?;
    let report = pipe.evaluate(&records)?;
    println!(
        "error rate: {:.4} over {} requests",
        report.error_rate, report.n_requests
    );
    Ok(())
}

fn do_robustness(a: RobustnessArgs) -> Result<()> {
    let pipe = Pipeline::from_checkpoint(&Checkpoint::load_path(&a.model)?)?;
    pipe.check_compatibility(FeaturizerSalts::default())?;
    let p = read_jsonl_path(&a.p)?;
    let q = read_jsonl_path(&a.q)?;
    if let Some(prefix) = &a.pdf_out {
        for (records, suffix) in [(&p, "p"), (&q, "q")] {
            let pdf = bucketize(&pipe.top_scores(records)?)?;
            let mut path = prefix.as_os_str().to_owned();
            path.push(format!(".{suffix}.txt"));
            let mut f = std::fs::File::create(PathBuf::from(path))?;
            for (x, d) in pdf.density_grid() {
                writeln!(f, "{x:.3} {d:.9}")?;
            }
        }
    }
    let m = pipe.robustness_run(&p, &q)?;
    println!("{m:.6}");
    Ok(())
}

fn do_gradcheck(a: GradcheckArgs) -> Result<()> {
    let report = energyrank::gradcheck::model_stack_report(a.seed)?;
    let mut ok = true;
    for (name, err) in &report {
        let tol = if name.starts_with("ebm") { 1e-3 } else { a.tolerance };
        let pass = *err <= tol;
        ok &= pass;
        println!("{name}: max rel err {err:.3e} ({})", if pass { "ok" } else { "FAIL" });
    }
    if !ok {
        return Err(Error::Contract("gradient check failed".to_string()));
    }
    Ok(())
}
