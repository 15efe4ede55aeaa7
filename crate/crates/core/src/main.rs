use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcl::config::RunConfig;
use pcl::corpus::{dataset_stats, generate_synthetic, load_dataset, Splits, SyntheticSpec, TokenizeMode, Vocab};
use pcl::encoder::{load_checkpoint, save_checkpoint};
use pcl::error::{Error, Result};
use pcl::gradcheck;
use pcl::pretrain::{self, KnowledgeLexicon, PretrainInstance};
use pcl::report;
use pcl::trainer::{self, LossTag};

#[derive(Parser)]
#[command(name = "pcl", version, about = "Propensity-corrected loss for ordinal, imbalanced sentence-pair classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/dev/test_public split.
    GenData(GenDataArgs),
    /// Print dataset statistics.
    Stats(StatsArgs),
    /// Fine-tune an encoder and write checkpoint, vocabulary and history.
    Train(RunArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train every (loss, seed) combination and write a comparison table.
    Ablate(AblateArgs),
    /// Generate masked-language-model and sentence-order instances.
    MaskInstances(MaskArgs),
    /// Compare analytic and finite-difference encoder gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Label ratio as `a:b:c`.
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    s1_len: Option<f64>,
    #[arg(long)]
    s2_len: Option<f64>,
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "char")]
    tokenize: TokenizeMode,
}

/// Config file plus per-key overrides, shared by the training commands.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory (overrides `out_dir` and `PCL_OUT_DIR`).
    #[arg(long)]
    out: Option<String>,
    #[arg(long = "data.train")]
    data_train: Option<String>,
    #[arg(long = "data.dev")]
    data_dev: Option<String>,
    #[arg(long = "data.test")]
    data_test: Option<String>,
    #[arg(long = "data.lexicon")]
    data_lexicon: Option<String>,
    #[arg(long = "data.tokenize")]
    data_tokenize: Option<String>,
    #[arg(long = "train.epochs")]
    train_epochs: Option<String>,
    #[arg(long = "train.batch_size")]
    train_batch_size: Option<String>,
    #[arg(long = "train.lr")]
    train_lr: Option<String>,
    #[arg(long = "train.optimizer")]
    train_optimizer: Option<String>,
    #[arg(long = "train.beta1")]
    train_beta1: Option<String>,
    #[arg(long = "train.beta2")]
    train_beta2: Option<String>,
    #[arg(long = "train.adam_eps")]
    train_adam_eps: Option<String>,
    #[arg(long = "train.patience")]
    train_patience: Option<String>,
    #[arg(long = "loss.alpha")]
    loss_alpha: Option<String>,
    #[arg(long = "loss.epsilon")]
    loss_epsilon: Option<String>,
    #[arg(long = "loss.mode")]
    loss_mode: Option<String>,
    #[arg(long = "loss.scope")]
    loss_scope: Option<String>,
    #[arg(long = "loss.clamp")]
    loss_clamp: Option<String>,
    /// Condition-table entry as `t<y>p<y_hat>=C1|C2|C3`; repeatable.
    #[arg(long = "loss.table")]
    loss_table: Vec<String>,
    #[arg(long = "encoder.dim")]
    encoder_dim: Option<String>,
    #[arg(long = "encoder.layers")]
    encoder_layers: Option<String>,
    #[arg(long = "encoder.heads")]
    encoder_heads: Option<String>,
    #[arg(long = "encoder.ffn_dim")]
    encoder_ffn_dim: Option<String>,
    #[arg(long = "encoder.max_len")]
    encoder_max_len: Option<String>,
    #[arg(long = "encoder.dropout")]
    encoder_dropout: Option<String>,
    #[arg(long = "mask.rate")]
    mask_rate: Option<String>,
    #[arg(long = "mask.boost")]
    mask_boost: Option<String>,
}

impl ConfigArgs {
    /// File, then environment, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env();
        let pairs = [
            ("seed", &self.seed),
            ("out_dir", &self.out),
            ("data.train", &self.data_train),
            ("data.dev", &self.data_dev),
            ("data.test", &self.data_test),
            ("data.lexicon", &self.data_lexicon),
            ("data.tokenize", &self.data_tokenize),
            ("train.epochs", &self.train_epochs),
            ("train.batch_size", &self.train_batch_size),
            ("train.lr", &self.train_lr),
            ("train.optimizer", &self.train_optimizer),
            ("train.beta1", &self.train_beta1),
            ("train.beta2", &self.train_beta2),
            ("train.adam_eps", &self.train_adam_eps),
            ("train.patience", &self.train_patience),
            ("loss.alpha", &self.loss_alpha),
            ("loss.epsilon", &self.loss_epsilon),
            ("loss.mode", &self.loss_mode),
            ("loss.scope", &self.loss_scope),
            ("loss.clamp", &self.loss_clamp),
            ("encoder.dim", &self.encoder_dim),
            ("encoder.layers", &self.encoder_layers),
            ("encoder.heads", &self.encoder_heads),
            ("encoder.ffn_dim", &self.encoder_ffn_dim),
            ("encoder.max_len", &self.encoder_max_len),
            ("encoder.dropout", &self.encoder_dropout),
            ("mask.rate", &self.mask_rate),
            ("mask.boost", &self.mask_boost),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for entry in &self.loss_table {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::config("loss.table", format!("expected t<y>p<y_hat>=C<n>, got `{entry}`")))?;
            cfg.set(&format!("loss.table.{}", k.trim()), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file; defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "char")]
    tokenize: TokenizeMode,
    /// Directory for metrics.json and confusion.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Comma-separated loss tags: ls, pcl-additive, pcl-multiplicative.
    #[arg(long, value_delimiter = ',', default_value = "ls,pcl-multiplicative")]
    losses: Vec<LossTag>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "tiny")]
    model: String,
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Documents: one sentence per line, blank line between documents.
    #[arg(long)]
    docs: PathBuf,
    /// Number of epochs to generate, starting at epoch 0.
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    /// Vocabulary file; built from the documents when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    configs: usize,
    #[arg(long, default_value_t = 80)]
    coords: usize,
}

const GRAD_CHECK_THRESHOLD: f64 = 1e-5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::MaskInstances(a) => mask_instances(a),
        Command::GradCheck(a) => grad_check(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn parse_ratio(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::config("ratio", format!("expected a:b:c, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut r = [0.0; 3];
    for (x, p) in r.iter_mut().zip(parts) {
        *x = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(r)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        train_size: a.train_size.unwrap_or(d.train_size),
        dev_size: a.dev_size.unwrap_or(d.dev_size),
        test_size: a.test_size.unwrap_or(d.test_size),
        ratio: a.ratio.as_deref().map(parse_ratio).transpose()?.unwrap_or(d.ratio),
        s1_len: a.s1_len.unwrap_or(d.s1_len),
        s2_len: a.s2_len.unwrap_or(d.s2_len),
        vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
        ..d
    };
    let splits = generate_synthetic(&spec, a.seed)?;
    splits.write_dir(&a.out)?;
    for name in Splits::FILE_NAMES {
        println!("{}", a.out.join(name).display());
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let examples = load_dataset(&a.data)?;
    let s = dataset_stats(&examples, a.tokenize)?;
    print!("{}", s.render_table());
    println!("{}", serde_json::to_string(&s).map_err(|e| Error::Invalid(e.to_string()))?);
    Ok(())
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.write_effective(&cfg.out_dir)?;
    Ok(())
}

fn path_of(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("checked by require_files")
}

fn train(a: RunArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    cfg.require_files(&["data.train", "data.dev"])?;
    let train_set = load_dataset(path_of(&cfg.train_path))?;
    let dev_set = load_dataset(path_of(&cfg.dev_path))?;
    let test_set = cfg.test_path.as_deref().map(load_dataset).transpose()?;
    prepare_out_dir(&cfg)?;

    let tc = cfg.train_config();
    let out = trainer::train_with_observer(&tc, &train_set, &dev_set, |_| {})?;
    for e in &out.history.epochs {
        eprintln!(
            "epoch {:>3}  loss {:.4}  ls {:.4}  dev macro-F1 {:.2}  acc {:.2}{}",
            e.epoch,
            e.train_loss,
            e.train_ls,
            e.dev_macro_f1,
            e.dev_accuracy,
            if e.improved { "  *" } else { "" }
        );
    }
    let dir = &cfg.out_dir;
    save_checkpoint(&dir.join("model.ckpt"), &out.params)?;
    out.vocab.save(&dir.join("vocab.txt"))?;
    report::write_history(dir, &out.history)?;
    let scored = test_set.as_deref().unwrap_or(&dev_set);
    let m = trainer::evaluate(&out.params, &out.vocab, scored, tc.tokenize)?;
    report::write_metrics(dir, &m)?;
    println!(
        "best epoch {}  {} macro-F1 {:.2}  accuracy {:.2}  -> {}",
        out.history.best_epoch,
        if test_set.is_some() { "test" } else { "dev" },
        m.macro_f1,
        m.accuracy,
        dir.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let vocab_path = a.vocab.clone().unwrap_or_else(|| a.checkpoint.with_file_name("vocab.txt"));
    for p in [&a.checkpoint, &vocab_path, &a.data] {
        if !p.is_file() {
            return Err(Error::Invalid(format!("`{}` is not a readable file", p.display())));
        }
    }
    let params = load_checkpoint(&a.checkpoint, None)?;
    let vocab = Vocab::load(&vocab_path)?;
    if vocab.len() != params.config().vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            params.config().vocab_size
        )));
    }
    let examples = load_dataset(&a.data)?;
    let m = trainer::evaluate(&params, &vocab, &examples, a.tokenize)?;
    if let Some(dir) = &a.out {
        report::write_metrics(dir, &m)?;
    }
    print!("{}", m.confusion.render());
    println!("macro-F1 {:.2}  accuracy {:.2}", m.macro_f1, m.accuracy);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    cfg.require_files(&["data.train", "data.dev", "data.test"])?;
    if a.seeds.is_empty() || a.losses.is_empty() {
        return Err(Error::Invalid("need at least one seed and one loss".into()));
    }
    let splits = Splits {
        train: load_dataset(path_of(&cfg.train_path))?,
        dev: load_dataset(path_of(&cfg.dev_path))?,
        test_public: load_dataset(path_of(&cfg.test_path))?,
    };
    prepare_out_dir(&cfg)?;
    let (report, _) = trainer::ablate(&cfg.train_config(), &splits, &a.seeds, &a.losses, &a.model, a.jobs)?;
    report::write_ablation(&cfg.out_dir, &report)?;
    print!("{}", report.render_markdown());
    Ok(())
}

fn mask_instances(a: MaskArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    if !a.docs.is_file() {
        return Err(Error::config("docs", format!("`{}` is not a readable file", a.docs.display())));
    }
    if cfg.lexicon_path.is_some() {
        cfg.require_files(&["data.lexicon"])?;
    }
    if let Some(v) = &a.vocab {
        if !v.is_file() {
            return Err(Error::config("vocab", format!("`{}` is not a readable file", v.display())));
        }
    }
    let docs = pretrain::load_documents(&a.docs)?;
    let lexicon = match &cfg.lexicon_path {
        Some(p) => KnowledgeLexicon::load(p, cfg.tokenize)?,
        None => KnowledgeLexicon::empty(),
    };
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => pretrain::documents_vocab(&docs, cfg.tokenize),
    };
    prepare_out_dir(&cfg)?;
    if a.vocab.is_none() {
        vocab.save(&cfg.out_dir.join("vocab.txt"))?;
    }
    let pc = cfg.pretrain_config();
    for epoch in 0..a.epochs {
        let inst = pretrain::generate_epoch_instances(&docs, &lexicon, &vocab, &pc, epoch)?;
        let path = cfg.out_dir.join(format!("instances.epoch{epoch}.jsonl"));
        pretrain::write_instances(&path, &inst)?;
        let sop = inst.iter().filter(|i| matches!(i, PretrainInstance::Sop(_))).count();
        println!("{}  {} masked, {} order pairs", path.display(), inst.len() - sop, sop);
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let r = gradcheck::run_suite(a.seed, a.configs, a.coords)?;
    println!("checked {} coordinates over {} configs; max relative error {:.3e}", r.checked, r.configs.len(), r.max_rel_error);
    if r.max_rel_error < GRAD_CHECK_THRESHOLD {
        Ok(())
    } else {
        Err(Error::Invalid(format!("max relative error {:.3e} >= {GRAD_CHECK_THRESHOLD:e}", r.max_rel_error)))
    }
}
