use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use distvl_core::data::write_jsonl;
use distvl_core::harness::{checkpoint, ellipse, hsd, retrieval, train};
use distvl_core::rng::streams;
use distvl_core::{Error, Model, RunConfig, SeededRng};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;

#[derive(Parser)]
#[command(name = "distvl", version, about = "Distribution-based vision-language pre-training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train and write metrics.jsonl and model.ckpt.
    Train(Common),
    /// Recall@K of a checkpoint on the test split, written to recall.json.
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the config's `checkpoint`, then `<out>/model.ckpt`.
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a freshly initialized model instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
    },
    /// Fit a 2-D head on test items and write ellipses.csv (and .svg).
    ExportEllipses {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Randomized Tukey HSD over a score CSV, written to hsd.csv.
    Hsd {
        #[command(flatten)]
        common: Common,
        /// Defaults to the config's `hsd.input`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the synthetic corpus as train.jsonl and test.jsonl. The seed
    /// replaces the corpus seed.
    GenCorpus(Common),
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> anyhow::Result<Self> {
        let cfg = RunConfig::from_path(&c.config)?;
        let seed = c.seed.unwrap_or(cfg.seed);
        let out = c.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        Ok(Self { cfg, seed, out })
    }

    fn checkpoint_path(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.cfg.checkpoint.clone()).unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    fn create(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.out.join(name);
        let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(BufWriter::new(f))
    }
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    let (model, _) = checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok(model)
}

fn cmd_train(c: &Common) -> anyhow::Result<()> {
    let ctx = Ctx::new(c)?;
    let (train_set, _) = train::load_splits(&ctx.cfg)?;
    let mut metrics = ctx.create("metrics.jsonl")?;
    let mut last: Option<u64> = None;
    let result = train::train(&ctx.cfg, ctx.seed, &train_set, |rec| {
        if !rec.loss_total.is_finite() {
            return Err(Error::NonFinite { op: "loss_total" });
        }
        train::write_record(&mut metrics, rec)?;
        last = Some(rec.step);
        if rec.step % 100 == 0 || rec.step + 1 == ctx.cfg.steps {
            eprintln!("step {:>5}  loss {:.4}  entropy {:.2}  tau {:.4}", rec.step, rec.loss_total, rec.mean_entropy, rec.tau);
        }
        Ok(())
    });
    metrics.flush()?;
    let model = match result {
        Ok(m) => m,
        Err(e @ Error::NonFinite { .. }) => {
            let last = last.map_or_else(|| "none".to_string(), |s| s.to_string());
            return Err(anyhow!(e).context(format!("training diverged; last valid step: {last}")));
        }
        Err(e) => return Err(e.into()),
    };
    let path = ctx.checkpoint_path(None);
    checkpoint::save(&model, ctx.cfg.steps, &path)?;
    eprintln!("wrote {} and {}", ctx.out.join("metrics.jsonl").display(), path.display());
    Ok(())
}

fn cmd_eval(c: &Common, ckpt: Option<PathBuf>, untrained: bool) -> anyhow::Result<()> {
    let ctx = Ctx::new(c)?;
    let model = if untrained {
        Model::new(ctx.cfg.model_config()?, ctx.seed, ctx.cfg.loss_config()?.log_tau_init)?
    } else {
        load_model(&ctx.checkpoint_path(ckpt))?
    };
    let (_, test) = train::load_splits(&ctx.cfg)?;
    let table = retrieval::evaluate(&model, &test, &ctx.cfg.loss_config()?, &ctx.cfg.recall_k)?;
    let mut w = ctx.create("recall.json")?;
    serde_json::to_writer(&mut w, &table)?;
    w.write_all(b"\n")?;
    w.flush()?;
    println!("{}", serde_json::to_string(&table)?);
    Ok(())
}

fn cmd_ellipses(c: &Common, ckpt: Option<PathBuf>) -> anyhow::Result<()> {
    let ctx = Ctx::new(c)?;
    let model = load_model(&ctx.checkpoint_path(ckpt))?;
    let (_, test) = train::load_splits(&ctx.cfg)?;
    let items = &test[..ctx.cfg.ellipse.items.min(test.len())];
    let head = ellipse::fit_head(&model, items, &ctx.cfg.ellipse, ctx.seed)?;
    let records = ellipse::export_records(&model, &head, items)?;
    let mut w = ctx.create("ellipses.csv")?;
    ellipse::write_csv(&mut w, &records)?;
    w.flush()?;
    if ctx.cfg.ellipse.svg {
        let mut w = ctx.create("ellipses.svg")?;
        ellipse::write_svg(&mut w, &records, ctx.cfg.data.concepts)?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_hsd(c: &Common, input: Option<PathBuf>) -> anyhow::Result<()> {
    let ctx = Ctx::new(c)?;
    let path = input
        .or_else(|| ctx.cfg.hsd.input.clone())
        .ok_or_else(|| Error::Config("no score file: pass --input or set hsd.input".into()))?;
    let f = File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
    let table = hsd::read_scores(f)?;
    let mut rng = SeededRng::new(ctx.seed, streams::HSD);
    let results = hsd::tukey_hsd(&table.scores, ctx.cfg.hsd.trials, &mut rng)?;
    let mut w = ctx.create("hsd.csv")?;
    hsd::write_results(&mut w, &table.systems, &results)?;
    w.flush()?;
    Ok(())
}

fn cmd_gen_corpus(c: &Common) -> anyhow::Result<()> {
    let mut ctx = Ctx::new(c)?;
    if let Some(seed) = c.seed {
        ctx.cfg.data.seed = seed;
    }
    let (train_set, test_set) = distvl_core::data::generate_splits(&ctx.cfg.data)?;
    write_jsonl(&ctx.out.join("train.jsonl"), &train_set)?;
    write_jsonl(&ctx.out.join("test.jsonl"), &test_set)?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::NonFinite { .. }) => EXIT_NON_FINITE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::EvalRetrieval { common, checkpoint, untrained } => cmd_eval(&common, checkpoint, untrained),
        Command::ExportEllipses { common, checkpoint } => cmd_ellipses(&common, checkpoint),
        Command::Hsd { common, input } => cmd_hsd(&common, input),
        Command::GenCorpus(c) => cmd_gen_corpus(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
