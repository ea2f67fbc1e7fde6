use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dali_lab::align::Metric;
use dali_lab::patching::{PatchMode, PatchPosition};
use dali_lab::report::{self, Context, ModelKind, RunConfig};
use dali_lab::Result;

#[derive(Parser)]
#[command(
    name = "dali-lab",
    version,
    about = "Cross-lingual alignment and activation patching on a demo transformer"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// English first, then the languages to compare, e.g. `eng,fra`.
    #[arg(long, global = true, value_delimiter = ',')]
    langs: Option<Vec<String>>,
    /// Overwrite existing corpus or model files.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the parallel task corpus and the generic sentences.
    GenCorpus,
    /// Build a model and write weights plus tokenizer.
    BuildModel {
        #[arg(long, value_enum, default_value = "demo")]
        kind: KindArg,
    },
    /// Score MCQA prompts and split ids into TS / TF.
    Eval,
    /// Alignment profiles and the TS-TF test.
    Align {
        #[arg(long, value_parser = parse_metric)]
        metric: Option<Metric>,
    },
    /// Residual-stream patching sweep.
    Patch {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_delimiter = ',', value_parser = parse_position)]
        positions: Option<Vec<PatchPosition>>,
    },
    /// Merge every artifact into report.json.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Demo,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Equivalent,
    Control,
    Both,
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    s.parse()
}

fn parse_position(s: &str) -> std::result::Result<PatchPosition, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<String> {
    let g = cli.global;
    let mut config = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = g.seed.unwrap_or(config.seed);
    config = config.with_seed(seed);
    match &cli.command {
        Command::Align { metric: Some(m) } => config.metrics = vec![*m],
        Command::Patch { mode, positions } => {
            if let Some(mode) = mode {
                config.patch.modes = match mode {
                    ModeArg::Equivalent => vec![PatchMode::Equivalent],
                    ModeArg::Control => vec![PatchMode::Control],
                    ModeArg::Both => vec![PatchMode::Equivalent, PatchMode::Control],
                };
            }
            if let Some(p) = positions {
                config.patch.positions = p.clone();
            }
        }
        _ => {}
    }
    let ctx = Context::new(config, g.out, g.langs, g.force)?;
    match cli.command {
        Command::GenCorpus => report::cmd_gen_corpus(&ctx).map(|p| report::describe(&p)),
        Command::BuildModel { kind } => {
            let kind = match kind {
                KindArg::Demo => ModelKind::Demo,
                KindArg::Random => ModelKind::Random,
            };
            report::cmd_build_model(&ctx, kind).map(|p| report::describe(&[p]))
        }
        Command::Eval => report::cmd_eval(&ctx).map(|rs| {
            rs.iter()
                .map(|r| {
                    format!(
                        "{}: acc {:.4} ({}/{}), {}: acc {:.4} ({}/{}), TS {}, TF {}, excluded {}\n",
                        r.eng.lang,
                        r.eng.accuracy,
                        r.eng.n_acc,
                        r.eng.n,
                        r.l2.lang,
                        r.l2.accuracy,
                        r.l2.n_acc,
                        r.l2.n,
                        r.ts_ids.len(),
                        r.tf_ids.len(),
                        r.excluded_ids.len()
                    )
                })
                .collect()
        }),
        Command::Align { .. } => report::cmd_align(&ctx, &ctx.config.metrics).map(|p| report::describe(&p)),
        Command::Patch { .. } => report::cmd_patch(&ctx).map(|p| report::describe(&p)),
        Command::Report => report::cmd_report(&ctx).map(|p| report::describe(&[p])),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads.unwrap_or(0))
        .build();
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(msg) => {
            print!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(report::exit_code(&e) as u8)
        }
    }
}
