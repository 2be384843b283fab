use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use fcnmt::cli;
use fcnmt::config::{RunConfig, KEYS};
use fcnmt::decoding::DecodeConfig;
use fcnmt::Result;

#[derive(Parser)]
#[command(
    name = "fcnmt",
    version,
    about = "Transformer translation with a learned future-cost objective"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model; writes best.ckpt, last.ckpt, metrics.tsv and eval.txt.
    Train(ConfigArgs),
    /// Train one model per lambda and write sweep.tsv.
    Sweep {
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write the synthetic train/dev/test corpora as TSV.
    Generate(ConfigArgs),
    /// Print the effective configuration.
    ShowConfig(ConfigArgs),
    /// Translate a file of source sentences, one per line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the beam expansion of every line here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam_size: usize,
        /// Same as --beam-size 1.
        #[arg(long, conflicts_with = "beam_size")]
        greedy: bool,
        #[arg(long, default_value_t = DecodeConfig::default().max_decode_len)]
        max_decode_len: usize,
        #[arg(long, default_value_t = 0.0)]
        length_penalty: f64,
    },
    /// Corpus BLEU, with a source-length breakdown when --src is given.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        src: Option<PathBuf>,
        /// Write a key = value report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// `--config FILE` plus one flag per configuration key.
struct ConfigArgs {
    file: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(self.file.as_deref(), &self.overrides)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut out = ConfigArgs {
            file: None,
            overrides: Vec::new(),
        };
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        if let Some(f) = m.get_one::<PathBuf>("config") {
            self.file = Some(f.clone());
        }
        for (key, _) in KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.overrides.push((key.to_string(), v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value configuration file; flags override it"),
        );
        KEYS.iter().fold(cmd, |cmd, (key, help)| {
            let mut arg = Arg::new(*key)
                .long(key.replace('_', "-"))
                .value_name("VALUE")
                .help(*help)
                .help_heading("Configuration")
                .overrides_with(*key);
            if *key == "max_steps" {
                arg = arg.visible_alias("steps");
            }
            cmd.arg(arg)
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut log = io::stderr();
    match cli.command {
        Cmd::Train(args) => {
            cli::cmd_train(&args.resolve()?, &mut log)?;
        }
        Cmd::Sweep { lambdas, config } => {
            cli::cmd_sweep(&config.resolve()?, &lambdas, &mut log)?;
        }
        Cmd::Generate(args) => {
            for p in cli::cmd_generate(&args.resolve()?)? {
                println!("{}", p.display());
            }
        }
        Cmd::ShowConfig(args) => {
            let cfg = args.resolve()?;
            print!("{}", cfg.to_text());
        }
        Cmd::Translate {
            checkpoint,
            input,
            output,
            trace,
            beam_size,
            greedy,
            max_decode_len,
            length_penalty,
        } => {
            let decode = DecodeConfig {
                beam_size: if greedy { 1 } else { beam_size },
                max_decode_len,
                length_penalty,
            };
            cli::cmd_translate(
                &checkpoint,
                &input,
                &output,
                &decode,
                trace.as_deref(),
                &mut log,
            )?;
        }
        Cmd::Evaluate {
            hyp,
            reference,
            src,
            report,
        } => {
            let mut out = io::stdout();
            cli::cmd_evaluate(
                &hyp,
                &reference,
                src.as_deref(),
                report.as_deref(),
                &mut out,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
