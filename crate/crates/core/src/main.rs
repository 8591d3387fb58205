use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use readmit::cohort::Split;
use readmit::config::RunConfig;
use readmit::pipeline::{ModelKind, Pipeline, PipelineError, Stage};

fn model_split_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("model")
            .long("model")
            .value_name("lstm|baseline")
            .value_parser(|s: &str| s.parse::<ModelKind>())
            .required(true),
    )
    .arg(
        Arg::new("split")
            .long("split")
            .value_name("train|validation|test")
            .value_parser(|s: &str| s.parse::<Split>())
            .default_value("test"),
    )
}

fn cli() -> Command {
    let mut cmd = Command::new("readmit")
        .about("Unplanned readmission prediction pipeline")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help("Every config key is also a flag: --<section>.<key> VALUE, e.g. --model.epochs 6 --model.oversample 0.20")
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .global(true)
                .help("TOML config; dotted-key flags override it"),
        )
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .short('q')
                .action(ArgAction::SetTrue)
                .global(true)
                .help("No progress output on stderr"),
        )
        .subcommand(Command::new("synth").about("Generate a synthetic event log"))
        .subcommand(Command::new("cohort").about("Label index admissions and split by patient"))
        .subcommand(Command::new("vocab").about("Build the token/feature vocabulary from the training split"))
        .subcommand(Command::new("train").about("Train the sequence model"))
        .subcommand(Command::new("train-baseline").about("Fit the TF-IDF logistic regression baseline"))
        .subcommand(model_split_args(Command::new("eval").about("Evaluate a trained model on a split")))
        .subcommand(model_split_args(Command::new("predict").about("Write per-example probabilities")))
        .subcommand(Command::new("gradcheck").about("Finite-difference gradient suites"))
        .subcommand(Command::new("all").about("synth, cohort, vocab, train, train-baseline, then eval both models on test"));
    for key in RunConfig::keys() {
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .global(true)
                .hide(true),
        );
    }
    cmd
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    RunConfig::keys()
        .into_iter()
        .filter_map(|k| m.get_one::<String>(&k).map(|v| (k, v.clone())))
        .collect()
}

fn stages(name: &str, sub: &ArgMatches) -> Vec<Stage> {
    let model_split = || {
        (
            *sub.get_one::<ModelKind>("model").expect("required"),
            *sub.get_one::<Split>("split").expect("defaulted"),
        )
    };
    match name {
        "synth" => vec![Stage::Synth],
        "cohort" => vec![Stage::Cohort],
        "vocab" => vec![Stage::Vocab],
        "train" => vec![Stage::Train],
        "train-baseline" => vec![Stage::TrainBaseline],
        "eval" => {
            let (model, split) = model_split();
            vec![Stage::Eval { model, split }]
        }
        "predict" => {
            let (model, split) = model_split();
            vec![Stage::Predict { model, split }]
        }
        "gradcheck" => vec![Stage::Gradcheck],
        "all" => vec![
            Stage::Synth,
            Stage::Cohort,
            Stage::Vocab,
            Stage::Train,
            Stage::TrainBaseline,
            Stage::Eval {
                model: ModelKind::Lstm,
                split: Split::Test,
            },
            Stage::Eval {
                model: ModelKind::Baseline,
                split: Split::Test,
            },
        ],
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn run(m: &ArgMatches) -> Result<(), PipelineError> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    // Global args are visible from the subcommand's matches.
    let cfg = RunConfig::load(sub.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides(sub))?;
    let pipeline = Pipeline::new(cfg).verbose(!sub.get_flag("quiet"));
    for stage in stages(name, sub) {
        let outcome = pipeline.run(stage)?;
        println!("{}", outcome.summary.trim_end());
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
