//! `emofuse` command-line entry point.

mod commands;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use emofuse::{Error, ErrorCategory, Result};

use manifest::RunManifest;
use settings::{Resolved, Setting};

type Runner = fn(&Resolved, &Path, &mut RunManifest) -> Result<()>;

const COMMANDS: [(&str, u8, &str, Runner); 6] = [
    ("gen-data", settings::GEN, "Write a synthetic labeled dataset", commands::gen_data),
    ("prepare", settings::PREPARE, "Fit the speech codebook and text vocabulary", commands::prepare),
    ("pretrain", settings::PRETRAIN, "Masked-LM pretraining of one encoder", commands::pretrain),
    ("finetune", settings::FINETUNE, "Train a fusion model on labeled data", commands::finetune),
    ("evaluate", settings::EVALUATE, "Score a trained model on one split", commands::evaluate),
    ("ablate", settings::ABLATE, "Run the fusion and freezing grid over several seeds", commands::ablate),
];

fn setting_arg(s: &Setting, defaults: &Resolved) -> Arg {
    let arg = Arg::new(s.key).long(s.flag).help(s.help);
    if s.boolean {
        return arg.action(ArgAction::SetTrue);
    }
    let default = (s.get)(defaults);
    let arg = arg.value_name("VALUE").action(ArgAction::Set);
    if default.is_empty() {
        arg
    } else {
        arg.default_value(default)
    }
}

fn cli() -> Command {
    let defaults = Resolved::default();
    let table = settings::table();
    let mut cmd = Command::new("emofuse")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Speech and text emotion recognition with discrete speech tokens")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value file or run manifest; command-line flags take precedence"),
        )
        .arg(
            Arg::new("out-dir")
                .long("out-dir")
                .global(true)
                .value_name("DIR")
                .env("EMOFUSE_OUT")
                .default_value("emofuse-out")
                .help("Directory for every output file"),
        );
    for (name, scope, about, _) in COMMANDS {
        let mut sub = Command::new(name).about(about);
        for s in table.iter().filter(|s| s.scope & scope != 0) {
            sub = sub.arg(setting_arg(s, &defaults));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn explicit_pairs(m: &ArgMatches, scope: u8) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for s in settings::table().iter().filter(|s| s.scope & scope != 0) {
        if m.value_source(s.key) != Some(ValueSource::CommandLine) {
            continue;
        }
        let v = if s.boolean {
            m.get_flag(s.key).to_string()
        } else {
            m.get_one::<String>(s.key).cloned().unwrap_or_default()
        };
        pairs.push((s.key.to_string(), v));
    }
    pairs
}

fn run(name: &str, scope: u8, runner: Runner, m: &ArgMatches) -> Result<()> {
    let mut r = Resolved::default();
    if let Some(path) = m.get_one::<String>("config") {
        let from_file = settings::read_config(Path::new(path))?;
        let table = settings::table();
        // known keys owned by other commands are skipped, so one file can serve every command
        let pairs: Vec<_> = from_file
            .into_iter()
            .filter(|(k, _)| table.iter().find(|s| s.key == k).is_none_or(|s| s.scope & scope != 0))
            .collect();
        settings::apply(&mut r, &pairs)?;
    }
    settings::apply(&mut r, &explicit_pairs(m, scope))?;
    let out = PathBuf::from(m.get_one::<String>("out-dir").expect("defaulted"));
    std::fs::create_dir_all(&out).map_err(|e| Error::Input(format!("cannot create {}: {e}", out.display())))?;
    let mut manifest = RunManifest::new(name, r.pipeline.seed, settings::snapshot(&r, scope));
    runner(&r, &out, &mut manifest)?;
    let path = manifest.finish(&out)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let (_, scope, _, runner) = COMMANDS.iter().find(|c| c.0 == name).expect("registered");
    match run(name, *scope, *runner, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Input => 2,
                ErrorCategory::Numeric => 3,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_valid() {
        cli().debug_assert();
    }
}
