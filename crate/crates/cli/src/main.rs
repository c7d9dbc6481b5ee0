mod args;
mod commands;

use std::ffi::OsString;
use std::path::Path;
use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use args::Cli;

/// Outcome of a command that ran to completion.
pub enum Status {
    Success,
    CheckFailed,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(dicc_core::Error),
}

impl From<dicc_core::Error> for Failure {
    fn from(e: dicc_core::Error) -> Self {
        Failure::Core(e)
    }
}

/// Expands `--config FILE` into `--key value` flags placed right after the
/// subcommand, so flags given on the command line override the file.
fn expand_config(raw: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let strs: Vec<String> = raw.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(raw) };
    let cmd = Cli::command();
    let Some((pos, sub)) = strs
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s)))
    else {
        return Ok(raw);
    };
    let text = std::fs::read_to_string(Path::new(&path)).map_err(|e| format!("{path}: {e}"))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected key=value", n + 1))?;
        let key = k.trim().replace('_', "-");
        let v = v.trim();
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| format!("{path}:{}: unknown key `{}`", n + 1, k.trim()))?;
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}"));
            extra.push(v.to_string());
        } else {
            match v {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => return Err(format!("{path}:{}: `{}` must be true or false", n + 1, k.trim())),
            }
        }
    }
    let mut out = raw;
    out.splice(pos + 1..pos + 1, extra.into_iter().map(OsString::from));
    Ok(out)
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                dicc_core::Error::Divergence(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
