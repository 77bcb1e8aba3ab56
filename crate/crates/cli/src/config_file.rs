//! Flat `key = value` defaults. Entries are spliced in right after the
//! subcommand so that flags typed later on the command line override them.
//! Keys a subcommand does not know are skipped, so one file can serve all of
//! them.

use std::path::Path;

use mmrisk_core::error::Error;

pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("--config: {}:{}: expected key = value", origin.display(), i + 1))
        })?;
        let key = k.trim().trim_start_matches("--").to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("--config: {}:{}: empty key", origin.display(), i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

pub fn expand(cmd: &clap::Command, argv: Vec<String>) -> Result<Vec<String>, Error> {
    let Some(path) = config_path(&argv) else { return Ok(argv) };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)?;
    let entries = parse(&text, path)?;

    let Some(pos) = argv.iter().position(|a| cmd.find_subcommand(a).is_some()) else { return Ok(argv) };
    let sub = cmd.find_subcommand(&argv[pos]).expect("found above");
    let mut injected = Vec::new();
    for (key, value) in entries {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else { continue };
        if arg.get_id() == "config" {
            continue;
        }
        let takes_value = arg.get_action().takes_values();
        if takes_value {
            injected.push(format!("--{key}"));
            injected.push(value);
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => return Err(Error::Config(format!("--config: {key} expects true or false, got {value:?}"))),
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
