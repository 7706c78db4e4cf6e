//! Config-file support. Values from the file are turned into ordinary
//! command-line arguments; a key is skipped when the user already passed
//! the same flag, so explicit flags override the file.
//!
//! Layout (TOML shown; JSON with the same shape also works):
//!
//! ```toml
//! seed = 7
//! threads = 1
//!
//! [pbt]
//! population = 8
//! epochs = 30
//! ```

use std::ffi::OsString;
use std::path::Path;

use serde_json::Value;

use crate::args::SUBCOMMANDS;

const GLOBAL_KEYS: [&str; 3] = ["seed", "threads", "verbose"];
const VALUED_GLOBALS: [&str; 3] = ["--seed", "--threads", "--config"];

fn find_config(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if VALUED_GLOBALS.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if !s.starts_with('-') {
            return SUBCOMMANDS.contains(&s.as_ref()).then_some(i);
        }
        i += 1;
    }
    None
}

fn load(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let v: toml::Value = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::to_value(v).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn flag_name(key: &str) -> String {
    format!("--{}", key.replace('_', "-"))
}

/// Long flags present in the user's arguments, without any `=value`.
fn user_flags(args: &[OsString]) -> Vec<String> {
    args.iter()
        .map(|a| a.to_string_lossy())
        .filter(|a| a.starts_with("--"))
        .map(|a| a.split('=').next().unwrap_or_default().to_string())
        .collect()
}

fn push_value(out: &mut Vec<OsString>, key: &str, value: &Value) -> Result<(), String> {
    let flag = flag_name(key);
    match value {
        Value::Bool(true) => out.push(flag.into()),
        Value::Bool(false) | Value::Null => {}
        Value::Number(n) => out.extend([flag.into(), n.to_string().into()]),
        Value::String(s) => out.extend([flag.into(), s.into()]),
        Value::Array(items) => {
            for item in items {
                push_value(out, key, item)?;
            }
        }
        Value::Object(_) => return Err(format!("config key {key:?} must be a scalar")),
    }
    Ok(())
}

/// Rewrites `argv` as `[prog, subcommand, <config args>, <user args>]`.
/// Without `--config` or a recognizable subcommand, `argv` is returned as is
/// and clap reports any problem.
pub fn expand_args(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = find_config(&argv) else { return Ok(argv) };
    let Some(sub) = subcommand_index(&argv) else { return Ok(argv) };
    let config = load(Path::new(&path))?;
    let Value::Object(map) = config else {
        return Err(format!("{}: config must be a table", Path::new(&path).display()));
    };
    let name = argv[sub].to_string_lossy().into_owned();
    let given = user_flags(&argv[1..]);
    let overridden = |key: &str| given.contains(&flag_name(key));
    let mut injected = Vec::new();
    for (key, value) in &map {
        if GLOBAL_KEYS.contains(&key.as_str()) {
            if overridden(key) {
                continue;
            }
            if key == "verbose" {
                let n = value.as_u64().ok_or("config key \"verbose\" must be a count")?;
                injected.extend((0..n).map(|_| OsString::from("-v")));
            } else {
                push_value(&mut injected, key, value)?;
            }
        } else if !SUBCOMMANDS.contains(&key.as_str()) {
            return Err(format!("unknown config key {key:?}"));
        }
    }
    if let Some(section) = map.get(&name) {
        let Value::Object(section) = section else {
            return Err(format!("config section [{name}] must be a table"));
        };
        for (key, value) in section {
            if !overridden(key) {
                push_value(&mut injected, key, value)?;
            }
        }
    }
    let mut out = vec![argv[0].clone(), argv[sub].clone()];
    out.extend(injected);
    out.extend(argv[1..sub].iter().cloned());
    out.extend(argv[sub + 1..].iter().cloned());
    Ok(out)
}
