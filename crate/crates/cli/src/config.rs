//! Flat `key = value` run configuration (TOML syntax, no tables).
//!
//! Keys:
//!
//! | key | type | notes |
//! |-----|------|-------|
//! | `preset` | string | optional base; one of `TrainConfig::PRESETS` |
//! | `task` | string | `three_bit` or `context`; required unless `preset` is set |
//! | `cell` | string | `vanilla` or `gru` |
//! | `state_dim`, `batch_size`, `timesteps`, `iterations`, `holdout_trials`, `checkpoint_every` | integer | |
//! | `learning_rate`, `lr_decay`, `lr_floor`, `clip_norm`, `l2` | float | |
//! | `lambda_rnn`, `lambda_jslds`, `lambda_e`, `lambda_a` | float | loss weights |
//! | `seed` | integer | master seed |
//! | `record_wallclock` | bool | |
//!
//! Without a preset, unspecified keys take the `desk_three_bit` values.

use jslds_core::cells::CellKind;
use jslds_core::tasks::TaskKind;
use jslds_core::train::TrainConfig;
use toml::Value;

pub const KEYS: [&str; 20] = [
    "preset",
    "task",
    "cell",
    "state_dim",
    "batch_size",
    "timesteps",
    "learning_rate",
    "lr_decay",
    "lr_floor",
    "clip_norm",
    "iterations",
    "lambda_rnn",
    "lambda_jslds",
    "lambda_e",
    "lambda_a",
    "l2",
    "seed",
    "holdout_trials",
    "checkpoint_every",
    "record_wallclock",
];

/// Values given on the command line; each overrides the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_count(v: &Value) -> Option<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => usize::try_from(*i).ok(),
        _ => None,
    }
}

/// Parses a config file body. Every problem is reported, not just the first.
pub fn parse(text: &str, overrides: &Overrides) -> Result<TrainConfig, Vec<String>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| vec![format!("not a valid config file: {}", e.message())])?;
    let mut errors = Vec::new();
    for key in table.keys() {
        if !KEYS.contains(&key.as_str()) {
            errors.push(format!("unknown key `{key}`"));
        }
    }
    let mut config = match table.get("preset") {
        None => {
            if !table.contains_key("task") {
                errors.push("missing required key `task`".into());
            }
            TrainConfig::desk_three_bit()
        }
        Some(Value::String(name)) => TrainConfig::preset(name).unwrap_or_else(|| {
            errors.push(format!("`preset`: unknown preset `{name}` (expected one of {})", TrainConfig::PRESETS.join(", ")));
            TrainConfig::desk_three_bit()
        }),
        Some(_) => {
            errors.push("`preset` must be a string".into());
            TrainConfig::desk_three_bit()
        }
    };

    for (key, value) in &table {
        let bad = |what: &str| format!("`{key}` must be {what}, got {value}");
        match key.as_str() {
            "task" => match value.as_str().map(str::parse::<TaskKind>) {
                Some(Ok(t)) => config.task = t,
                _ => errors.push(bad("`three_bit` or `context`")),
            },
            "cell" => match value.as_str().map(str::parse::<CellKind>) {
                Some(Ok(c)) => config.cell = c,
                _ => errors.push(bad("`vanilla` or `gru`")),
            },
            "state_dim" | "batch_size" | "timesteps" | "iterations" | "holdout_trials" | "checkpoint_every" => {
                let Some(n) = as_count(value) else {
                    errors.push(bad("a nonnegative integer"));
                    continue;
                };
                match key.as_str() {
                    "state_dim" => config.state_dim = n,
                    "batch_size" => config.batch_size = n,
                    "timesteps" => config.timesteps = n,
                    "iterations" => config.iterations = n,
                    "holdout_trials" => config.holdout_trials = n,
                    _ => config.checkpoint_every = n,
                }
            }
            "learning_rate" | "lr_decay" | "lr_floor" | "clip_norm" | "l2" | "lambda_rnn" | "lambda_jslds" | "lambda_e"
            | "lambda_a" => {
                let Some(x) = as_float(value) else {
                    errors.push(bad("a number"));
                    continue;
                };
                match key.as_str() {
                    "learning_rate" => config.learning_rate = x,
                    "lr_decay" => config.lr_decay = x,
                    "lr_floor" => config.lr_floor = x,
                    "clip_norm" => config.clip_norm = x,
                    "l2" => config.l2 = x,
                    "lambda_rnn" => config.weights.rnn = x,
                    "lambda_jslds" => config.weights.jslds = x,
                    "lambda_e" => config.weights.e = x,
                    _ => config.weights.a = x,
                }
            }
            "seed" => match value {
                Value::Integer(i) if *i >= 0 => config.seed = *i as u64,
                _ => errors.push(bad("a nonnegative integer")),
            },
            "record_wallclock" => match value {
                Value::Boolean(b) => config.record_wallclock = *b,
                _ => errors.push(bad("true or false")),
            },
            _ => {}
        }
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(n) = overrides.iterations {
        config.iterations = n;
    }
    errors.extend(config.problems());
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(errors)
    }
}

/// Flat TOML rendering of `config`, readable back by [`parse`].
pub fn render(config: &TrainConfig) -> String {
    format!(
        "task = \"{}\"\ncell = \"{}\"\nstate_dim = {}\nbatch_size = {}\ntimesteps = {}\nlearning_rate = {:?}\nlr_decay = {:?}\n\
         lr_floor = {:?}\nclip_norm = {:?}\niterations = {}\nlambda_rnn = {:?}\nlambda_jslds = {:?}\nlambda_e = {:?}\n\
         lambda_a = {:?}\nl2 = {:?}\nseed = {}\nholdout_trials = {}\ncheckpoint_every = {}\nrecord_wallclock = {}\n",
        config.task,
        config.cell,
        config.state_dim,
        config.batch_size,
        config.timesteps,
        config.learning_rate,
        config.lr_decay,
        config.lr_floor,
        config.clip_norm,
        config.iterations,
        config.weights.rnn,
        config.weights.jslds,
        config.weights.e,
        config.weights.a,
        config.l2,
        config.seed,
        config.holdout_trials,
        config.checkpoint_every,
        config.record_wallclock,
    )
}
