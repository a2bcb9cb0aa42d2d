//! Run configuration files: TOML mirroring the run's field tree, plus
//! dotted-path overrides such as `--optim.epochs=50`.

use std::path::{Path, PathBuf};

use augweight_core::{LossKind, Method, ModelConfig, SgdConfig, TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub loss: LossKind,
    pub method: Method,
    #[serde(default)]
    pub optim: SgdConfig,
    /// Used when no `--out` is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            task: self.task.clone(),
            model: self.model,
            loss: self.loss,
            method: self.method,
            optim: self.optim.clone(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-{}-s{}",
            self.task.kind.name(),
            self.loss.name(),
            self.method.name(),
            self.optim.seed
        )
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Splits `--a.b=value` arguments from the rest. Only arguments whose key
/// contains a dot are treated as overrides.
pub fn split_overrides<I: IntoIterator<Item = String>>(args: I) -> (Vec<String>, Vec<String>) {
    let (overrides, rest) = args.into_iter().partition(|a| {
        let Some(body) = a.strip_prefix("--") else { return false };
        body.split_once('=').is_some_and(|(k, _)| k.contains('.'))
    });
    (rest, overrides)
}

fn parse_value(raw: &str) -> Value {
    // Anything that is not a TOML literal is taken as a bare string.
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies one `key.path=value` override (leading `--` optional).
pub fn apply_override(table: &mut Table, spec: &str) -> CliResult<()> {
    let body = spec.strip_prefix("--").unwrap_or(spec);
    let (path, raw) = body
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override {spec:?} has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for key in parents {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            // Replacing a scalar such as `method = "base"` with a table.
            *entry = Value::Table(Table::new());
        }
        node = entry.as_table_mut().expect("just ensured a table");
    }
    node.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Fills `model.vocab_size` from the task when the file leaves it out.
fn fill_model_vocab(table: &mut Table) -> CliResult<()> {
    let task: TaskSpec = table
        .get("task")
        .cloned()
        .ok_or_else(|| CliError::Config("missing [task] section".into()))?
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("task: {e}")))?;
    let model = table
        .entry("model")
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| CliError::Config("model must be a table".into()))?;
    model
        .entry("vocab_size")
        .or_insert(Value::Integer(task.vocab_size() as i64));
    Ok(())
}

pub fn parse_table(text: &str) -> CliResult<Table> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn run_config_from_table(mut table: Table, overrides: &[String]) -> CliResult<RunConfig> {
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    fill_model_vocab(&mut table)?;
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_run_config(text: &str, overrides: &[String]) -> CliResult<RunConfig> {
    run_config_from_table(parse_table(text)?, overrides)
}

pub fn load_run_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_run_config(&text, overrides).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
