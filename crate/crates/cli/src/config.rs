//! Recipe files: TOML sections over the built-in desk recipe, plus
//! `--section.key=value` overrides from the command line.

use std::fs;
use std::path::Path;

use cmlm_core::error::{Error, Result};
use cmlm_core::experiment::Recipe;
use serde::Deserialize;
use toml::{Table, Value};

/// Splits `--section.key=value` arguments off `args`, leaving the rest for clap.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        match arg.strip_prefix("--") {
            Some(body) if is_override(body) => overrides.push(body.to_string()),
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn is_override(body: &str) -> bool {
    body.split_once('=')
        .is_some_and(|(key, _)| key.contains('.') && !key.starts_with('.'))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().expect("non-empty path");
    let mut node = table;
    for k in keys {
        node = match node
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{k}` in `{path}` is not a section"))),
        };
    }
    node.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Builds the recipe: defaults, then the file, then overrides, then the seed.
pub fn load_recipe(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Recipe> {
    let mut table = match Value::try_from(Recipe::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("the default recipe serializes to a table"),
    };
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let recipe = Recipe::deserialize(Value::Table(table))
        .map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
    let recipe = match seed {
        Some(s) => recipe.with_seed(s),
        None => recipe,
    };
    recipe.validate()?;
    Ok(recipe)
}

/// The recipe as a TOML document, for recording next to run outputs.
pub fn render(recipe: &Recipe) -> String {
    toml::to_string(recipe).expect("recipes serialize")
}
