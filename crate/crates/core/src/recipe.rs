//! Recipes: bends, conditioning edits and generation parameters in one
//! canonical JSON document.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::hooks::BendSpec;
use crate::pipeline::{ConditioningEdit, GenerationParams};

pub const RECIPE_VERSION: u64 = 1;
pub const SUPPORTED_VERSIONS: &[u64] = &[1];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecipeError {
    #[error("schema error at {location}: {reason}")]
    Schema { location: String, reason: String },
    #[error("unsupported recipe version {found}; supported: {supported:?}")]
    Version { found: String, supported: Vec<u64> },
}

impl RecipeError {
    fn schema(location: impl Into<String>, reason: impl Into<String>) -> Self {
        RecipeError::Schema {
            location: location.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub version: u64,
    pub bends: Vec<BendSpec>,
    pub conditioning_edits: Vec<ConditioningEdit>,
    pub generation: GenerationParams,
}

impl Recipe {
    pub fn new(generation: GenerationParams) -> Self {
        Self {
            version: RECIPE_VERSION,
            bends: Vec::new(),
            conditioning_edits: Vec::new(),
            generation,
        }
    }

    /// Checks beyond the JSON schema: ids unique, parameters in range.
    pub fn validate(&self) -> Result<(), RecipeError> {
        if !SUPPORTED_VERSIONS.contains(&self.version) {
            return Err(RecipeError::Version {
                found: self.version.to_string(),
                supported: SUPPORTED_VERSIONS.to_vec(),
            });
        }
        let mut seen = HashSet::new();
        for (i, bend) in self.bends.iter().enumerate() {
            bend.validate().map_err(|r| RecipeError::schema(format!("bends[{i}]"), r))?;
            if !seen.insert(bend.id.as_str()) {
                return Err(RecipeError::schema(
                    format!("bends[{i}].id"),
                    format!("duplicate bend id `{}`", bend.id),
                ));
            }
        }
        for (i, edit) in self.conditioning_edits.iter().enumerate() {
            edit.validate()
                .map_err(|e| RecipeError::schema(format!("conditioning_edits[{i}]"), e.to_string()))?;
        }
        self.generation
            .validate()
            .map_err(|e| RecipeError::schema("generation", e.to_string()))
    }
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect::<Map<_, _>>())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Canonical text: sorted keys, two-space indentation, shortest round-trip
/// floats, trailing newline.
pub fn serialize_recipe(recipe: &Recipe) -> String {
    let value = serde_json::to_value(recipe).expect("recipes always serialize");
    let mut text = serde_json::to_string_pretty(&sort_keys(value)).expect("values always serialize");
    text.push('\n');
    text
}

pub fn parse_recipe(text: &str) -> Result<Recipe, RecipeError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| RecipeError::schema(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| RecipeError::schema("(root)", "a recipe must be a JSON object"))?;
    match obj.get("version") {
        None => return Err(RecipeError::schema("version", "missing field `version`")),
        Some(Value::Number(n)) if n.as_u64().is_some_and(|v| SUPPORTED_VERSIONS.contains(&v)) => {}
        Some(Value::Number(n)) => {
            return Err(RecipeError::Version {
                found: n.to_string(),
                supported: SUPPORTED_VERSIONS.to_vec(),
            })
        }
        Some(other) => return Err(RecipeError::schema("version", format!("expected an integer, found {other}"))),
    }
    let recipe: Recipe = serde_path_to_error::deserialize(value).map_err(|e| {
        let location = e.path().to_string();
        let location = if location == "." { "(root)".to_owned() } else { location };
        RecipeError::schema(location, e.into_inner().to_string())
    })?;
    recipe.validate()?;
    Ok(recipe)
}
