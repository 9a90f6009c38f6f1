use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

impl FeatureSpec {
    pub fn numerical(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Numerical,
            vocab: None,
        }
    }

    pub fn categorical(name: impl Into<String>, vocab: Vec<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical,
            vocab: Some(vocab),
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.as_ref().map_or(0, Vec::len)
    }

    pub fn category_index(&self, value: &str) -> Option<u32> {
        self.vocab
            .as_ref()?
            .iter()
            .position(|v| v == value)
            .map(|i| i as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelKind {
    #[serde(rename = "binary")]
    Binary,
    #[serde(rename = "n-way")]
    MultiClass,
    #[serde(rename = "regression")]
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub name: String,
    pub kind: LabelKind,
    /// Class count for n-way labels (values `0..classes`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl LabelSpec {
    /// Width of the task head output.
    pub fn outputs(&self) -> usize {
        match self.kind {
            LabelKind::Binary | LabelKind::Regression => 1,
            LabelKind::MultiClass => self.classes.unwrap_or(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if f.name.is_empty() {
                return Err(Error::protocol("feature with empty name"));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::protocol(format!("duplicate feature `{}`", f.name)));
            }
            match (f.kind, &f.vocab) {
                (FeatureKind::Categorical, Some(v)) => {
                    if v.is_empty() {
                        return Err(Error::protocol(format!(
                            "categorical feature `{}` has an empty vocabulary",
                            f.name
                        )));
                    }
                    let unique: HashSet<_> = v.iter().collect();
                    if unique.len() != v.len() {
                        return Err(Error::protocol(format!(
                            "duplicate vocabulary entry in `{}`",
                            f.name
                        )));
                    }
                }
                (FeatureKind::Categorical, None) => {
                    return Err(Error::protocol(format!(
                        "categorical feature `{}` needs a vocabulary",
                        f.name
                    )))
                }
                (FeatureKind::Numerical, Some(_)) => {
                    return Err(Error::protocol(format!(
                        "numerical feature `{}` must not declare a vocabulary",
                        f.name
                    )))
                }
                (FeatureKind::Numerical, None) => {}
            }
        }
        if let Some(label) = &self.label {
            if !seen.insert(label.name.as_str()) {
                return Err(Error::protocol(format!(
                    "label column `{}` collides with another column",
                    label.name
                )));
            }
            if label.kind == LabelKind::MultiClass && label.classes.map_or(true, |c| c < 2) {
                return Err(Error::protocol("n-way label needs `classes` >= 2"));
            }
        }
        if let Some(ts) = &self.timestamp {
            if !seen.insert(ts.as_str()) {
                return Err(Error::protocol(format!(
                    "timestamp column `{ts}` collides with another column"
                )));
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.features.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Schema restricted to the named features, in the given order.
    pub fn select(&self, names: &[String]) -> Result<FeatureSchema> {
        let features = names
            .iter()
            .map(|n| {
                self.feature_index(n)
                    .map(|i| self.features[i].clone())
                    .ok_or_else(|| Error::protocol(format!("unknown feature `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = FeatureSchema {
            features,
            label: self.label.clone(),
            timestamp: self.timestamp.clone(),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: FeatureSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
