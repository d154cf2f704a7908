//! `.data` and `.names` dataset metadata files.

use crate::config::cfg::Extras;
use crate::error::{Error, Result};

/// Raw contents of a `.data` file. `names` is a path; see [`DatasetMeta`] for
/// the resolved class list.
#[derive(Debug, Clone, PartialEq)]
pub struct DataFile {
    pub classes: usize,
    pub train: String,
    pub valid: String,
    pub names: String,
    pub backup: String,
    pub extra: Extras,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub classes: usize,
    pub train_list_path: String,
    pub valid_list_path: String,
    pub names: Vec<String>,
    pub backup_path: String,
}

impl DatasetMeta {
    pub fn new(data: DataFile, names: Vec<String>) -> Result<Self> {
        if names.len() != data.classes {
            return Err(Error::Validation(format!(
                "data file declares classes={} but names file lists {}",
                data.classes,
                names.len()
            )));
        }
        Ok(DatasetMeta {
            classes: data.classes,
            train_list_path: data.train,
            valid_list_path: data.valid,
            names,
            backup_path: data.backup,
        })
    }
}

pub fn parse_data_file(text: &str) -> Result<DataFile> {
    let mut classes = None;
    let mut data = DataFile {
        classes: 0,
        train: String::new(),
        valid: String::new(),
        names: String::new(),
        backup: String::new(),
        extra: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim().to_string());
        match key {
            "classes" => {
                classes = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| Error::parse(i + 1, format!("`classes` expects a count, got `{value}`")))?,
                )
            }
            "train" => data.train = value,
            "valid" => data.valid = value,
            "names" => data.names = value,
            "backup" => data.backup = value,
            _ => data.extra.push((key.to_string(), value)),
        }
    }
    data.classes = classes.ok_or_else(|| Error::Validation("data file has no `classes` entry".into()))?;
    if data.classes == 0 {
        return Err(Error::Validation("data file must declare classes >= 1".into()));
    }
    Ok(data)
}

/// One class name per non-blank line, surrounding whitespace trimmed.
pub fn parse_names_file(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}
