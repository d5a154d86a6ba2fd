use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{
    check_unique_id, json_id, warn_on_size, DataSource, DatasetSplit, ImageRef, MemeRecord,
    SplitName,
};
use crate::error::{Error, Result};

/// Folds the three HarMeme harm levels into a binary label: both harmful
/// levels become 1, "harmless" becomes 0.
pub fn merge_harmeme_label(raw: &str) -> Result<u8> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "very harmful" | "partially harmful" => Ok(1),
        "harmless" => Ok(0),
        _ => Err(Error::LabelScheme(raw.to_string())),
    }
}

/// Loads `<root>/<split>.jsonl` in the HarMeme layout.
///
/// Each line carries `id`, `image` (or `img`), `text` and either a `labels`
/// array whose first element is the harm level or a plain `label` string.
/// Bare image file names are resolved under `<root>/img/`.
pub fn load_harmeme_split(root: &Path, split: SplitName) -> Result<DatasetSplit> {
    let path = root.join(split.file_name());
    if !path.is_file() {
        return Err(Error::DatasetNotFound(path));
    }
    let file = fs::File::open(&path)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.clone(),
            line: line_no,
            message,
        };
        let v: Value =
            serde_json::from_str(&line).map_err(|e| parse_err(format!("malformed JSON: {e}")))?;
        let obj = v
            .as_object()
            .ok_or_else(|| parse_err("record is not a JSON object".into()))?;
        let id = obj
            .get("id")
            .and_then(json_id)
            .ok_or_else(|| parse_err("missing or non-scalar `id`".into()))?;
        let img = obj
            .get("image")
            .or_else(|| obj.get("img"))
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err("missing `image`".into()))?;
        let text = obj
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err("missing `text`".into()))?
            .to_string();
        let raw_label = match (obj.get("labels"), obj.get("label")) {
            (Some(Value::Array(items)), _) => items.first().and_then(Value::as_str),
            (_, Some(Value::String(s))) => Some(s.as_str()),
            _ => None,
        };
        let label = raw_label.map(merge_harmeme_label).transpose()?;
        check_unique_id(&mut seen, &id, &path, line_no)?;
        records.push(MemeRecord {
            id,
            image_ref: ImageRef::File(resolve_image(root, img)),
            text,
            label,
        });
    }
    warn_on_size(DataSource::Harmeme, split, records.len());
    Ok(DatasetSplit {
        name: split,
        source: DataSource::Harmeme,
        records,
    })
}

fn resolve_image(root: &Path, img: &str) -> PathBuf {
    let p = Path::new(img);
    if p.components().count() == 1 {
        root.join("img").join(p)
    } else {
        root.join(p)
    }
}
