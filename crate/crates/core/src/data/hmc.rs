use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde_json::Value;

use super::{
    check_unique_id, json_id, warn_on_size, DataSource, DatasetSplit, ImageRef, MemeRecord,
    SplitName,
};
use crate::error::{Error, Result};

/// Loads `<root>/<split>.jsonl` in the Hateful Memes Challenge layout.
///
/// Records come back in file order. Image paths are resolved against `root`
/// but not opened.
pub fn load_hmc_split(root: &Path, split: SplitName) -> Result<DatasetSplit> {
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
        let record = parse_line(root, &line).map_err(|message| Error::Parse {
            path: path.clone(),
            line: line_no,
            message,
        })?;
        check_unique_id(&mut seen, &record.id, &path, line_no)?;
        records.push(record);
    }
    warn_on_size(DataSource::Hmc, split, records.len());
    Ok(DatasetSplit {
        name: split,
        source: DataSource::Hmc,
        records,
    })
}

fn parse_line(root: &Path, line: &str) -> std::result::Result<MemeRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
    let obj = v.as_object().ok_or("record is not a JSON object")?;
    let id = obj
        .get("id")
        .and_then(json_id)
        .ok_or("missing or non-scalar `id`")?;
    let img = obj
        .get("img")
        .and_then(Value::as_str)
        .ok_or("missing `img`")?;
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .ok_or("missing `text`")?
        .to_string();
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(v) => Some(coerce_label(v).ok_or_else(|| format!("label {v} is not binary"))?),
    };
    Ok(MemeRecord {
        id,
        image_ref: ImageRef::File(root.join(img)),
        text,
        label,
    })
}

fn coerce_label(v: &Value) -> Option<u8> {
    match v {
        Value::Bool(b) => Some(u8::from(*b)),
        Value::Number(n) => match n.as_f64() {
            Some(0.0) => Some(0),
            Some(1.0) => Some(1),
            _ => None,
        },
        Value::String(s) => match s.trim() {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        },
        _ => None,
    }
}

/// Writes splits in the same line-delimited layout `load_hmc_split` reads,
/// rendering every image under `<root>/img/<id>.png`.
pub fn write_hmc_dataset(root: &Path, splits: &[&DatasetSplit]) -> Result<()> {
    let img_dir = root.join("img");
    fs::create_dir_all(&img_dir)?;
    for split in splits {
        let mut out = String::new();
        for r in &split.records {
            let rel = format!("img/{}.png", r.id);
            let img = r.image_ref.load()?;
            img.save_with_format(root.join(&rel), image::ImageFormat::Png)
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
            let mut obj = serde_json::Map::new();
            obj.insert("id".into(), Value::String(r.id.clone()));
            obj.insert("img".into(), Value::String(rel));
            if let Some(l) = r.label {
                obj.insert("label".into(), Value::from(l));
            }
            obj.insert("text".into(), Value::String(r.text.clone()));
            out.push_str(&serde_json::to_string(&Value::Object(obj))?);
            out.push('\n');
        }
        fs::write(root.join(split.name.file_name()), out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn loads_in_file_order_with_coerced_labels() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "train.jsonl",
            concat!(
                r#"{"id": 42953, "img": "img/42953.png", "label": 0, "text": "its their character not their color that matters"}"#,
                "\n",
                r#"{"id": "23058", "img": "img/23058.png", "label": "1", "text": ""}"#,
                "\n",
                r#"{"id": 13894, "img": "img/13894.png", "label": true, "text": "putting bows on your pet"}"#,
                "\n"
            ),
        );
        let split = load_hmc_split(dir.path(), SplitName::Train).unwrap();
        let ids: Vec<_> = split.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["42953", "23058", "13894"]);
        assert_eq!(split.labels().unwrap(), vec![0, 1, 1]);
        assert_eq!(split.records[1].text, "");
        assert_eq!(
            split.records[0].image_ref,
            ImageRef::File(dir.path().join("img/42953.png"))
        );
    }

    #[test]
    fn malformed_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "dev_seen.jsonl",
            "{\"id\": 1, \"img\": \"img/1.png\", \"label\": 0, \"text\": \"a\"}\n{not json\n",
        );
        match load_hmc_split(dir.path(), SplitName::DevSeen) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_text_or_bad_label_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.jsonl", "{\"id\": 1, \"img\": \"a.png\", \"label\": 0}\n");
        assert!(matches!(
            load_hmc_split(dir.path(), SplitName::Train),
            Err(Error::Parse { line: 1, .. })
        ));
        write(
            dir.path(),
            "train.jsonl",
            "{\"id\": 1, \"img\": \"a.png\", \"label\": 2, \"text\": \"\"}\n",
        );
        assert!(matches!(
            load_hmc_split(dir.path(), SplitName::Train),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let line = "{\"id\": 7, \"img\": \"a.png\", \"label\": 0, \"text\": \"\"}\n";
        write(dir.path(), "train.jsonl", &format!("{line}{line}"));
        assert!(matches!(
            load_hmc_split(dir.path(), SplitName::Train),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn missing_file_is_dataset_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_hmc_split(dir.path(), SplitName::TestUnseen),
            Err(Error::DatasetNotFound(_))
        ));
    }

    #[test]
    fn unlabeled_records_are_allowed() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "test.jsonl", "{\"id\": 1, \"img\": \"a.png\", \"text\": \"x\"}\n");
        let split = load_hmc_split(dir.path(), SplitName::Test).unwrap();
        assert_eq!(split.records[0].label, None);
        assert!(!split.is_labeled());
    }

    #[test]
    fn missing_image_fails_only_at_load_time() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "train.jsonl",
            "{\"id\": 1, \"img\": \"img/nope.png\", \"label\": 1, \"text\": \"x\"}\n",
        );
        let split = load_hmc_split(dir.path(), SplitName::Train).unwrap();
        assert!(matches!(
            split.records[0].image_ref.load(),
            Err(Error::ImageDecode { .. })
        ));
    }
}
