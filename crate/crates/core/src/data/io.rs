//! Line-delimited dataset files plus a JSON schema sidecar.
//!
//! ```text
//! {"user_id":7,"channels":{"cat":[2,5],"amount":[0.5,1.25]},"labels":{"click":1.0},"indicators":{"click":1}}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::{ChannelKind, ChannelSeq, Dataset, Instance, Schema, Split};
use crate::error::{Error, Result};

pub const DATA_FILE: &str = "data.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    user_id: u64,
    channels: BTreeMap<String, Vec<Value>>,
    #[serde(default)]
    labels: BTreeMap<String, f64>,
    #[serde(default)]
    indicators: BTreeMap<String, u8>,
}

fn convert(raw: RawRecord, schema: &Schema, line: usize) -> Result<Instance> {
    let mut channels = BTreeMap::new();
    for (name, values) in raw.channels {
        let spec = schema
            .channel(&name)
            .ok_or_else(|| Error::Schema(format!("line {line}: unknown channel `{name}`")))?;
        let seq = if spec.kind == ChannelKind::Dense {
            let v = values
                .iter()
                .map(|x| x.as_f64())
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("channel `{name}` must hold numbers"),
                })?;
            ChannelSeq::Dense(v)
        } else {
            let mut toks = Vec::with_capacity(values.len());
            for x in &values {
                let id = x.as_u64().ok_or_else(|| Error::Parse {
                    line,
                    message: format!("channel `{name}` must hold non-negative integers, got {x}"),
                })?;
                if id >= spec.vocab() as u64 {
                    return Err(Error::Vocabulary {
                        channel: name.clone(),
                        id,
                        vocab: spec.vocab(),
                    });
                }
                toks.push(id as u32);
            }
            ChannelSeq::Tokens(toks)
        };
        channels.insert(name, seq);
    }
    Ok(Instance {
        user_id: raw.user_id,
        channels,
        labels: raw.labels,
        indicators: raw.indicators,
    })
}

/// Reads and validates a line-delimited dataset file against `schema`.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let inst = convert(raw, schema, line_no)?;
        inst.validate(schema)?;
        instances.push(inst);
    }
    Ok(Dataset {
        schema: schema.clone(),
        instances,
        split: Split::Unsplit,
    })
}

pub fn load_schema(path: &Path) -> Result<Schema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: Schema = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    schema.validate()?;
    Ok(schema)
}

/// Loads `dir/schema.json` and `dir/data.jsonl`.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let schema = load_schema(&dir.join(SCHEMA_FILE))?;
    load_dataset(&dir.join(DATA_FILE), &schema)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in &ds.instances {
        serde_json::to_writer(&mut w, inst).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `dir/schema.json` and `dir/data.jsonl`, creating `dir`.
pub fn write_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema_path = dir.join(SCHEMA_FILE);
    let text = serde_json::to_string_pretty(&ds.schema).expect("schema serialises");
    fs::write(&schema_path, text + "\n").map_err(|e| Error::io(&schema_path, e))?;
    write_dataset(&dir.join(DATA_FILE), ds)
}
