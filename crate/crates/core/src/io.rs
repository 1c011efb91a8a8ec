//! On-disk formats: dataset and task CSVs, split assignment JSON and the
//! pseudo-outcome CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pseudo::{PseudoMode, PseudoOutcomeBatch};
use crate::scalar::Scalar;
use crate::synthgen::Intervention;
use crate::tasks::{MetaDataset, Sample, SampleId, Split};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON encoding.
pub fn json_hash<S: Serialize>(value: &S) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: u64) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse {what} from {field:?}")))
}

fn opt<T: std::str::FromStr>(field: &str, what: &str, line: u64) -> Result<Option<T>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse(field, what, line).map(Some)
    }
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `sample_id,task_id,treated,y,tau_true,x_0..x_{d-1}`; controls leave
/// `task_id` empty.
pub fn write_dataset_csv<T: Scalar, W: Write>(samples: &[Sample<T>], out: W) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["sample_id", "task_id", "treated", "y", "tau_true"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..d).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    for s in samples {
        if s.x.len() != d {
            return Err(Error::Shape(format!("sample {} has {} features, expected {d}", s.id, s.x.len())));
        }
        let mut rec = vec![
            s.id.to_string(),
            fmt_opt(s.task_id),
            u8::from(s.treated).to_string(),
            s.y.to_string(),
            fmt_opt(s.tau_true),
        ];
        rec.extend(s.x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<T: Scalar, R: Read>(input: R) -> Result<Vec<Sample<T>>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let fixed = ["sample_id", "task_id", "treated", "y", "tau_true"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
        return Err(Error::Parse(format!("unexpected dataset header {header:?}")));
    }
    let d = header.len() - fixed.len();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != fixed.len() + d {
            return Err(Error::Parse(format!("line {line}: expected {} fields", fixed.len() + d)));
        }
        let treated = match rec[2].trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::Parse(format!("line {line}: treated must be 0 or 1, got {other:?}"))),
        };
        let x = (0..d)
            .map(|j| parse(&rec[fixed.len() + j], "feature", line))
            .collect::<Result<Vec<T>>>()?;
        let s = Sample {
            id: SampleId(parse(&rec[0], "sample_id", line)?),
            x,
            y: parse(&rec[3], "y", line)?,
            treated,
            task_id: opt(&rec[1], "task_id", line)?,
            tau_true: opt(&rec[4], "tau_true", line)?,
            tau_pseudo: None,
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// `task_id,components,w_0..w_{e-1}`; components are `;`-separated.
pub fn write_tasks_csv<T: Scalar, W: Write>(tasks: &[Intervention<T>], out: W) -> Result<()> {
    let e = tasks.first().map_or(0, |t| t.w.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["task_id".to_string(), "components".to_string()];
    header.extend((0..e).map(|j| format!("w_{j}")));
    w.write_record(&header)?;
    for t in tasks {
        let comps: Vec<String> = t.components.iter().map(usize::to_string).collect();
        let mut rec = vec![t.task_id.to_string(), comps.join(";")];
        rec.extend(t.w.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tasks_csv<T: Scalar, R: Read>(input: R) -> Result<Vec<Intervention<T>>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "task_id" || &header[1] != "components" {
        return Err(Error::Parse(format!("unexpected tasks header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse(format!("line {line}: expected {} fields", header.len())));
        }
        let components = rec[1]
            .split(';')
            .map(|c| parse(c, "component", line))
            .collect::<Result<_>>()?;
        let w = (2..rec.len())
            .map(|j| parse(&rec[j], "intervention feature", line))
            .collect::<Result<_>>()?;
        out.push(Intervention { task_id: parse(&rec[0], "task_id", line)?, w, components });
    }
    Ok(out)
}

pub fn split_to_json(split: &BTreeMap<usize, Split>) -> Result<String> {
    Ok(serde_json::to_string_pretty(split)?)
}

pub fn split_from_json(text: &str) -> Result<BTreeMap<usize, Split>> {
    Ok(serde_json::from_str(text)?)
}

/// `task_id,sample_id,tau_pseudo` for every task carrying pseudo-outcomes.
pub fn write_pseudo_csv<T: Scalar, W: Write>(md: &MetaDataset<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task_id", "sample_id", "tau_pseudo"])?;
    for t in &md.tasks {
        if let Some(p) = &t.pseudo {
            for (id, v) in p.sample_ids.iter().zip(&p.values) {
                w.write_record([t.task_id.to_string(), id.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Attaches pseudo-outcomes read from CSV; every task must be covered.
pub fn read_pseudo_csv<T: Scalar, R: Read>(md: &mut MetaDataset<T>, mode: PseudoMode, input: R) -> Result<()> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows: BTreeMap<usize, (Vec<SampleId>, Vec<T>)> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(Error::Parse(format!("line {line}: expected 3 fields")));
        }
        let entry = rows.entry(parse(&rec[0], "task_id", line)?).or_default();
        entry.0.push(SampleId(parse(&rec[1], "sample_id", line)?));
        entry.1.push(parse(&rec[2], "tau_pseudo", line)?);
    }
    for t in md.tasks.iter_mut() {
        let (sample_ids, values) = rows.remove(&t.task_id).ok_or_else(|| {
            Error::MissingInput(format!("no pseudo-outcomes for task {}", t.task_id))
        })?;
        let expected: Vec<SampleId> = match mode {
            PseudoMode::TreatedOnly => t.treated.iter().map(|s| s.id).collect(),
            PseudoMode::AllUnits => t.treated.iter().chain(&t.control).map(|s| s.id).collect(),
        };
        if sample_ids != expected {
            return Err(Error::Incompatible(format!(
                "pseudo-outcomes of task {} do not match its samples",
                t.task_id
            )));
        }
        t.pseudo = Some(PseudoOutcomeBatch { task_id: t.task_id, mode, sample_ids, values });
    }
    Ok(())
}
