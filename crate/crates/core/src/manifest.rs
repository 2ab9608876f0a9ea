//! Case manifests: which files belong to which case.
//!
//! A manifest is a CSV or JSON file with one entry per case. CSV columns:
//! `case_id`, `reference`, any number of `candidate:<id>` and `image:<seq>`
//! columns, `fold`, `cluster`. Paths are resolved relative to the manifest
//! file's directory.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub images: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub candidates: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub cases: Vec<CaseManifest>,
}

impl Corpus {
    pub fn candidate_ids(&self) -> BTreeSet<String> {
        self.cases
            .iter()
            .flat_map(|c| c.candidates.keys().cloned())
            .collect()
    }

    pub fn case(&self, id: &str) -> Option<&CaseManifest> {
        self.cases.iter().find(|c| c.case_id == id)
    }

    /// Unique ids and existing paths; returns one message per problem.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        for case in &self.cases {
            if !seen.insert(case.case_id.clone()) {
                problems.push(format!("duplicate case_id {}", case.case_id));
            }
            let mut check = |what: &str, p: &Path| {
                if !p.exists() {
                    problems.push(format!(
                        "case {}: {} path does not exist: {}",
                        case.case_id,
                        what,
                        p.display()
                    ));
                }
            };
            if let Some(r) = &case.reference {
                check("reference", r);
            }
            for (seq, p) in &case.images {
                check(&format!("image:{seq}"), p);
            }
            for (id, p) in &case.candidates {
                check(&format!("candidate:{id}"), p);
            }
        }
        problems
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        base.join(pb)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "json" => load_json(path, &base),
        "csv" => load_csv(path, &base),
        other => Err(Error::Config(format!(
            "manifest must be .csv or .json, got .{other}"
        ))),
    }
}

fn load_json(path: &Path, base: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cases: Vec<CaseManifest> = serde_json::from_str(&text)?;
    for case in &mut cases {
        if let Some(r) = case.reference.take() {
            case.reference = Some(resolve(base, &r.to_string_lossy()));
        }
        for p in case.images.values_mut() {
            *p = resolve(base, &p.to_string_lossy());
        }
        for p in case.candidates.values_mut() {
            *p = resolve(base, &p.to_string_lossy());
        }
    }
    Ok(Corpus { cases })
}

fn load_csv(path: &Path, base: &Path) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(Error::Csv)?;
    let headers = rdr.headers()?.clone();
    let mut cases = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let mut case = CaseManifest::default();
        for (col, value) in headers.iter().zip(record.iter()) {
            let value = value.trim();
            if value.is_empty() {
                continue;
            }
            if col == "case_id" {
                case.case_id = value.to_string();
            } else if col == "reference" {
                case.reference = Some(resolve(base, value));
            } else if col == "fold" {
                case.fold = Some(value.parse().map_err(|_| {
                    Error::Config(format!("bad fold value {value} in manifest"))
                })?);
            } else if col == "cluster" {
                case.cluster = Some(value.parse().map_err(|_| {
                    Error::Config(format!("bad cluster value {value} in manifest"))
                })?);
            } else if let Some(id) = col.strip_prefix("candidate:") {
                case.candidates.insert(id.to_string(), resolve(base, value));
            } else if let Some(seq) = col.strip_prefix("image:") {
                case.images.insert(seq.to_string(), resolve(base, value));
            } else {
                return Err(Error::Config(format!("unknown manifest column {col}")));
            }
        }
        if case.case_id.is_empty() {
            return Err(Error::Config("manifest row without case_id".into()));
        }
        cases.push(case);
    }
    Ok(Corpus { cases })
}

/// Write a corpus as CSV. Paths are emitted as stored (typically relative to
/// the original manifest location when produced by `synth`).
pub fn save_manifest_csv(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut image_cols: BTreeSet<String> = BTreeSet::new();
    let mut cand_cols: BTreeSet<String> = BTreeSet::new();
    for c in &corpus.cases {
        image_cols.extend(c.images.keys().cloned());
        cand_cols.extend(c.candidates.keys().cloned());
    }
    let mut wtr = csv::Writer::from_path(path).map_err(Error::Csv)?;
    let mut header = vec!["case_id".to_string(), "reference".to_string()];
    header.extend(image_cols.iter().map(|s| format!("image:{s}")));
    header.extend(cand_cols.iter().map(|s| format!("candidate:{s}")));
    header.push("fold".into());
    header.push("cluster".into());
    wtr.write_record(&header)?;
    for c in &corpus.cases {
        let mut row = vec![
            c.case_id.clone(),
            c.reference
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_default(),
        ];
        for col in &image_cols {
            row.push(
                c.images
                    .get(col)
                    .map(|p| p.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
        for col in &cand_cols {
            row.push(
                c.candidates
                    .get(col)
                    .map(|p| p.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
        row.push(c.fold.map(|f| f.to_string()).unwrap_or_default());
        row.push(c.cluster.map(|f| f.to_string()).unwrap_or_default());
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
