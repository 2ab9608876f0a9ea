//! Task definitions: base labels, composite regions, and region masks.
//!
//! All pipeline logic is name-keyed; integer codes live only here and in the
//! volumes themselves. Builtin tasks ship the challenge-convention codes and
//! a spec file can override them for non-standard datasets.

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume, VolumeKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Declared label order matters: post-processing applies per-label rules
    /// in this order.
    base_labels: Vec<(String, i32)>,
    regions: Vec<Region>,
    wt_region: String,
}

impl TaskSpec {
    pub fn new(
        name: impl Into<String>,
        base_labels: Vec<(String, i32)>,
        regions: Vec<Region>,
        wt_region: impl Into<String>,
    ) -> Result<Self> {
        let spec = TaskSpec {
            name: name.into(),
            base_labels,
            regions,
            wt_region: wt_region.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let mut codes = BTreeSet::new();
        let mut names = BTreeSet::new();
        for (name, code) in &self.base_labels {
            if *code <= 0 {
                return Err(Error::Config(format!(
                    "label {name} has non-positive code {code}"
                )));
            }
            if !codes.insert(*code) {
                return Err(Error::Config(format!("duplicate label code {code}")));
            }
            if !names.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate label name {name}")));
            }
        }
        if self.regions.is_empty() {
            return Err(Error::Config("task declares no regions".into()));
        }
        let mut region_names = BTreeSet::new();
        for region in &self.regions {
            if region.labels.is_empty() {
                return Err(Error::Config(format!(
                    "region {} is an empty label union",
                    region.name
                )));
            }
            for l in &region.labels {
                if !names.contains(l) {
                    return Err(Error::Config(format!(
                        "region {} references undeclared label {l}",
                        region.name
                    )));
                }
            }
            if !region_names.insert(region.name.clone()) {
                return Err(Error::Config(format!("duplicate region name {}", region.name)));
            }
        }
        if !region_names.contains(&self.wt_region) {
            return Err(Error::Config(format!(
                "wt_region {} is not a declared region",
                self.wt_region
            )));
        }
        Ok(())
    }

    pub fn base_labels(&self) -> &[(String, i32)] {
        &self.base_labels
    }

    pub fn base_label_names(&self) -> Vec<&str> {
        self.base_labels.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn wt_region(&self) -> &str {
        &self.wt_region
    }

    pub fn code_of(&self, label: &str) -> Result<i32> {
        self.base_labels
            .iter()
            .find(|(n, _)| n == label)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::Config(format!("undeclared label {label}")))
    }

    /// All declared codes (background 0 excluded).
    pub fn label_codes(&self) -> BTreeSet<i32> {
        self.base_labels.iter().map(|(_, c)| *c).collect()
    }

    pub fn region(&self, name: &str) -> Result<&Region> {
        self.regions
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Config(format!("undeclared region {name}")))
    }

    /// Integer codes forming a region's label union.
    pub fn region_codes(&self, name: &str) -> Result<BTreeSet<i32>> {
        let region = self.region(name)?;
        region.labels.iter().map(|l| self.code_of(l)).collect()
    }

    pub fn to_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = TaskSpecFile::from(self);
        let text = toml::to_string_pretty(&file)
            .map_err(|e| Error::Config(format!("task spec serialization failed: {e}")))?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text =
            std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        let file: TaskSpecFile = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad task spec file: {e}")))?;
        file.into_spec()
    }
}

/// On-disk task spec schema (TOML).
#[derive(Debug, Serialize, Deserialize)]
struct TaskSpecFile {
    name: String,
    labels: BTreeMap<String, i32>,
    /// Declared label order (map keys are sorted; this preserves intent).
    label_order: Vec<String>,
    regions: Vec<Region>,
    wt_region: String,
}

impl From<&TaskSpec> for TaskSpecFile {
    fn from(spec: &TaskSpec) -> Self {
        TaskSpecFile {
            name: spec.name.clone(),
            labels: spec.base_labels.iter().cloned().collect(),
            label_order: spec
                .base_labels
                .iter()
                .map(|(n, _)| n.clone())
                .collect(),
            regions: spec.regions.clone(),
            wt_region: spec.wt_region.clone(),
        }
    }
}

impl TaskSpecFile {
    fn into_spec(self) -> Result<TaskSpec> {
        let mut base = Vec::new();
        for name in &self.label_order {
            let code = self
                .labels
                .get(name)
                .ok_or_else(|| Error::Config(format!("label_order names unknown label {name}")))?;
            base.push((name.clone(), *code));
        }
        if base.len() != self.labels.len() {
            return Err(Error::Config(
                "label_order must list every declared label exactly once".into(),
            ));
        }
        TaskSpec::new(self.name, base, self.regions, self.wt_region)
    }
}

fn region(name: &str, labels: &[&str]) -> Region {
    Region {
        name: name.to_string(),
        labels: labels.iter().map(|s| s.to_string()).collect(),
    }
}

/// Builtin task definitions with challenge-convention integer codes. The
/// codes are configurable via a task spec file; confirm them against the
/// released data before a real run.
pub fn builtin_task(name: &str) -> Result<TaskSpec> {
    match name {
        "PED" => TaskSpec::new(
            "PED",
            vec![
                ("ET".into(), 1),
                ("NET".into(), 2),
                ("CC".into(), 3),
                ("ED".into(), 4),
            ],
            vec![
                region("ET", &["ET"]),
                region("NET", &["NET"]),
                region("CC", &["CC"]),
                region("ED", &["ED"]),
                region("TC", &["ET", "NET", "CC"]),
                region("WT", &["ET", "NET", "CC", "ED"]),
            ],
            "WT",
        ),
        "MEN" => TaskSpec::new(
            "MEN",
            vec![
                ("ET".into(), 1),
                ("NETC".into(), 2),
                ("SNFH".into(), 3),
            ],
            vec![
                region("ET", &["ET"]),
                region("NETC", &["NETC"]),
                region("SNFH", &["SNFH"]),
                region("TC", &["ET", "NETC"]),
                region("WT", &["ET", "NETC", "SNFH"]),
            ],
            "WT",
        ),
        "MEN-RT" => TaskSpec::new(
            "MEN-RT",
            vec![("GTV".into(), 1)],
            vec![region("GTV", &["GTV"])],
            "GTV",
        ),
        "MET" => TaskSpec::new(
            "MET",
            vec![
                ("ET".into(), 1),
                ("NETC".into(), 2),
                ("SNFH".into(), 3),
                ("RC".into(), 4),
            ],
            vec![
                region("ET", &["ET"]),
                region("NETC", &["NETC"]),
                region("SNFH", &["SNFH"]),
                region("RC", &["RC"]),
                region("TC", &["ET", "NETC"]),
                region("WT", &["ET", "NETC", "SNFH"]),
            ],
            "WT",
        ),
        other => Err(Error::Config(format!(
            "unknown task {other} (builtin tasks: PED, MEN, MEN-RT, MET)"
        ))),
    }
}

/// Binary mask of a region: voxel true iff its label code belongs to the
/// region's label set. Geometry is copied from the source volume.
pub fn region_mask(v: &Volume, region: &str, spec: &TaskSpec) -> Result<Mask> {
    if v.kind() != VolumeKind::Label {
        return Err(Error::Validation(
            "region_mask requires a label volume".into(),
        ));
    }
    let codes = spec.region_codes(region)?;
    let data = v.labels().iter().map(|l| codes.contains(l)).collect();
    Ok(Mask::new(v.dims(), v.spacing(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn ped_has_six_regions_and_wt_union() {
        let spec = builtin_task("PED").unwrap();
        assert_eq!(spec.regions().len(), 6);
        let wt = spec.region_codes("WT").unwrap();
        let expect: BTreeSet<i32> = [1, 2, 3, 4].into_iter().collect();
        assert_eq!(wt, expect);
        let tc = spec.region_codes("TC").unwrap();
        assert_eq!(tc, [1, 2, 3].into_iter().collect());
    }

    #[test]
    fn men_rt_single_region() {
        let spec = builtin_task("MEN-RT").unwrap();
        assert_eq!(spec.regions().len(), 1);
        assert_eq!(spec.wt_region(), "GTV");
    }

    #[test]
    fn met_rc_outside_wt() {
        let spec = builtin_task("MET").unwrap();
        let rc = spec.code_of("RC").unwrap();
        let wt = spec.region_codes("WT").unwrap();
        assert!(!wt.contains(&rc));
        assert!(spec.region_codes("RC").unwrap().contains(&rc));
    }

    #[test]
    fn unknown_task_is_config_error() {
        assert!(matches!(builtin_task("GLI"), Err(Error::Config(_))));
    }

    #[test]
    fn region_mask_set_membership() {
        let spec = builtin_task("PED").unwrap();
        let mut labels = vec![0; 27];
        labels[0] = 1; // ET
        labels[5] = 4; // ED
        let v = Volume::from_labels([3, 3, 3], [1.0; 3], labels).unwrap();
        let tc = region_mask(&v, "TC", &spec).unwrap();
        assert_eq!(tc.count(), 1);
        assert!(tc.data()[0]);
        let empty = region_mask(
            &Volume::from_labels([3, 3, 3], [1.0; 3], vec![0; 27]).unwrap(),
            "WT",
            &spec,
        )
        .unwrap();
        assert!(empty.is_empty_mask());
        assert!(region_mask(&v, "GTV", &spec).is_err());
    }

    #[test]
    fn wt_equals_union_of_tc_and_ed_on_random_volumes() {
        let spec = builtin_task("PED").unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let labels: Vec<i32> = (0..216).map(|_| rng.gen_range(0..=4)).collect();
            let v = Volume::from_labels([6, 6, 6], [1.0; 3], labels).unwrap();
            let wt = region_mask(&v, "WT", &spec).unwrap();
            let tc = region_mask(&v, "TC", &spec).unwrap();
            let ed = region_mask(&v, "ED", &spec).unwrap();
            for i in 0..216 {
                assert_eq!(wt.data()[i], tc.data()[i] || ed.data()[i]);
            }
            // base-label masks partition the foreground
            let mut covered = vec![0u8; 216];
            for r in ["ET", "NET", "CC", "ED"] {
                let m = region_mask(&v, r, &spec).unwrap();
                for i in 0..216 {
                    covered[i] += u8::from(m.data()[i]);
                }
            }
            for i in 0..216 {
                assert_eq!(covered[i], u8::from(v.labels()[i] != 0));
            }
        }
    }

    #[test]
    fn task_spec_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = builtin_task("MET").unwrap();
        let p = dir.path().join("met.toml");
        spec.to_file(&p).unwrap();
        let back = TaskSpec::from_file(&p).unwrap();
        assert_eq!(back.base_labels(), spec.base_labels());
        assert_eq!(back.wt_region(), spec.wt_region());
        assert_eq!(back.regions().len(), spec.regions().len());
    }
}
