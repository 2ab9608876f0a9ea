//! Synthetic corpus generator: phantom tumors with controlled error modes
//! (false-positive specks, systematic label swaps, boundary jitter) for
//! tests and demos. Everything derives from one seed.

use crate::error::{Error, Result};
use crate::fusion::{save_stack, ProbStack};
use crate::manifest::{save_manifest_csv, CaseManifest, Corpus};
use crate::nifti::save_volume;
use crate::taskspec::TaskSpec;
use crate::volume::Volume;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ErrorMode {
    /// Prediction equals the reference.
    Clean,
    /// Reference plus small false components of `label` in the background.
    Specks {
        label: String,
        count: usize,
        min_size: usize,
        max_size: usize,
    },
    /// Small satellite structures that are `from` in the reference are
    /// painted `to` in the prediction.
    Swap { from: String, to: String },
    /// One-voxel boundary erosion or dilation per label, randomized.
    Jitter,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Error mode per candidate (candidate count = vector length).
    pub candidate_modes: Vec<ErrorMode>,
    /// Shape archetypes cycled over cases; drives radiomic clustering.
    pub n_archetypes: usize,
    pub seed: u64,
    /// Write per-class probability stacks next to the label predictions.
    pub write_stacks: bool,
    /// Write one synthetic intensity sequence ("t1").
    pub write_images: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 30,
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            candidate_modes: vec![
                ErrorMode::Jitter,
                ErrorMode::Specks {
                    label: "ET".into(),
                    count: 3,
                    min_size: 5,
                    max_size: 20,
                },
                ErrorMode::Clean,
            ],
            n_archetypes: 3,
            seed: 42,
            write_stacks: true,
            write_images: true,
        }
    }
}

struct Painter {
    dims: [usize; 3],
    labels: Vec<i32>,
}

impl Painter {
    fn new(dims: [usize; 3]) -> Self {
        Painter {
            dims,
            labels: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    fn ellipsoid(&mut self, center: [f64; 3], radii: [f64; 3], code: i32) {
        let lo = |a: usize| ((center[a] - radii[a]).floor().max(0.0)) as usize;
        let hi = |a: usize| ((center[a] + radii[a]).ceil() as usize).min(self.dims[a] - 1);
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    let d = [(x, 0), (y, 1), (z, 2)]
                        .iter()
                        .map(|&(v, a)| {
                            let t = (v as f64 - center[a]) / radii[a];
                            t * t
                        })
                        .sum::<f64>();
                    if d <= 1.0 {
                        self.labels[x + self.dims[0] * (y + self.dims[1] * z)] = code;
                    }
                }
            }
        }
    }

    fn bar(&mut self, start: [usize; 3], len: usize, code: i32) {
        for i in 0..len {
            let x = (start[0] + i).min(self.dims[0] - 1);
            self.labels[x + self.dims[0] * (start[1] + self.dims[1] * start[2])] = code;
        }
    }
}

/// Satellite bar positions for one case: deterministic, in the top z-slab
/// away from the main tumor.
fn satellite_slots(dims: [usize; 3]) -> Vec<[usize; 3]> {
    let z = dims[2] - 6;
    vec![
        [4, 4, z],
        [4, dims[1] - 8, z],
        [dims[0] / 2, 6, z + 2],
    ]
}

struct CasePhantom {
    reference: Vec<i32>,
    satellite_code: Option<i32>,
    satellites: Vec<([usize; 3], usize)>,
}

/// Reference phantom: one ellipsoid per base label arranged around the
/// volume center, scaled and elongated by archetype, plus small satellite
/// structures of the first base label.
fn make_reference(
    spec: &TaskSpec,
    dims: [usize; 3],
    archetype: usize,
    rng: &mut ChaCha8Rng,
) -> CasePhantom {
    let mut painter = Painter::new(dims);
    let c = [dims[0] as f64 / 2.0, dims[1] as f64 / 2.0, dims[2] as f64 / 2.0];
    let base = dims[0].min(dims[1]).min(dims[2]) as f64;
    // archetypes: 0 small round, 1 large round, 2 elongated
    let (scale, stretch) = match archetype % 3 {
        0 => (0.10, 1.0),
        1 => (0.20, 1.0),
        _ => (0.13, 2.2),
    };
    let n_labels = spec.base_labels().len();
    for (i, (_, code)) in spec.base_labels().iter().enumerate() {
        let angle = i as f64 / n_labels as f64 * std::f64::consts::TAU;
        let offset = if n_labels == 1 { 0.0 } else { base * 0.16 };
        let center = [
            c[0] + offset * angle.cos() + rng.gen_range(-1.0..1.0),
            c[1] + offset * angle.sin() + rng.gen_range(-1.0..1.0),
            c[2] + rng.gen_range(-1.0..1.0),
        ];
        let r = base * scale * rng.gen_range(0.9..1.1);
        painter.ellipsoid(center, [r * stretch, r, r], *code);
    }
    // satellites of the first label (swap-mode targets)
    let satellite_code = spec.base_labels().first().map(|(_, c)| *c);
    let mut satellites = Vec::new();
    if let Some(code) = satellite_code {
        for slot in satellite_slots(dims) {
            let len = rng.gen_range(5..=9usize);
            painter.bar(slot, len, code);
            satellites.push((slot, len));
        }
    }
    CasePhantom {
        reference: painter.labels,
        satellite_code,
        satellites,
    }
}

fn apply_error_mode(
    phantom: &CasePhantom,
    mode: &ErrorMode,
    spec: &TaskSpec,
    dims: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<i32>> {
    let mut labels = phantom.reference.clone();
    match mode {
        ErrorMode::Clean => {}
        ErrorMode::Specks {
            label,
            count,
            min_size,
            max_size,
        } => {
            let code = spec.code_of(label)?;
            for s in 0..*count {
                let len = rng.gen_range(*min_size..=*max_size);
                // deterministic background slots in the low-z slab
                let start = [
                    2 + (s * 11) % (dims[0] - max_size - 2),
                    2 + (s * 7) % (dims[1] / 4),
                    2 + s % 3,
                ];
                for i in 0..len {
                    labels[start[0] + i + dims[0] * (start[1] + dims[1] * start[2])] = code;
                }
            }
        }
        ErrorMode::Swap { from, to } => {
            let from_code = spec.code_of(from)?;
            let to_code = spec.code_of(to)?;
            if phantom.satellite_code != Some(from_code) {
                return Err(Error::Config(format!(
                    "swap mode source {from} must be the task's first base label"
                )));
            }
            for (slot, len) in &phantom.satellites {
                for i in 0..*len {
                    let idx = slot[0] + i + dims[0] * (slot[1] + dims[1] * slot[2]);
                    if labels[idx] == from_code {
                        labels[idx] = to_code;
                    }
                }
            }
        }
        ErrorMode::Jitter => {
            // erode one randomly chosen label by one face voxel layer
            let (_, code) = spec.base_labels()[rng.gen_range(0..spec.base_labels().len())];
            let src = labels.clone();
            let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = x + nx * (y + ny * z);
                        if src[i] != code {
                            continue;
                        }
                        let mut exposed = x == 0 || y == 0 || z == 0;
                        exposed |= x + 1 == nx || y + 1 == ny || z + 1 == nz;
                        if !exposed {
                            for (dx, dy, dz) in
                                [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                            {
                                let j = ((x as i64 + dx)
                                    + nx as i64 * ((y as i64 + dy) + ny as i64 * (z as i64 + dz)))
                                    as usize;
                                if src[j] != code {
                                    exposed = true;
                                    break;
                                }
                            }
                        }
                        if exposed {
                            labels[i] = 0;
                        }
                    }
                }
            }
        }
    }
    Ok(labels)
}

/// Synthetic intensity image: label-dependent means plus noise, with an
/// archetype-dependent gain so appearance features also separate clusters.
fn make_image(labels: &[i32], archetype: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gain = 1.0 + 0.35 * (archetype % 3) as f32;
    labels
        .iter()
        .map(|&l| {
            let base = match l {
                0 => 10.0f32,
                1 => 100.0,
                2 => 60.0,
                3 => 45.0,
                _ => 30.0,
            };
            gain * base + rng.gen_range(-3.0..3.0)
        })
        .collect()
}

/// Softened one-hot probability stack (0.85 mass on the label).
fn soft_stack(labels: &Volume, spec: &TaskSpec) -> Result<ProbStack> {
    let mut stack = ProbStack::one_hot(labels, spec)?;
    let k = stack.channels.len() as f32;
    for ch in &mut stack.channels {
        for v in ch.iter_mut() {
            *v = 0.85 * *v + 0.15 / k;
        }
    }
    Ok(stack)
}

#[derive(Debug, Serialize)]
pub struct SynthOutcome {
    pub manifest_path: PathBuf,
    pub n_cases: usize,
    pub candidates: Vec<String>,
}

/// Generate the corpus under `out_dir` and write `manifest.csv` there.
pub fn generate(spec: &TaskSpec, config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthOutcome> {
    let out_dir = out_dir.as_ref();
    for sub in ["refs", "images", "preds", "stacks"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir, e))?;
    }
    if config.n_cases == 0 {
        return Err(Error::Config("synth needs at least one case".into()));
    }
    if config.candidate_modes.is_empty() {
        return Err(Error::Config("synth needs at least one candidate".into()));
    }

    let candidate_ids: Vec<String> = (0..config.candidate_modes.len())
        .map(|i| format!("m{i}"))
        .collect();
    let mut cases = Vec::with_capacity(config.n_cases);
    for case_idx in 0..config.n_cases {
        let case_id = format!("case{case_idx:03}");
        let archetype = case_idx % config.n_archetypes.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (case_idx as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F),
        );
        let phantom = make_reference(spec, config.dims, archetype, &mut rng);
        let reference = Volume::from_labels(config.dims, config.spacing, phantom.reference.clone())?;
        let ref_rel = format!("refs/{case_id}.nii.gz");
        save_volume(&reference, out_dir.join(&ref_rel))?;

        let mut manifest_case = CaseManifest {
            case_id: case_id.clone(),
            reference: Some(PathBuf::from(&ref_rel)),
            ..Default::default()
        };

        if config.write_images {
            let img = make_image(reference.labels(), archetype, &mut rng);
            let image = Volume::from_intensity(config.dims, config.spacing, img)?;
            let img_rel = format!("images/{case_id}_t1.nii.gz");
            save_volume(&image, out_dir.join(&img_rel))?;
            manifest_case
                .images
                .insert("t1".into(), PathBuf::from(&img_rel));
        }

        for (cand_idx, mode) in config.candidate_modes.iter().enumerate() {
            let cand = &candidate_ids[cand_idx];
            let labels = apply_error_mode(&phantom, mode, spec, config.dims, &mut rng)?;
            let pred = Volume::from_labels(config.dims, config.spacing, labels)?;
            std::fs::create_dir_all(out_dir.join("preds").join(cand))
                .map_err(|e| Error::io(out_dir, e))?;
            let pred_rel = format!("preds/{cand}/{case_id}.nii.gz");
            save_volume(&pred, out_dir.join(&pred_rel))?;

            if config.write_stacks {
                std::fs::create_dir_all(out_dir.join("stacks").join(cand))
                    .map_err(|e| Error::io(out_dir, e))?;
                let stack = soft_stack(&pred, spec)?;
                let stack_rel = format!("stacks/{cand}/{case_id}.stack.json");
                save_stack(&stack, out_dir.join(&stack_rel))?;
                manifest_case
                    .candidates
                    .insert(cand.clone(), PathBuf::from(&stack_rel));
            } else {
                manifest_case
                    .candidates
                    .insert(cand.clone(), PathBuf::from(&pred_rel));
            }
        }
        cases.push(manifest_case);
    }

    let corpus = Corpus { cases };
    let manifest_path = out_dir.join("manifest.csv");
    save_manifest_csv(&corpus, &manifest_path)?;
    Ok(SynthOutcome {
        manifest_path,
        n_cases: config.n_cases,
        candidates: candidate_ids,
    })
}

/// Map from candidate id to the label-volume path layout `generate` used,
/// for callers that want raw predictions instead of stacks.
pub fn pred_path(out_dir: &Path, candidate: &str, case_id: &str) -> PathBuf {
    out_dir.join(format!("preds/{candidate}/{case_id}.nii.gz"))
}
