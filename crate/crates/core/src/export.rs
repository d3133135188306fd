//! Training dataset export from trajectories: supervised (summary, plan)
//! pairs from successful runs and balanced preference-labeled pairs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::trajectory::TrajectoryRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceLabel {
    Preferred,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub input: String,
    pub output: String,
    pub label: PreferenceLabel,
    pub task_id: String,
    pub stage_index: usize,
}

/// Every stage of a graded trajectory, all sharing the run's label. Ungraded
/// trajectories yield nothing.
pub fn label_trajectory(traj: &TrajectoryRecord) -> Vec<PreferenceExample> {
    let Some(success) = traj.success else {
        return Vec::new();
    };
    let label = if success { PreferenceLabel::Preferred } else { PreferenceLabel::Discarded };
    traj.stages
        .iter()
        .map(|s| PreferenceExample {
            input: s.summary.clone(),
            output: s.plan.clone(),
            label,
            task_id: traj.task.task_id.clone(),
            stage_index: s.stage_index,
        })
        .collect()
}

fn labeled_sorted(trajs: &[TrajectoryRecord]) -> Vec<PreferenceExample> {
    let mut all: Vec<PreferenceExample> = trajs.iter().flat_map(label_trajectory).collect();
    all.sort_by(|a, b| (&a.task_id, a.stage_index).cmp(&(&b.task_id, b.stage_index)));
    all
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Serialize)]
struct SftLine<'a> {
    input: &'a str,
    output: &'a str,
}

#[derive(Serialize)]
struct KtoLine<'a> {
    input: &'a str,
    output: &'a str,
    label: PreferenceLabel,
}

/// Writes preferred examples as `{input, output}` lines ordered by
/// (task_id, stage_index). Returns the line count.
pub fn export_sft(trajs: &[TrajectoryRecord], path: &Path) -> io::Result<usize> {
    let examples = labeled_sorted(trajs);
    let rows: Vec<SftLine> = examples
        .iter()
        .filter(|e| e.label == PreferenceLabel::Preferred)
        .map(|e| SftLine { input: &e.input, output: &e.output })
        .collect();
    write_lines(path, &rows)?;
    Ok(rows.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KtoCounts {
    pub positives: usize,
    pub negatives: usize,
    /// Set when a class had no examples and nothing was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_class: Option<PreferenceLabel>,
}

/// Balances the classes 1:1 by sampling the majority class without
/// replacement (seeded), then writes `{input, output, label}` lines. If either
/// class is empty the file is left empty and the empty class reported.
pub fn export_kto(trajs: &[TrajectoryRecord], path: &Path, seed: u64) -> io::Result<KtoCounts> {
    let all = labeled_sorted(trajs);
    let (pos, neg): (Vec<&PreferenceExample>, Vec<&PreferenceExample>) =
        all.iter().partition(|e| e.label == PreferenceLabel::Preferred);

    let empty_class = if pos.is_empty() {
        Some(PreferenceLabel::Preferred)
    } else if neg.is_empty() {
        Some(PreferenceLabel::Discarded)
    } else {
        None
    };
    if let Some(empty) = empty_class {
        write_lines::<KtoLine>(path, &[])?;
        return Ok(KtoCounts { positives: 0, negatives: 0, empty_class: Some(empty) });
    }

    let keep = pos.len().min(neg.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut downsample = |class: Vec<&'_ PreferenceExample>| -> Vec<usize> {
        if class.len() == keep {
            return (0..keep).collect();
        }
        let mut picked = rand::seq::index::sample(&mut rng, class.len(), keep).into_vec();
        picked.sort_unstable();
        picked
    };
    let pos_idx = downsample(pos.clone());
    let neg_idx = downsample(neg.clone());

    let mut chosen: Vec<&PreferenceExample> =
        pos_idx.iter().map(|&i| pos[i]).chain(neg_idx.iter().map(|&i| neg[i])).collect();
    chosen.sort_by(|a, b| (&a.task_id, a.stage_index, a.label).cmp(&(&b.task_id, b.stage_index, b.label)));
    let rows: Vec<KtoLine> =
        chosen.iter().map(|e| KtoLine { input: &e.input, output: &e.output, label: e.label }).collect();
    write_lines(path, &rows)?;
    Ok(KtoCounts { positives: keep, negatives: keep, empty_class: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDigest {
    pub path: String,
    pub sha256: String,
}

pub fn file_digest(path: &Path) -> io::Result<SourceDigest> {
    let bytes = std::fs::read(path)?;
    Ok(SourceDigest { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

/// Sidecar describing an export. Training hyperparameters are recorded for
/// reference only; nothing here consumes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub kind: String,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_class: Option<PreferenceLabel>,
    pub sources: Vec<SourceDigest>,
    pub hyperparameters: Value,
}

pub fn sft_manifest(lines: usize, sources: Vec<SourceDigest>) -> ExportManifest {
    ExportManifest {
        kind: "sft".into(),
        counts: BTreeMap::from([("examples".to_string(), lines)]),
        seed: None,
        empty_class: None,
        sources,
        hyperparameters: json!({
            "cutoff_len": 2048,
            "batch_size": 1,
            "gradient_accumulation_steps": 4,
            "learning_rate": 5e-6,
            "lr_scheduler": "cosine",
            "warmup_ratio": 0.1,
            "precision": "bf16",
            "epochs": 3,
            "val_split": 0.1,
        }),
    }
}

pub fn kto_manifest(counts: KtoCounts, seed: u64, sources: Vec<SourceDigest>) -> ExportManifest {
    ExportManifest {
        kind: "kto".into(),
        counts: BTreeMap::from([
            ("positives".to_string(), counts.positives),
            ("negatives".to_string(), counts.negatives),
        ]),
        seed: Some(seed),
        empty_class: counts.empty_class,
        sources,
        hyperparameters: json!({
            "beta": 0.1,
            "cutoff_len": 4096,
            "batch_size": 1,
            "gradient_accumulation_steps": 8,
            "learning_rate": 2e-4,
            "lr_scheduler": "cosine",
            "precision": "bf16",
            "epochs": 3,
            "eval_steps": 500,
            "positive_to_negative": "1:1",
        }),
    }
}

/// `<dataset>.manifest.json` next to the dataset file.
pub fn manifest_path(dataset: &Path) -> std::path::PathBuf {
    let mut name = dataset.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    dataset.with_file_name(name)
}

pub fn write_manifest(manifest: &ExportManifest, path: &Path) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(path, text)
}
