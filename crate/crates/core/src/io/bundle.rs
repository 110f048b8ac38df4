//! Deployment bundles: one shared backbone file plus one adapter file per
//! task, tied together by a manifest that pins the backbone hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::io::checkpoint::{params_hash, write_atomic};
use crate::io::store::{
    load_adapter, load_encoder, save_adapter, save_encoder, AdapterFile, HeadMeta,
};
use crate::lora::{LoraSpec, Task, TaskPrimaryAdapterSet};
use crate::params::Head;

pub const MANIFEST: &str = "manifest.json";
pub const BACKBONE_FILE: &str = "backbone.tplf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub backbone_file: String,
    pub backbone_hash: String,
    pub tasks: BTreeMap<Task, TaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub adapter_file: String,
    pub spec: LoraSpec,
    pub head: Option<HeadMeta>,
}

/// Writes `dir/backbone.tplf`, `dir/adapters/<task>.tplf` and the manifest.
/// Heads are matched to tasks by the first element of each pair.
pub fn export_deployment(
    dir: &Path,
    backbone: &EncoderParams<f32>,
    vocab: &Vocab,
    adapters: &TaskPrimaryAdapterSet<f32>,
    heads: &[(Task, &Head<f32>, Vec<String>)],
) -> Result<Manifest> {
    if adapters.is_empty() {
        return Err(Error::config("nothing to export: no adapter groups"));
    }
    for (task, head, labels) in heads {
        if adapters.group(*task).is_none() {
            return Err(Error::config(format!(
                "head given for {task} but no adapter group"
            )));
        }
        if head.linear.out_dim() != labels.len() {
            return Err(Error::LabelMismatch(format!(
                "{task} head has {} outputs for {} labels",
                head.linear.out_dim(),
                labels.len()
            )));
        }
    }
    fs::create_dir_all(dir.join("adapters"))?;
    save_encoder(&dir.join(BACKBONE_FILE), backbone, vocab)?;
    let hash = params_hash(backbone);
    let mut tasks = BTreeMap::new();
    for (&task, group) in &adapters.groups {
        let head = heads
            .iter()
            .find(|(t, _, _)| *t == task)
            .map(|(_, h, labels)| {
                (
                    (*h).clone(),
                    HeadMeta {
                        name: h.name.clone(),
                        labels: labels.clone(),
                    },
                )
            });
        let rel = format!("adapters/{}.tplf", task.name());
        save_adapter(
            &dir.join(&rel),
            &AdapterFile {
                task,
                group: group.clone(),
                head: head.clone(),
                backbone_hash: hash.clone(),
            },
        )?;
        tasks.insert(
            task,
            TaskEntry {
                adapter_file: rel,
                spec: group.spec.clone(),
                head: head.map(|(_, m)| m),
            },
        );
    }
    let manifest = Manifest {
        format_version: crate::io::checkpoint::FORMAT_VERSION,
        backbone_file: BACKBONE_FILE.into(),
        backbone_hash: hash,
        tasks,
    };
    write_atomic(
        &dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

/// A loaded bundle: manifest plus verified backbone.
#[derive(Debug, Clone)]
pub struct DeploymentBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub backbone: EncoderParams<f32>,
    pub vocab: Vocab,
}

impl DeploymentBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let (backbone, vocab) = load_encoder(&dir.join(&manifest.backbone_file))?;
        check_hash(&manifest.backbone_hash, &params_hash(&backbone))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            backbone,
            vocab,
        })
    }

    /// Loads the adapter for `task` against the bundle's own backbone.
    pub fn adapter(&self, task: Task) -> Result<AdapterFile> {
        self.adapter_for(task, &self.backbone)
    }

    /// Loads the adapter for `task` to run on `backbone`; refuses if that
    /// backbone is not the one the bundle was exported with.
    pub fn adapter_for(&self, task: Task, backbone: &EncoderParams<f32>) -> Result<AdapterFile> {
        let entry = self
            .manifest
            .tasks
            .get(&task)
            .ok_or_else(|| Error::config(format!("bundle has no {task} adapter")))?;
        check_hash(&self.manifest.backbone_hash, &params_hash(backbone))?;
        let file = load_adapter(&self.dir.join(&entry.adapter_file))?;
        check_hash(&self.manifest.backbone_hash, &file.backbone_hash)?;
        if file.task != task || file.group.spec != entry.spec {
            return Err(Error::Corrupt(format!(
                "{} disagrees with the manifest",
                entry.adapter_file
            )));
        }
        file.group.check_compatible(&backbone.config)?;
        Ok(file)
    }
}

fn check_hash(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::HashMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}
