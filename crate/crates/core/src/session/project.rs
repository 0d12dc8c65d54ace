//! Project directories: `project.json` (state), `journal.jsonl` (one record
//! per line) and `images/` (files named by content hash).

use super::{Derived, Model, Op, OperatorRecord, Result, Session, SessionConfig, SessionError};
use crate::mesh::{write_mtl, write_obj};
use crate::ImageId;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;

pub const PROJECT_FORMAT_VERSION: u32 = 1;
pub const PROJECT_FILE: &str = "project.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectFile {
    pub format_version: u32,
    pub model: Model,
    pub derived: Derived,
    #[serde(default)]
    pub config: SessionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ProjectWarning {
    MissingImage { image: ImageId, path: String },
    HashMismatch { image: ImageId, path: String, expected: String, actual: String },
}

impl std::fmt::Display for ProjectWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProjectWarning::MissingImage { image, path } => write!(f, "{image}: {path} is missing"),
            ProjectWarning::HashMismatch { image, path, expected, actual } => write!(f, "{image}: {path} has hash {actual}, expected {expected}"),
        }
    }
}

pub fn write_journal(records: &[OperatorRecord], out: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses JSON Lines; blank lines are skipped. A bad line fails with its index.
pub fn read_journal(input: impl BufRead) -> Result<Vec<OperatorRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: OperatorRecord = serde_json::from_str(&line)
            .map_err(|e| SessionError::Replay { index: out.len(), source: Box::new(SessionError::Malformed(e.to_string())) })?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RecordInput {
    seq: Option<u64>,
    op: Op,
}

/// Parses one operator input: a bare operator, or a journal record whose
/// optional `seq` the caller should check against the next sequence number.
pub fn parse_op_input(bytes: &[u8]) -> Result<(Option<u64>, Op)> {
    let value: serde_json::Value = serde_json::from_slice(bytes)?;
    if value.get("op").is_some_and(serde_json::Value::is_object) {
        let r: RecordInput = serde_json::from_value(value)?;
        Ok((r.seq, r.op))
    } else {
        Ok((None, serde_json::from_value(value)?))
    }
}

/// What an export produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub vertices: usize,
    pub faces: usize,
    pub texture_coordinates: usize,
    pub textured: bool,
    pub solved: bool,
    pub calibrated_cameras: usize,
    pub placeholders: usize,
    pub notes: Vec<String>,
}

impl Session {
    pub fn project_file(&self) -> ProjectFile {
        ProjectFile { format_version: PROJECT_FORMAT_VERSION, model: self.model.clone(), derived: self.derived.clone(), config: self.config.clone() }
    }

    /// Writes the project into `dir`, copying image files from the current
    /// project directory when it differs.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        for e in self.model.images.values() {
            let target = dir.join(&e.path);
            if target.exists() {
                continue;
            }
            if let Some(src) = self.root.as_ref().map(|r| r.join(&e.path)).filter(|p| p.exists()) {
                std::fs::copy(src, &target)?;
            } else if let Some(img) = self.pixels.get(&e.path) {
                img.save(&target).map_err(|err| SessionError::Image(err.to_string()))?;
            }
        }
        let tmp = dir.join(format!("{PROJECT_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.project_file())?)?;
        std::fs::rename(&tmp, dir.join(PROJECT_FILE))?;
        let mut journal = Vec::new();
        write_journal(&self.journal, &mut journal)?;
        std::fs::write(dir.join(JOURNAL_FILE), journal)?;
        self.root = Some(dir.to_path_buf());
        Ok(())
    }

    /// Opens a project directory. Missing or altered image files are
    /// reported as warnings.
    pub fn load(dir: &Path) -> Result<(Session, Vec<ProjectWarning>)> {
        let file: ProjectFile = serde_json::from_slice(&std::fs::read(dir.join(PROJECT_FILE))?)?;
        if file.format_version != PROJECT_FORMAT_VERSION {
            return Err(SessionError::Malformed(format!("project format {} (expected {PROJECT_FORMAT_VERSION})", file.format_version)));
        }
        let journal_path = dir.join(JOURNAL_FILE);
        let journal =
            if journal_path.exists() { read_journal(std::io::BufReader::new(std::fs::File::open(journal_path)?))? } else { Vec::new() };
        let mut warnings = Vec::new();
        for e in file.model.images.values() {
            match std::fs::read(dir.join(&e.path)) {
                Err(_) => warnings.push(ProjectWarning::MissingImage { image: e.id, path: e.path.clone() }),
                Ok(bytes) => {
                    let actual = hex::encode(Sha256::digest(&bytes));
                    if !e.sha256.is_empty() && actual != e.sha256 {
                        warnings.push(ProjectWarning::HashMismatch { image: e.id, path: e.path.clone(), expected: e.sha256.clone(), actual });
                    }
                }
            }
        }
        let session = Session {
            model: file.model,
            derived: file.derived,
            journal,
            snapshots: Vec::new(),
            config: file.config,
            root: Some(dir.to_path_buf()),
            pixels: Default::default(),
        };
        Ok((session, warnings))
    }

    /// Writes `mesh.obj`, and when texturing succeeds `mesh.mtl` and
    /// `atlas.png`, into `dir`.
    pub fn export_obj(&mut self, dir: &Path) -> Result<ExportReport> {
        std::fs::create_dir_all(dir)?;
        let mut report = ExportReport {
            solved: self.derived.solve.is_some() && self.derived.solve_error.is_none(),
            calibrated_cameras: self.derived.full_cameras(),
            ..Default::default()
        };
        let (mesh, obj) = match self.build_atlas() {
            Ok((mesh, atlas)) => {
                std::fs::write(dir.join("atlas.png"), atlas.to_png())?;
                std::fs::write(dir.join("mesh.mtl"), write_mtl("atlas.png"))?;
                report.textured = true;
                report.placeholders = atlas.placeholders.len();
                let obj = write_obj(&mesh, Some("mesh.mtl"));
                (mesh, obj)
            }
            Err(e) => {
                report.notes.push(format!("untextured: {e}"));
                let mesh = self.model.mesh.clone();
                let obj = write_obj(&mesh, None);
                (mesh, obj)
            }
        };
        if !report.solved {
            report.notes.push("geometry has not been solved".into());
        }
        report.vertices = mesh.num_vertices();
        report.faces = mesh.num_faces();
        report.texture_coordinates = obj.lines().filter(|l| l.starts_with("vt ")).count();
        std::fs::write(dir.join("mesh.obj"), obj)?;
        Ok(report)
    }
}
