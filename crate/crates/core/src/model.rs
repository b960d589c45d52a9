//! Domain types shared by every stage: authenticity labels, forgery types,
//! face records, prompts and manifests.
//!
//! Manifests are JSON-lines files, one [`FaceRecord`] per line. Relative image
//! paths are resolved against the manifest's directory on load and written back
//! relative to the target directory on save.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: String, reason: String },
    #[error("invariant violation in record `{id}`: {reason}")]
    InvariantViolation { id: String, reason: String },
    #[error("missing or unreadable image for record `{id}`: {path}")]
    MissingImage { id: String, path: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Ground-truth or predicted authenticity. The numeric codes are fixed and
/// feed directly into [`assign_class_label`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Authenticity {
    Real = 0,
    Fake = 1,
}

impl Authenticity {
    pub const ALL: [Authenticity; 2] = [Authenticity::Real, Authenticity::Fake];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn negate(self) -> Self {
        match self {
            Authenticity::Real => Authenticity::Fake,
            Authenticity::Fake => Authenticity::Real,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Authenticity::Real => "real",
            Authenticity::Fake => "fake",
        }
    }

    pub fn parse_loose(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Some(Authenticity::Real),
            "fake" => Some(Authenticity::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Authenticity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryType {
    None,
    IdentityExchange,
    FacialAttributeManipulation,
    EntireFaceSynthesis,
}

impl ForgeryType {
    pub const ALL: [ForgeryType; 4] = [
        ForgeryType::None,
        ForgeryType::IdentityExchange,
        ForgeryType::FacialAttributeManipulation,
        ForgeryType::EntireFaceSynthesis,
    ];
    pub const FORGED: [ForgeryType; 3] = [
        ForgeryType::IdentityExchange,
        ForgeryType::FacialAttributeManipulation,
        ForgeryType::EntireFaceSynthesis,
    ];

    /// Human-readable wording used inside answer text and prompts.
    pub fn phrase(self) -> &'static str {
        match self {
            ForgeryType::None => "none",
            ForgeryType::IdentityExchange => "identity exchange",
            ForgeryType::FacialAttributeManipulation => "facial attribute manipulation",
            ForgeryType::EntireFaceSynthesis => "entire face synthesis",
        }
    }

    pub fn from_phrase(s: &str) -> Option<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', '-'], " ");
        let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
        ForgeryType::ALL.into_iter().find(|t| t.phrase() == norm)
    }

    /// Whether construction prompts attach a reference image (original face or mask).
    pub fn takes_reference(self) -> bool {
        matches!(
            self,
            ForgeryType::IdentityExchange | ForgeryType::FacialAttributeManipulation
        )
    }
}

impl fmt::Display for ForgeryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Four-way joint label `2·y_v + y_a`.
///
/// 0 = real image / answer says real, 1 = real / fake, 2 = fake / real,
/// 3 = fake / fake.
pub fn assign_class_label(image: Authenticity, answer: Authenticity) -> usize {
    2 * image.code() as usize + answer.code() as usize
}

/// Inverse of [`assign_class_label`].
pub fn class_components(label: usize) -> Option<(Authenticity, Authenticity)> {
    let auth = |b: usize| {
        if b == 0 {
            Authenticity::Real
        } else {
            Authenticity::Fake
        }
    };
    (label < 4).then(|| (auth(label / 2), auth(label % 2)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub authenticity: Authenticity,
    pub forgery_type: ForgeryType,
    pub source: String,
    pub split: Split,
    pub reference_path: Option<PathBuf>,
}

impl FaceRecord {
    /// Checks the label invariants (not the filesystem).
    pub fn check_labels(&self) -> Result<(), ManifestError> {
        let violation = |reason: &str| ManifestError::InvariantViolation {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(violation("empty id"));
        }
        match (self.authenticity, self.forgery_type) {
            (Authenticity::Real, ForgeryType::None) => {}
            (Authenticity::Real, _) => {
                return Err(violation("real record carries a forgery type"));
            }
            (Authenticity::Fake, ForgeryType::None) => {
                return Err(violation("fake record without a forgery type"));
            }
            _ => {}
        }
        if self.reference_path.is_some() && !self.forgery_type.takes_reference() {
            return Err(violation(
                "reference_path only allowed for identity exchange or facial attribute manipulation",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    NonHypothetical,
    Hypothetical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub kind: PromptKind,
    pub hypothesis: Option<Authenticity>,
    pub text: String,
}

impl Prompt {
    pub fn non_hypothetical(text: impl Into<String>) -> Self {
        Self {
            kind: PromptKind::NonHypothetical,
            hypothesis: None,
            text: text.into(),
        }
    }

    pub fn hypothetical(hypothesis: Authenticity, text: impl Into<String>) -> Self {
        Self {
            kind: PromptKind::Hypothetical,
            hypothesis: Some(hypothesis),
            text: text.into(),
        }
    }

    pub fn is_consistent(&self) -> bool {
        match (self.kind, self.hypothesis) {
            (PromptKind::NonHypothetical, None) => true,
            (PromptKind::Hypothetical, Some(h)) => {
                self.text.to_ascii_lowercase().contains(h.as_str())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub name: String,
    pub records: Vec<FaceRecord>,
}

impl Manifest {
    pub fn new(name: impl Into<String>, records: Vec<FaceRecord>) -> Self {
        Self {
            name: name.into(),
            records,
        }
    }

    pub fn get(&self, id: &str) -> Option<&FaceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Structural validation: unique ids and per-record label invariants.
    pub fn validate_structure(&self, origin: &str) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for rec in &self.records {
            if !seen.insert(rec.id.as_str()) {
                return Err(ManifestError::MalformedManifest {
                    path: origin.to_string(),
                    reason: format!("duplicate id `{}`", rec.id),
                });
            }
            rec.check_labels()?;
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn manifest_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".to_string())
}

pub(crate) fn absolutize(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        normalize(&base.join(p))
    }
}

fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

pub(crate) fn relativize(base: &Path, p: &Path) -> PathBuf {
    match p.strip_prefix(base) {
        Ok(rel) if !rel.as_os_str().is_empty() => rel.to_path_buf(),
        _ => p.to_path_buf(),
    }
}

pub(crate) fn parent_dir(path: &Path) -> PathBuf {
    let parent = path.parent().unwrap_or(Path::new("."));
    let parent = if parent.as_os_str().is_empty() {
        Path::new(".")
    } else {
        parent
    };
    std::path::absolute(parent).unwrap_or_else(|_| parent.to_path_buf())
}

/// Parses manifest lines without touching the filesystem beyond reading `path`.
pub fn read_manifest_unchecked(path: &Path) -> Result<Manifest, ManifestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let base = parent_dir(path);
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: FaceRecord =
            serde_json::from_str(&line).map_err(|e| ManifestError::MalformedManifest {
                path: path.display().to_string(),
                reason: format!("line {}: {e}", lineno + 1),
            })?;
        rec.image_path = absolutize(&base, &rec.image_path);
        rec.reference_path = rec.reference_path.map(|p| absolutize(&base, &p));
        records.push(rec);
    }
    let manifest = Manifest::new(manifest_name(path), records);
    manifest.validate_structure(&path.display().to_string())?;
    Ok(manifest)
}

/// Loads a manifest and validates every record, including that each image decodes.
pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let manifest = read_manifest_unchecked(path)?;
    for rec in &manifest.records {
        let missing = |p: &Path| ManifestError::MissingImage {
            id: rec.id.clone(),
            path: p.display().to_string(),
        };
        image::image_dimensions(&rec.image_path).map_err(|_| missing(&rec.image_path))?;
        if let Some(r) = &rec.reference_path {
            if !r.exists() {
                return Err(missing(r));
            }
        }
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), ManifestError> {
    manifest.validate_structure(&path.display().to_string())?;
    let base = parent_dir(path);
    let mut buf = Vec::new();
    for rec in &manifest.records {
        let mut out = rec.clone();
        out.image_path = relativize(&base, &rec.image_path);
        out.reference_path = rec.reference_path.as_deref().map(|p| relativize(&base, p));
        serde_json::to_writer(&mut buf, &out).expect("record serializes");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}
