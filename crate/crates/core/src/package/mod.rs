//! AASX packages: ZIP archives holding a manifest, submodel and shell documents,
//! service build contexts and supplementary files.
//!
//! Layout convention:
//!
//! ```text
//! aasx/manifest.xml                         required, see `xml` for the grammar
//! aasx/shells/<name>.xml|.json              shell documents
//! aasx/submodels/<name>.xml|.json           submodel documents
//! aasx/services/<service_id>/Containerfile  build context root
//! aasx/services/<service_id>/...            further context files
//! ```
//!
//! `_rels/*` and `[Content_Types].xml` parts are tolerated on read and dropped.

mod read;
mod validate;
mod write;
mod xml;

pub use read::{parse_entries, read_entries, read_package, MAX_ENTRY_SIZE, MAX_TOTAL_SIZE};
pub use validate::{validate_package, Finding, Severity, ValidationReport};
pub use write::{check_invariants, render_entries, write_package};
pub use xml::{shell_from_xml, shell_to_xml, submodel_from_xml, submodel_to_xml};

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{AssetAdministrationShell, IdShort, Submodel};

pub const MANIFEST_PATH: &str = "aasx/manifest.xml";
pub const SHELLS_DIR: &str = "aasx/shells/";
pub const SUBMODELS_DIR: &str = "aasx/submodels/";
pub const SERVICES_DIR: &str = "aasx/services/";
pub const CONTAINERFILE: &str = "Containerfile";
pub const MANIFEST_SPEC_VERSION: &str = "1.0";
pub const CONTENT_TYPE: &str = "application/asset-administration-shell-package";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PackageError {
    #[error("not a ZIP archive: {0}")]
    NotAZip(String),
    #[error("missing manifest {MANIFEST_PATH}")]
    MissingManifest,
    #[error("malformed manifest at {line}:{column}: {message}")]
    MalformedManifest { line: u32, column: u32, message: String },
    #[error("malformed document {path}: {message}")]
    MalformedSubmodel { path: String, message: String },
    #[error("manifest names {0}, which is not in the archive")]
    DanglingManifestEntry(String),
    #[error("entry {0:?} escapes the archive root")]
    PathTraversal(String),
    #[error("corrupt entry {path}: {message}")]
    CorruptEntry { path: String, message: String },
    #[error("entry {0} exceeds the size limit")]
    TooLarge(String),
    #[error("invariant violated ({invariant}) at {entry}")]
    InvariantViolation { invariant: String, entry: String },
}

impl PackageError {
    pub fn code(&self) -> &'static str {
        match self {
            PackageError::NotAZip(_) => "NotAZip",
            PackageError::MissingManifest => "MissingManifest",
            PackageError::MalformedManifest { .. } => "MalformedManifest",
            PackageError::MalformedSubmodel { .. } => "MalformedSubmodel",
            PackageError::DanglingManifestEntry(_) => "DanglingManifestEntry",
            PackageError::PathTraversal(_) => "PathTraversal",
            PackageError::CorruptEntry { .. } => "CorruptEntry",
            PackageError::TooLarge(_) => "TooLarge",
            PackageError::InvariantViolation { .. } => "InvariantViolation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceEntry {
    pub service_id: IdShort,
    /// Semantic version string as declared by the package author.
    pub version: String,
    /// Directory prefix under [`SERVICES_DIR`], ending in `/`.
    pub context_dir: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PackageManifest {
    pub spec_version: String,
    pub shell_entries: Vec<String>,
    pub submodel_entries: Vec<String>,
    pub service_entries: Vec<ServiceEntry>,
}

impl Default for PackageManifest {
    fn default() -> Self {
        Self {
            spec_version: MANIFEST_SPEC_VERSION.to_string(),
            shell_entries: Vec::new(),
            submodel_entries: Vec::new(),
            service_entries: Vec::new(),
        }
    }
}

/// A service build context: the containerfile plus supporting files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceContextEntry {
    pub service_id: IdShort,
    pub declared_version: String,
    #[serde(skip)]
    pub containerfile: Vec<u8>,
    /// Context-relative path to content, excluding the containerfile.
    #[serde(skip)]
    pub files: BTreeMap<String, Vec<u8>>,
    pub content_hash: String,
}

impl ServiceContextEntry {
    pub fn new(
        service_id: IdShort,
        declared_version: impl Into<String>,
        containerfile: Vec<u8>,
        files: BTreeMap<String, Vec<u8>>,
    ) -> Self {
        let content_hash = context_hash(&containerfile, &files);
        Self {
            service_id,
            declared_version: declared_version.into(),
            containerfile,
            files,
            content_hash,
        }
    }

    /// All context files including the containerfile, sorted by path.
    pub fn tree(&self) -> BTreeMap<String, Vec<u8>> {
        let mut tree = self.files.clone();
        tree.insert(CONTAINERFILE.to_string(), self.containerfile.clone());
        tree
    }
}

/// SHA-256 over a canonical, timestamp-free serialization of the context.
///
/// Entries are sorted by path; each contributes a big-endian u64 path length,
/// the path, a big-endian u64 content length and the content.
pub fn context_hash(containerfile: &[u8], files: &BTreeMap<String, Vec<u8>>) -> String {
    let mut tree: BTreeMap<&str, &[u8]> = files.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
    tree.insert(CONTAINERFILE, containerfile);
    tree_hash(tree)
}

pub(crate) fn tree_hash<'a>(tree: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"aasrt-context-v1\n");
    for (path, content) in tree {
        hasher.update((path.len() as u64).to_be_bytes());
        hasher.update(path.as_bytes());
        hasher.update((content.len() as u64).to_be_bytes());
        hasher.update(content);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AasxPackage {
    pub manifest: PackageManifest,
    pub shells: Vec<(String, AssetAdministrationShell)>,
    pub submodel_docs: Vec<(String, Submodel)>,
    /// Same order as `manifest.service_entries`.
    pub service_contexts: Vec<ServiceContextEntry>,
    pub supplementary_files: BTreeMap<String, Vec<u8>>,
}

impl AasxPackage {
    pub fn new() -> Self {
        Self::default()
    }

    fn unique_path(&self, dir: &str, stem: &str) -> String {
        let taken = |p: &str| {
            self.shells.iter().any(|(q, _)| q == p) || self.submodel_docs.iter().any(|(q, _)| q == p)
        };
        let mut path = format!("{dir}{stem}.xml");
        let mut n = 1;
        while taken(&path) {
            n += 1;
            path = format!("{dir}{stem}_{n}.xml");
        }
        path
    }

    pub fn add_shell(&mut self, shell: AssetAdministrationShell) -> &mut Self {
        let path = self.unique_path(SHELLS_DIR, shell.id_short.as_str());
        self.add_shell_at(path, shell)
    }

    pub fn add_shell_at(&mut self, path: impl Into<String>, shell: AssetAdministrationShell) -> &mut Self {
        let path = path.into();
        self.manifest.shell_entries.push(path.clone());
        self.shells.push((path, shell));
        self
    }

    pub fn add_submodel(&mut self, sm: Submodel) -> &mut Self {
        let path = self.unique_path(SUBMODELS_DIR, sm.id_short.as_str());
        self.add_submodel_at(path, sm)
    }

    pub fn add_submodel_at(&mut self, path: impl Into<String>, sm: Submodel) -> &mut Self {
        let path = path.into();
        self.manifest.submodel_entries.push(path.clone());
        self.submodel_docs.push((path, sm));
        self
    }

    pub fn add_service(&mut self, context: ServiceContextEntry) -> &mut Self {
        self.manifest.service_entries.push(ServiceEntry {
            service_id: context.service_id.clone(),
            version: context.declared_version.clone(),
            context_dir: format!("{SERVICES_DIR}{}/", context.service_id),
        });
        self.service_contexts.push(context);
        self
    }

    pub fn add_file(&mut self, path: impl Into<String>, content: Vec<u8>) -> &mut Self {
        self.supplementary_files.insert(path.into(), content);
        self
    }

    pub fn submodels(&self) -> impl Iterator<Item = &Submodel> {
        self.submodel_docs.iter().map(|(_, sm)| sm)
    }

    pub fn context(&self, service_id: &IdShort) -> Option<&ServiceContextEntry> {
        self.service_contexts.iter().find(|c| &c.service_id == service_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_frames_entries() {
        let mut a = BTreeMap::new();
        a.insert("ab".to_string(), b"c".to_vec());
        let mut b = BTreeMap::new();
        b.insert("a".to_string(), b"bc".to_vec());
        assert_ne!(context_hash(b"FROM x", &a), context_hash(b"FROM x", &b));
    }

    #[test]
    fn hash_matches_independent_framing() {
        // Framing rebuilt by hand: sorted entries, u64 BE lengths.
        let mut files = BTreeMap::new();
        files.insert("app.py".to_string(), b"print(1)\n".to_vec());
        let containerfile = b"FROM python:3.12-alpine\n".to_vec();
        let mut manual = b"aasrt-context-v1\n".to_vec();
        for (p, c) in [("Containerfile", containerfile.as_slice()), ("app.py", b"print(1)\n".as_slice())] {
            manual.extend((p.len() as u64).to_be_bytes());
            manual.extend(p.as_bytes());
            manual.extend((c.len() as u64).to_be_bytes());
            manual.extend(c);
        }
        assert_eq!(context_hash(&containerfile, &files), hex::encode(Sha256::digest(&manual)));
    }
}
