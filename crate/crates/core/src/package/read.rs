use std::collections::BTreeMap;
use std::io::{Cursor, Read};

use super::xml::{manifest_from_xml, shell_from_xml_inner, submodel_from_xml_inner};
use super::{
    check_invariants, AasxPackage, PackageError, ServiceContextEntry, CONTAINERFILE, MANIFEST_PATH,
};
use crate::model::{is_relative_path, AssetAdministrationShell, Submodel};

/// Largest accepted uncompressed entry.
pub const MAX_ENTRY_SIZE: u64 = 64 * 1024 * 1024;
/// Largest accepted uncompressed archive.
pub const MAX_TOTAL_SIZE: u64 = 512 * 1024 * 1024;

/// Parses an AASX archive. Nothing is returned unless every part parses.
pub fn read_package(archive: &[u8]) -> Result<AasxPackage, PackageError> {
    parse_entries(read_entries(archive)?)
}

/// True for a normalized archive path: relative, forward slashes, no empty, `.` or `..` segments.
pub(crate) fn is_normalized(path: &str) -> bool {
    is_relative_path(path) && !path.split('/').any(str::is_empty)
}

/// Unpacks every file entry of a ZIP archive into memory, with path and size checks.
pub fn read_entries(archive: &[u8]) -> Result<BTreeMap<String, Vec<u8>>, PackageError> {
    let mut zip = zip::ZipArchive::new(Cursor::new(archive)).map_err(|e| PackageError::NotAZip(e.to_string()))?;
    let mut entries = BTreeMap::new();
    let mut total: u64 = 0;
    for i in 0..zip.len() {
        let mut file = zip.by_index(i).map_err(|e| PackageError::CorruptEntry {
            path: format!("#{i}"),
            message: e.to_string(),
        })?;
        let raw_name = String::from_utf8_lossy(file.name_raw()).into_owned();
        let is_dir = raw_name.ends_with('/');
        let name = raw_name.trim_end_matches('/');
        if !is_relative_path(name) {
            return Err(PackageError::PathTraversal(raw_name));
        }
        if !is_normalized(name) {
            return Err(PackageError::CorruptEntry {
                path: raw_name,
                message: "path is not normalized".into(),
            });
        }
        if is_dir {
            continue;
        }
        if file.size() > MAX_ENTRY_SIZE {
            return Err(PackageError::TooLarge(raw_name));
        }
        let mut content = Vec::new();
        // Declared sizes can lie; cap the actual read as well.
        (&mut file)
            .take(MAX_ENTRY_SIZE + 1)
            .read_to_end(&mut content)
            .map_err(|e| PackageError::CorruptEntry {
                path: raw_name.clone(),
                message: e.to_string(),
            })?;
        if content.len() as u64 > MAX_ENTRY_SIZE {
            return Err(PackageError::TooLarge(raw_name));
        }
        total += content.len() as u64;
        if total > MAX_TOTAL_SIZE {
            return Err(PackageError::TooLarge(raw_name));
        }
        if entries.insert(name.to_string(), content).is_some() {
            return Err(PackageError::CorruptEntry {
                path: raw_name,
                message: "duplicate entry".into(),
            });
        }
    }
    Ok(entries)
}

fn is_opc_part(path: &str) -> bool {
    path == "[Content_Types].xml" || path.starts_with("_rels/") || path.contains("/_rels/")
}

fn document_error(path: &str, message: impl Into<String>) -> PackageError {
    PackageError::MalformedSubmodel {
        path: path.to_string(),
        message: message.into(),
    }
}

fn parse_submodel_doc(path: &str, bytes: &[u8]) -> Result<Submodel, PackageError> {
    let mut sm = if path.ends_with(".xml") {
        submodel_from_xml_inner(bytes).map_err(|e| document_error(path, e.to_string()))?
    } else if path.ends_with(".json") {
        let sm: Submodel = serde_json::from_slice(bytes).map_err(|e| document_error(path, e.to_string()))?;
        sm.validate().map_err(|e| document_error(path, e.to_string()))?;
        sm
    } else {
        return Err(document_error(path, "unsupported document extension, expected .xml or .json"));
    };
    sm.version = 1;
    Ok(sm)
}

fn parse_shell_doc(path: &str, bytes: &[u8]) -> Result<AssetAdministrationShell, PackageError> {
    if path.ends_with(".xml") {
        shell_from_xml_inner(bytes).map_err(|e| document_error(path, e.to_string()))
    } else if path.ends_with(".json") {
        let shell: AssetAdministrationShell =
            serde_json::from_slice(bytes).map_err(|e| document_error(path, e.to_string()))?;
        shell.validate().map_err(|e| document_error(path, e.to_string()))?;
        Ok(shell)
    } else {
        Err(document_error(path, "unsupported document extension, expected .xml or .json"))
    }
}

/// Builds a package from already unpacked `path -> bytes` entries.
///
/// Used both for archives and for source directories laid out by the same convention.
pub fn parse_entries(mut entries: BTreeMap<String, Vec<u8>>) -> Result<AasxPackage, PackageError> {
    entries.retain(|path, _| !is_opc_part(path));
    if let Some(bad) = entries.keys().find(|p| !is_relative_path(p)) {
        return Err(PackageError::PathTraversal(bad.clone()));
    }
    let manifest_bytes = entries.remove(MANIFEST_PATH).ok_or(PackageError::MissingManifest)?;
    let manifest = manifest_from_xml(&manifest_bytes).map_err(|e| PackageError::MalformedManifest {
        line: e.line,
        column: e.column,
        message: e.message,
    })?;
    for path in manifest.shell_entries.iter().chain(&manifest.submodel_entries) {
        if !is_normalized(path) {
            return Err(PackageError::PathTraversal(path.clone()));
        }
    }

    let mut pkg = AasxPackage {
        manifest: manifest.clone(),
        ..AasxPackage::default()
    };
    for path in &manifest.shell_entries {
        let bytes = entries
            .remove(path)
            .ok_or_else(|| PackageError::DanglingManifestEntry(path.clone()))?;
        pkg.shells.push((path.clone(), parse_shell_doc(path, &bytes)?));
    }
    for path in &manifest.submodel_entries {
        let bytes = entries
            .remove(path)
            .ok_or_else(|| PackageError::DanglingManifestEntry(path.clone()))?;
        let sm = parse_submodel_doc(path, &bytes)?;
        if pkg.submodels().any(|other| other.id == sm.id) {
            return Err(document_error(path, format!("submodel id {} appears twice", sm.id)));
        }
        pkg.submodel_docs.push((path.clone(), sm));
    }
    for service in &manifest.service_entries {
        let containerfile_path = format!("{}{CONTAINERFILE}", service.context_dir);
        let containerfile = entries
            .remove(&containerfile_path)
            .ok_or(PackageError::DanglingManifestEntry(containerfile_path))?;
        let in_context: Vec<String> = entries
            .range(service.context_dir.clone()..)
            .take_while(|(p, _)| p.starts_with(&service.context_dir))
            .map(|(p, _)| p.clone())
            .collect();
        let files = in_context
            .into_iter()
            .map(|p| {
                let content = entries.remove(&p).unwrap_or_default();
                (p[service.context_dir.len()..].to_string(), content)
            })
            .collect();
        pkg.service_contexts.push(ServiceContextEntry::new(
            service.service_id.clone(),
            service.version.clone(),
            containerfile,
            files,
        ));
    }
    pkg.supplementary_files = entries;
    check_invariants(&pkg)?;
    Ok(pkg)
}
