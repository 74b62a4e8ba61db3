use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Write};

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipWriter};

use super::read::is_normalized;
use super::xml::{is_xml_representable, manifest_to_xml, shell_to_xml, submodel_to_xml};
use super::{AasxPackage, PackageError, CONTAINERFILE, MANIFEST_PATH, SERVICES_DIR};

fn violation(invariant: &str, entry: impl Into<String>) -> PackageError {
    PackageError::InvariantViolation {
        invariant: invariant.to_string(),
        entry: entry.into(),
    }
}

fn is_document_path(path: &str) -> bool {
    path.ends_with(".xml") || path.ends_with(".json")
}

/// Checks every structural invariant `write_package` relies on.
pub fn check_invariants(pkg: &AasxPackage) -> Result<(), PackageError> {
    let m = &pkg.manifest;
    let shell_paths: Vec<&String> = pkg.shells.iter().map(|(p, _)| p).collect();
    let doc_paths: Vec<&String> = pkg.submodel_docs.iter().map(|(p, _)| p).collect();
    if m.shell_entries.iter().collect::<Vec<_>>() != shell_paths {
        return Err(violation("manifest shell entries match shell documents", MANIFEST_PATH));
    }
    if m.submodel_entries.iter().collect::<Vec<_>>() != doc_paths {
        return Err(violation("manifest submodel entries match submodel documents", MANIFEST_PATH));
    }
    if m.service_entries.len() != pkg.service_contexts.len() {
        return Err(violation("manifest service entries match service contexts", MANIFEST_PATH));
    }

    if !is_xml_representable(&manifest_to_xml(m)) {
        return Err(violation("text representable in XML", MANIFEST_PATH));
    }

    let mut taken: BTreeSet<String> = BTreeSet::new();
    taken.insert(MANIFEST_PATH.to_string());
    let mut claim = |path: &str| -> Result<(), PackageError> {
        if !is_normalized(path) {
            return Err(PackageError::PathTraversal(path.to_string()));
        }
        if path == "[Content_Types].xml" || path.starts_with("_rels/") || path.contains("/_rels/") {
            return Err(violation("no packaging relationship parts", path));
        }
        if !taken.insert(path.to_string()) {
            return Err(violation("entry paths unique", path));
        }
        Ok(())
    };

    let mut shell_ids = BTreeSet::new();
    for (path, shell) in &pkg.shells {
        claim(path)?;
        if !is_document_path(path) {
            return Err(violation("documents end in .xml or .json", path));
        }
        shell.validate().map_err(|e| violation(&e.to_string(), path))?;
        if !shell_ids.insert(&shell.id) {
            return Err(violation("shell ids unique", path));
        }
        if path.ends_with(".xml") && !is_xml_representable(&shell_to_xml(shell)) {
            return Err(violation("text representable in XML", path));
        }
    }
    let mut submodel_ids = BTreeSet::new();
    for (path, sm) in &pkg.submodel_docs {
        claim(path)?;
        if !is_document_path(path) {
            return Err(violation("documents end in .xml or .json", path));
        }
        sm.validate().map_err(|e| violation(&e.to_string(), path))?;
        if !submodel_ids.insert(&sm.id) {
            return Err(violation("submodel ids unique", path));
        }
        if path.ends_with(".xml") && !is_xml_representable(&submodel_to_xml(sm)) {
            return Err(violation("text representable in XML", path));
        }
    }

    let mut service_ids = BTreeSet::new();
    let mut context_dirs = Vec::new();
    for (entry, ctx) in m.service_entries.iter().zip(&pkg.service_contexts) {
        let dir = format!("{SERVICES_DIR}{}/", ctx.service_id);
        if !service_ids.insert(&ctx.service_id) {
            return Err(violation("service ids unique", dir));
        }
        if entry.service_id != ctx.service_id || entry.version != ctx.declared_version || entry.context_dir != dir {
            return Err(violation("manifest service entries match service contexts", dir));
        }
        if semver::Version::parse(&ctx.declared_version).is_err() {
            return Err(violation("declared version is semver", dir));
        }
        if ctx.containerfile.is_empty() {
            return Err(violation("containerfile non-empty", format!("{dir}{CONTAINERFILE}")));
        }
        if ctx.content_hash != super::context_hash(&ctx.containerfile, &ctx.files) {
            return Err(violation("content hash matches context", dir));
        }
        claim(&format!("{dir}{CONTAINERFILE}"))?;
        for path in ctx.files.keys() {
            if path == CONTAINERFILE {
                return Err(violation("containerfile stored once", format!("{dir}{path}")));
            }
            claim(&format!("{dir}{path}"))?;
        }
        context_dirs.push(dir);
    }
    for path in pkg.supplementary_files.keys() {
        claim(path)?;
        if context_dirs.iter().any(|d| path.starts_with(d.as_str())) {
            return Err(violation("supplementary files outside service contexts", path));
        }
    }
    // A file path must not also be a directory prefix of another entry.
    for path in &taken {
        let dir_form = format!("{path}/");
        if taken.range(dir_form.clone()..).next().is_some_and(|n| n.starts_with(&dir_form)) {
            return Err(violation("no entry is both file and directory", path.as_str()));
        }
    }
    Ok(())
}

/// Every archive entry as `path -> bytes`, the manifest included.
pub fn render_entries(pkg: &AasxPackage) -> BTreeMap<String, Vec<u8>> {
    let mut entries = BTreeMap::new();
    entries.insert(MANIFEST_PATH.to_string(), manifest_to_xml(&pkg.manifest).into_bytes());
    for (path, shell) in &pkg.shells {
        let bytes = if path.ends_with(".json") {
            json_bytes(shell)
        } else {
            shell_to_xml(shell).into_bytes()
        };
        entries.insert(path.clone(), bytes);
    }
    for (path, sm) in &pkg.submodel_docs {
        let bytes = if path.ends_with(".json") {
            let mut sm = sm.clone();
            sm.version = 1;
            json_bytes(&sm)
        } else {
            submodel_to_xml(sm).into_bytes()
        };
        entries.insert(path.clone(), bytes);
    }
    for ctx in &pkg.service_contexts {
        let dir = format!("{SERVICES_DIR}{}/", ctx.service_id);
        for (path, content) in ctx.tree() {
            entries.insert(format!("{dir}{path}"), content);
        }
    }
    for (path, content) in &pkg.supplementary_files {
        entries.insert(path.clone(), content.clone());
    }
    entries
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("model types serialize");
    bytes.push(b'\n');
    bytes
}

/// Serializes a package. Equal packages always yield byte-identical archives:
/// manifest first, then entries in lexicographic order, fixed timestamps,
/// permissions and compression level.
pub fn write_package(pkg: &AasxPackage) -> Result<Vec<u8>, PackageError> {
    check_invariants(pkg)?;
    let mut entries = render_entries(pkg);
    let manifest = entries.remove(MANIFEST_PATH).expect("manifest rendered");
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .compression_level(Some(6))
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    let io = |e: std::io::Error| violation(&format!("archive write: {e}"), "");
    for (path, content) in std::iter::once((MANIFEST_PATH.to_string(), manifest)).chain(entries) {
        zip.start_file(path.as_str(), options)
            .map_err(|e| violation(&format!("archive write: {e}"), path.as_str()))?;
        zip.write_all(&content).map_err(io)?;
    }
    let cursor = zip.finish().map_err(|e| violation(&format!("archive write: {e}"), ""))?;
    Ok(cursor.into_inner())
}
