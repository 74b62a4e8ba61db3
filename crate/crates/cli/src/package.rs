use std::collections::BTreeMap;
use std::path::Path;

use aasrt_core::package::{parse_entries, read_package, render_entries, validate_package, write_package, PackageError};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::output::{describe, Failure, Printer};

fn package_failure(e: PackageError) -> Failure {
    Failure::validation(e.code(), e.to_string())
}

fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::config("InputUnreadable", format!("{}: {e}", path.display())))
}

/// Every regular file under `dir`, keyed by its `/`-separated relative path.
pub fn read_tree(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::config("InputUnreadable", format!("{} is not a directory", dir.display())));
    }
    let mut entries = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Failure::config("InputUnreadable", e.to_string()))?;
        if !entry.file_type().is_file() {
            if entry.file_type().is_symlink() {
                tracing::warn!("skipping symlink {}", entry.path().display());
            }
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under its root");
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_str())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Failure::validation("PathTraversal", format!("non UTF-8 path {}", rel.display())))?
            .join("/");
        let bytes = std::fs::read(entry.path()).map_err(|e| Failure::config("InputUnreadable", format!("{key}: {e}")))?;
        entries.insert(key, bytes);
    }
    Ok(entries)
}

pub fn pack(printer: Printer, dir: &Path, output: &Path) -> Result<(), Failure> {
    let pkg = parse_entries(read_tree(dir)?).map_err(package_failure)?;
    let report = validate_package(&pkg);
    let findings = serde_json::to_value(&report.findings).expect("findings serialize");
    if report.has_errors() {
        let errors = report.errors().count();
        return Err(Failure::validation("ValidationFailed", format!("{errors} validation error(s)")).with_details(findings));
    }
    let bytes = write_package(&pkg).map_err(package_failure)?;
    std::fs::write(output, &bytes).map_err(|e| Failure::config("OutputUnwritable", format!("{}: {e}", output.display())))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    printer.emit(
        json!({
            "output": output.display().to_string(),
            "bytes": bytes.len(),
            "sha256": sha256,
            "findings": findings,
        }),
        || {
            let mut text = format!("wrote {} ({} bytes, sha256 {sha256})", output.display(), bytes.len());
            for f in findings.as_array().into_iter().flatten() {
                text.push_str(&format!("\n  {}", describe(f)));
            }
            text
        },
    );
    Ok(())
}

pub fn unpack(printer: Printer, file: &Path, dir: &Path) -> Result<(), Failure> {
    let pkg = read_package(&read_input(file)?).map_err(package_failure)?;
    if dir.exists() && std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(Failure::config("OutputNotEmpty", format!("{} exists and is not an empty directory", dir.display())));
    }
    let entries = render_entries(&pkg);
    for (path, content) in &entries {
        let target = dir.join(path);
        let write = || -> std::io::Result<()> {
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&target, content)
        };
        write().map_err(|e| Failure::config("OutputUnwritable", format!("{}: {e}", target.display())))?;
    }
    let paths: Vec<&String> = entries.keys().collect();
    printer.emit(json!({"directory": dir.display().to_string(), "entries": paths}), || {
        format!("unpacked {} entries into {}", paths.len(), dir.display())
    });
    Ok(())
}

/// Returns whether the package is free of errors.
pub fn validate(printer: Printer, file: &Path) -> Result<bool, Failure> {
    let pkg = read_package(&read_input(file)?).map_err(package_failure)?;
    let report = validate_package(&pkg);
    let valid = !report.has_errors();
    let findings: Value = serde_json::to_value(&report.findings).expect("findings serialize");
    printer.emit(json!({"file": file.display().to_string(), "valid": valid, "findings": findings}), || {
        let mut text = format!(
            "{}: {} ({} error(s), {} warning(s))",
            file.display(),
            if valid { "valid" } else { "invalid" },
            report.errors().count(),
            report.warnings().count()
        );
        for f in findings.as_array().into_iter().flatten() {
            text.push_str(&format!("\n  {}", describe(f)));
        }
        text
    });
    Ok(valid)
}
