use serde::Serialize;

use super::{check_invariants, AasxPackage, MANIFEST_PATH};
use crate::model::SubmodelElement;
use crate::service_execution::{parse_spec, ContextRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: String,
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    fn push(&mut self, severity: Severity, code: &str, path: impl Into<String>, message: impl Into<String>) {
        self.findings.push(Finding {
            severity,
            code: code.to_string(),
            path: path.into(),
            message: message.into(),
        });
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Warning)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }
}

fn walk_files<'a>(elements: &'a [SubmodelElement], out: &mut Vec<&'a str>) {
    for e in elements {
        match e {
            SubmodelElement::File(f) => out.push(&f.path),
            SubmodelElement::Collection(c) => walk_files(&c.children, out),
            _ => {}
        }
    }
}

/// Cross-checks documents, specs and service contexts. Findings are data, never errors.
pub fn validate_package(pkg: &AasxPackage) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Err(e) = check_invariants(pkg) {
        report.push(Severity::Error, e.code(), MANIFEST_PATH, e.to_string());
    }

    let mut referenced = Vec::new();
    let mut spec_ids = Vec::new();
    for (path, sm) in &pkg.submodel_docs {
        let spec = match parse_spec(sm) {
            Ok(Some(spec)) => spec,
            Ok(None) => continue,
            Err(e) => {
                report.push(Severity::Error, "MalformedSpec", path, e.to_string());
                continue;
            }
        };
        if spec_ids.contains(&spec.service_id) {
            report.push(
                Severity::Error,
                "DuplicateServiceId",
                path,
                format!("service id {} is declared by more than one spec", spec.service_id),
            );
        }
        spec_ids.push(spec.service_id.clone());
        if let ContextRef::Package {
            service_ref,
            content_hash,
        } = &spec.context
        {
            referenced.push(service_ref.clone());
            match pkg.context(service_ref) {
                None => report.push(
                    Severity::Error,
                    "MissingContext",
                    path,
                    format!("spec {} names context {service_ref}, which the package does not contain", spec.service_id),
                ),
                Some(ctx) => {
                    if let Some(expected) = content_hash {
                        if *expected != ctx.content_hash {
                            report.push(
                                Severity::Error,
                                "ContextHashMismatch",
                                path,
                                format!("spec pins {expected}, context {service_ref} hashes to {}", ctx.content_hash),
                            );
                        }
                    }
                }
            }
        }
        for named in spec.inputs.iter().chain(&spec.outputs) {
            if !pkg.submodels().any(|s| s.id == named.reference.submodel_id) {
                report.push(
                    Severity::Warning,
                    "ExternalReference",
                    path,
                    format!("{} points at {}, which is not in this package", named.name, named.reference),
                );
            }
        }
    }
    for ctx in &pkg.service_contexts {
        if !referenced.contains(&ctx.service_id) {
            report.push(
                Severity::Warning,
                "OrphanContext",
                format!("{}{}/", super::SERVICES_DIR, ctx.service_id),
                format!("no service execution submodel references context {}", ctx.service_id),
            );
        }
    }
    for (path, sm) in &pkg.submodel_docs {
        let mut files = Vec::new();
        walk_files(&sm.elements, &mut files);
        for file in files {
            if !pkg.supplementary_files.contains_key(file) {
                report.push(
                    Severity::Warning,
                    "MissingFile",
                    path,
                    format!("file element points at {file}, which is not in the package"),
                );
            }
        }
    }
    for (path, shell) in &pkg.shells {
        for r in &shell.submodel_refs {
            if !pkg.submodels().any(|s| s.id == r.submodel_id) {
                report.push(
                    Severity::Warning,
                    "ExternalReference",
                    path,
                    format!("shell {} references submodel {}, which is not in this package", shell.id, r.submodel_id),
                );
            }
        }
    }
    report
}
