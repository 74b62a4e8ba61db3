//! XML encodings of the manifest, submodels and shells.
//!
//! Manifest grammar:
//!
//! ```xml
//! <manifest specVersion="1.0">
//!   <shell path="aasx/shells/Machine.xml"/>
//!   <submodel path="aasx/submodels/Position.xml"/>
//!   <service id="svc" version="1.0.0" context="aasx/services/svc/"/>
//! </manifest>
//! ```
//!
//! Submodel documents mirror the model types: `<submodel id idShort semanticId?>`
//! containing `<property idShort valueType>text</property>`,
//! `<reference idShort submodel aas? path?/>`, `<file idShort contentType path/>`
//! and `<collection idShort>...</collection>`.

use std::fmt::Write;

use roxmltree::{Document, Node};

use super::{PackageManifest, ServiceEntry};
use crate::model::{
    parse_dotted, AasId, AssetAdministrationShell, Collection, ElementReference, FileElement, IdShort, Property,
    ReferenceElement, Submodel, SubmodelElement, Value, ValueType,
};

const XML_DECL: &str = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";

/// Parse failure with a 1-based source position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct XmlError {
    pub line: u32,
    pub column: u32,
    pub message: String,
}

impl std::fmt::Display for XmlError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

fn at(node: Node<'_, '_>, message: impl Into<String>) -> XmlError {
    let pos = node.document().text_pos_at(node.range().start);
    XmlError {
        line: pos.row,
        column: pos.col,
        message: message.into(),
    }
}

fn parse_doc(text: &str) -> Result<Document<'_>, XmlError> {
    Document::parse(text).map_err(|e| {
        let pos = e.pos();
        XmlError {
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })
}

fn utf8(bytes: &[u8]) -> Result<&str, XmlError> {
    std::str::from_utf8(bytes).map_err(|e| XmlError {
        line: 1,
        column: 1,
        message: format!("not UTF-8: {e}"),
    })
}

fn attr<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str, XmlError> {
    node.attribute(name)
        .ok_or_else(|| at(node, format!("<{}> requires attribute {name}", node.tag_name().name())))
}

fn elements<'a, 'i>(node: Node<'a, 'i>) -> Result<Vec<Node<'a, 'i>>, XmlError> {
    let mut out = Vec::new();
    for child in node.children() {
        if child.is_element() {
            out.push(child);
        } else if child.is_text() && !child.text().unwrap_or("").trim().is_empty() {
            return Err(at(child, format!("unexpected text inside <{}>", node.tag_name().name())));
        }
    }
    Ok(out)
}

/// Escapes text content; `\r` is kept as a character reference so it survives line-end normalization.
fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
    out
}

fn escape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\r' => out.push_str("&#13;"),
            '\n' => out.push_str("&#10;"),
            '\t' => out.push_str("&#9;"),
            c => out.push(c),
        }
    }
    out
}

/// True when every character can appear in an XML 1.0 document.
pub(crate) fn is_xml_representable(s: &str) -> bool {
    s.chars().all(|c| {
        matches!(c, '\t' | '\n' | '\r')
            || ('\u{20}'..='\u{D7FF}').contains(&c)
            || ('\u{E000}'..='\u{FFFD}').contains(&c)
            || c >= '\u{10000}'
    })
}

pub(crate) fn manifest_to_xml(m: &PackageManifest) -> String {
    let mut out = String::from(XML_DECL);
    let _ = writeln!(out, "<manifest specVersion=\"{}\">", escape_attr(&m.spec_version));
    for p in &m.shell_entries {
        let _ = writeln!(out, "  <shell path=\"{}\"/>", escape_attr(p));
    }
    for p in &m.submodel_entries {
        let _ = writeln!(out, "  <submodel path=\"{}\"/>", escape_attr(p));
    }
    for s in &m.service_entries {
        let _ = writeln!(
            out,
            "  <service id=\"{}\" version=\"{}\" context=\"{}\"/>",
            escape_attr(s.service_id.as_str()),
            escape_attr(&s.version),
            escape_attr(&s.context_dir)
        );
    }
    out.push_str("</manifest>\n");
    out
}

pub(crate) fn manifest_from_xml(bytes: &[u8]) -> Result<PackageManifest, XmlError> {
    let doc = parse_doc(utf8(bytes)?)?;
    let root = doc.root_element();
    if root.tag_name().name() != "manifest" {
        return Err(at(root, format!("root element must be <manifest>, found <{}>", root.tag_name().name())));
    }
    let mut m = PackageManifest {
        spec_version: attr(root, "specVersion")?.to_string(),
        ..PackageManifest::default()
    };
    for child in elements(root)? {
        match child.tag_name().name() {
            "shell" | "submodel" => {
                let path = attr(child, "path")?.to_string();
                if m.shell_entries.contains(&path) || m.submodel_entries.contains(&path) {
                    return Err(at(child, format!("path {path:?} listed twice")));
                }
                if child.tag_name().name() == "shell" {
                    m.shell_entries.push(path);
                } else {
                    m.submodel_entries.push(path);
                }
            }
            "service" => {
                let id = attr(child, "id")?;
                let service_id = IdShort::new(id).map_err(|e| at(child, e.to_string()))?;
                let version = attr(child, "version")?;
                semver::Version::parse(version)
                    .map_err(|e| at(child, format!("version {version:?} is not semver: {e}")))?;
                let context_dir = attr(child, "context")?;
                let expected = format!("{}{service_id}/", super::SERVICES_DIR);
                if context_dir != expected {
                    return Err(at(child, format!("context of service {service_id} must be {expected:?}")));
                }
                if m.service_entries.iter().any(|s| s.service_id == service_id) {
                    return Err(at(child, format!("service id {service_id} declared twice")));
                }
                m.service_entries.push(ServiceEntry {
                    service_id,
                    version: version.to_string(),
                    context_dir: context_dir.to_string(),
                });
            }
            other => return Err(at(child, format!("unknown manifest element <{other}>"))),
        }
    }
    Ok(m)
}

fn write_reference_attrs(out: &mut String, r: &ElementReference, submodel_attr: &str) {
    let _ = write!(out, " {submodel_attr}=\"{}\"", escape_attr(r.submodel_id.as_str()));
    if let Some(aas) = &r.aas_id {
        let _ = write!(out, " aas=\"{}\"", escape_attr(aas.as_str()));
    }
    if !r.element_path.is_empty() {
        let _ = write!(out, " path=\"{}\"", escape_attr(&r.dotted_path()));
    }
}

fn read_reference(node: Node<'_, '_>, submodel_attr: &str) -> Result<ElementReference, XmlError> {
    let submodel_id = AasId::new(attr(node, submodel_attr)?).map_err(|e| at(node, e.to_string()))?;
    let aas_id = node
        .attribute("aas")
        .map(AasId::new)
        .transpose()
        .map_err(|e| at(node, e.to_string()))?;
    let element_path = parse_dotted(node.attribute("path").unwrap_or("")).map_err(|e| at(node, e.to_string()))?;
    Ok(ElementReference {
        aas_id,
        submodel_id,
        element_path,
    })
}

fn write_element(out: &mut String, e: &SubmodelElement, depth: usize) {
    let indent = "  ".repeat(depth);
    match e {
        SubmodelElement::Property(p) => {
            let _ = writeln!(
                out,
                "{indent}<property idShort=\"{}\" valueType=\"{}\">{}</property>",
                p.id_short,
                p.value_type(),
                escape_text(&p.value.lexical())
            );
        }
        SubmodelElement::Reference(r) => {
            let _ = write!(out, "{indent}<reference idShort=\"{}\"", r.id_short);
            write_reference_attrs(out, &r.target, "submodel");
            out.push_str("/>\n");
        }
        SubmodelElement::File(f) => {
            let _ = writeln!(
                out,
                "{indent}<file idShort=\"{}\" contentType=\"{}\" path=\"{}\"/>",
                f.id_short,
                escape_attr(&f.content_type),
                escape_attr(&f.path)
            );
        }
        SubmodelElement::Collection(c) => {
            if c.children.is_empty() {
                let _ = writeln!(out, "{indent}<collection idShort=\"{}\"/>", c.id_short);
            } else {
                let _ = writeln!(out, "{indent}<collection idShort=\"{}\">", c.id_short);
                for child in &c.children {
                    write_element(out, child, depth + 1);
                }
                let _ = writeln!(out, "{indent}</collection>");
            }
        }
    }
}

fn read_element(node: Node<'_, '_>) -> Result<SubmodelElement, XmlError> {
    let id_short = IdShort::new(attr(node, "idShort")?).map_err(|e| at(node, e.to_string()))?;
    match node.tag_name().name() {
        "property" => {
            let vt: ValueType = attr(node, "valueType")?.parse().map_err(|e: crate::model::ModelError| at(node, e.to_string()))?;
            if let Some(child) = node.children().find(|c| c.is_element()) {
                return Err(at(child, "a property holds text only"));
            }
            let text: String = node.children().filter_map(|c| c.text()).collect();
            let value = Value::parse(vt, &text).map_err(|e| at(node, e.to_string()))?;
            Ok(SubmodelElement::Property(Property { id_short, value }))
        }
        "reference" => Ok(SubmodelElement::Reference(ReferenceElement {
            id_short,
            target: read_reference(node, "submodel")?,
        })),
        "file" => Ok(SubmodelElement::File(FileElement {
            id_short,
            content_type: attr(node, "contentType")?.to_string(),
            path: attr(node, "path")?.to_string(),
        })),
        "collection" => {
            let children = elements(node)?
                .into_iter()
                .map(read_element)
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SubmodelElement::Collection(Collection { id_short, children }))
        }
        other => Err(at(node, format!("unknown element <{other}>"))),
    }
}

pub fn submodel_to_xml(sm: &Submodel) -> String {
    let mut out = String::from(XML_DECL);
    let _ = write!(
        out,
        "<submodel id=\"{}\" idShort=\"{}\"",
        escape_attr(sm.id.as_str()),
        sm.id_short
    );
    if let Some(sem) = &sm.semantic_id {
        let _ = write!(out, " semanticId=\"{}\"", escape_attr(sem));
    }
    out.push_str(">\n");
    for e in &sm.elements {
        write_element(&mut out, e, 1);
    }
    out.push_str("</submodel>\n");
    out
}

pub(crate) fn submodel_from_xml_inner(bytes: &[u8]) -> Result<Submodel, XmlError> {
    let doc = parse_doc(utf8(bytes)?)?;
    let root = doc.root_element();
    if root.tag_name().name() != "submodel" {
        return Err(at(root, "root element must be <submodel>"));
    }
    let mut sm = Submodel::new(
        AasId::new(attr(root, "id")?).map_err(|e| at(root, e.to_string()))?,
        IdShort::new(attr(root, "idShort")?).map_err(|e| at(root, e.to_string()))?,
    );
    sm.semantic_id = root.attribute("semanticId").map(str::to_string);
    for child in elements(root)? {
        sm.elements.push(read_element(child)?);
    }
    sm.validate().map_err(|e| at(root, e.to_string()))?;
    Ok(sm)
}

/// Parses a submodel document; the error string carries `line:column`.
pub fn submodel_from_xml(bytes: &[u8]) -> Result<Submodel, String> {
    submodel_from_xml_inner(bytes).map_err(|e| e.to_string())
}

pub fn shell_to_xml(shell: &AssetAdministrationShell) -> String {
    let mut out = String::from(XML_DECL);
    let _ = writeln!(
        out,
        "<shell id=\"{}\" idShort=\"{}\">",
        escape_attr(shell.id.as_str()),
        shell.id_short
    );
    for r in &shell.submodel_refs {
        out.push_str("  <submodelRef");
        write_reference_attrs(&mut out, r, "submodel");
        out.push_str("/>\n");
    }
    out.push_str("</shell>\n");
    out
}

pub(crate) fn shell_from_xml_inner(bytes: &[u8]) -> Result<AssetAdministrationShell, XmlError> {
    let doc = parse_doc(utf8(bytes)?)?;
    let root = doc.root_element();
    if root.tag_name().name() != "shell" {
        return Err(at(root, "root element must be <shell>"));
    }
    let mut shell = AssetAdministrationShell::new(
        AasId::new(attr(root, "id")?).map_err(|e| at(root, e.to_string()))?,
        IdShort::new(attr(root, "idShort")?).map_err(|e| at(root, e.to_string()))?,
    );
    for child in elements(root)? {
        if child.tag_name().name() != "submodelRef" {
            return Err(at(child, format!("unknown shell element <{}>", child.tag_name().name())));
        }
        shell.submodel_refs.push(read_reference(child, "submodel")?);
    }
    shell.validate().map_err(|e| at(root, e.to_string()))?;
    Ok(shell)
}

pub fn shell_from_xml(bytes: &[u8]) -> Result<AssetAdministrationShell, String> {
    shell_from_xml_inner(bytes).map_err(|e| e.to_string())
}
