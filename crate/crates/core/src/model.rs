//! The implemented subset of the AAS metamodel.
//!
//! Shells, submodels, four submodel element variants (property, reference,
//! file, collection) and element references. Everything here is a plain
//! value type; validation happens at construction or through [`Submodel::validate`].

use std::fmt;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum nesting depth of collections inside a submodel.
pub const MAX_COLLECTION_DEPTH: usize = 16;

const MAX_ID_SHORT_LEN: usize = 128;

/// Characters escaped when an identifier is embedded in a canonical path.
const PATH_ID: &AsciiSet = &CONTROLS
    .add(b' ')
    .add(b'"')
    .add(b'#')
    .add(b'%')
    .add(b'/')
    .add(b'<')
    .add(b'>')
    .add(b'?')
    .add(b'\\')
    .add(b'`')
    .add(b'{')
    .add(b'}');

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid identifier {0:?}: expected an IRI with a scheme")]
    InvalidId(String),
    #[error("invalid idShort {0:?}")]
    InvalidIdShort(String),
    #[error("duplicate idShort {id_short} in {parent}")]
    DuplicateIdShort { parent: String, id_short: String },
    #[error("collection nesting deeper than {MAX_COLLECTION_DEPTH} at {0}")]
    NestingTooDeep(String),
    #[error("invalid file path {0:?}: must be relative without `..` segments")]
    InvalidFilePath(String),
    #[error("value {value:?} is not a valid {value_type}")]
    TypeMismatch { value_type: ValueType, value: String },
    #[error("unknown value type {0:?}")]
    UnknownValueType(String),
    #[error("malformed canonical path {0:?}")]
    MalformedPath(String),
    #[error("duplicate submodel reference {0}")]
    DuplicateSubmodelRef(String),
}

/// Globally unique identifier (an IRI such as `urn:x:sm1` or `https://...`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AasId(String);

impl AasId {
    pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        if is_valid_iri(&value) {
            Ok(Self(value))
        } else {
            Err(ModelError::InvalidId(value))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn is_valid_iri(value: &str) -> bool {
    let Some((scheme, rest)) = value.split_once(':') else {
        return false;
    };
    let mut chars = scheme.chars();
    let scheme_ok = chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'));
    scheme_ok && !rest.is_empty() && !value.chars().any(|c| c.is_whitespace() || c.is_control())
}

impl TryFrom<String> for AasId {
    type Error = ModelError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<AasId> for String {
    fn from(id: AasId) -> Self {
        id.0
    }
}

impl fmt::Display for AasId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Short name of an element: a letter followed by letters, digits or `_`.
///
/// The charset excludes `.` and `/`, which keeps dotted element paths unambiguous.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct IdShort(String);

impl IdShort {
    pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        if Self::is_valid(&value) {
            Ok(Self(value))
        } else {
            Err(ModelError::InvalidIdShort(value))
        }
    }

    pub fn is_valid(value: &str) -> bool {
        let mut chars = value.chars();
        value.len() <= MAX_ID_SHORT_LEN
            && chars.next().is_some_and(|c| c.is_ascii_alphabetic())
            && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for IdShort {
    type Error = ModelError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<IdShort> for String {
    fn from(id: IdShort) -> Self {
        id.0
    }
}

impl fmt::Display for IdShort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    String,
    Integer,
    Double,
    Boolean,
}

impl ValueType {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueType::String => "string",
            ValueType::Integer => "integer",
            ValueType::Double => "double",
            ValueType::Boolean => "boolean",
        }
    }
}

impl std::str::FromStr for ValueType {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "string" => Ok(ValueType::String),
            "integer" => Ok(ValueType::Integer),
            "double" => Ok(ValueType::Double),
            "boolean" => Ok(ValueType::Boolean),
            other => Err(ModelError::UnknownValueType(other.to_string())),
        }
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Typed scalar held by a [`Property`]. Doubles are always finite.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    String(String),
    Integer(i64),
    Double(f64),
    Boolean(bool),
}

impl Value {
    pub fn value_type(&self) -> ValueType {
        match self {
            Value::String(_) => ValueType::String,
            Value::Integer(_) => ValueType::Integer,
            Value::Double(_) => ValueType::Double,
            Value::Boolean(_) => ValueType::Boolean,
        }
    }

    /// Parses the lexical form used in XML documents and string payloads.
    pub fn parse(value_type: ValueType, lexical: &str) -> Result<Self, ModelError> {
        let mismatch = || ModelError::TypeMismatch {
            value_type,
            value: lexical.to_string(),
        };
        match value_type {
            ValueType::String => Ok(Value::String(lexical.to_string())),
            ValueType::Integer => lexical.trim().parse().map(Value::Integer).map_err(|_| mismatch()),
            ValueType::Double => match lexical.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Value::Double(v)),
                _ => Err(mismatch()),
            },
            ValueType::Boolean => match lexical.trim() {
                "true" | "1" => Ok(Value::Boolean(true)),
                "false" | "0" => Ok(Value::Boolean(false)),
                _ => Err(mismatch()),
            },
        }
    }

    /// Converts a JSON scalar into a value of the requested type.
    ///
    /// JSON strings are accepted for every type when their content parses.
    pub fn from_json(value_type: ValueType, json: &serde_json::Value) -> Result<Self, ModelError> {
        use serde_json::Value as J;
        let mismatch = || ModelError::TypeMismatch {
            value_type,
            value: json.to_string(),
        };
        match (value_type, json) {
            (_, J::String(s)) => Value::parse(value_type, s),
            (ValueType::Integer, J::Number(n)) => n.as_i64().map(Value::Integer).ok_or_else(mismatch),
            (ValueType::Double, J::Number(n)) => n
                .as_f64()
                .filter(|v| v.is_finite())
                .map(Value::Double)
                .ok_or_else(mismatch),
            (ValueType::Boolean, J::Bool(b)) => Ok(Value::Boolean(*b)),
            _ => Err(mismatch()),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::String(s) => serde_json::Value::String(s.clone()),
            Value::Integer(i) => serde_json::Value::from(*i),
            Value::Double(d) => serde_json::Value::from(*d),
            Value::Boolean(b) => serde_json::Value::Bool(*b),
        }
    }

    pub fn lexical(&self) -> String {
        match self {
            Value::String(s) => s.clone(),
            Value::Integer(i) => i.to_string(),
            Value::Double(d) => format!("{d:?}"),
            Value::Boolean(b) => b.to_string(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Double(d) => Some(*d),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.lexical())
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub id_short: IdShort,
    pub value: Value,
}

impl Property {
    pub fn new(id_short: IdShort, value: Value) -> Self {
        Self { id_short, value }
    }

    pub fn value_type(&self) -> ValueType {
        self.value.value_type()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PropertyRepr {
    id_short: IdShort,
    value_type: ValueType,
    value: serde_json::Value,
}

impl Serialize for Property {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PropertyRepr {
            id_short: self.id_short.clone(),
            value_type: self.value_type(),
            value: self.value.to_json(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Property {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PropertyRepr::deserialize(deserializer)?;
        let value = Value::from_json(repr.value_type, &repr.value).map_err(serde::de::Error::custom)?;
        Ok(Property {
            id_short: repr.id_short,
            value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReferenceElement {
    pub id_short: IdShort,
    pub target: ElementReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileElement {
    pub id_short: IdShort,
    pub content_type: String,
    /// Package-relative path.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Collection {
    pub id_short: IdShort,
    #[serde(default)]
    pub children: Vec<SubmodelElement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modelType")]
pub enum SubmodelElement {
    Property(Property),
    #[serde(rename = "ReferenceElement")]
    Reference(ReferenceElement),
    #[serde(rename = "File")]
    File(FileElement),
    #[serde(rename = "SubmodelElementCollection")]
    Collection(Collection),
}

impl SubmodelElement {
    pub fn property(id_short: &str, value: Value) -> Result<Self, ModelError> {
        Ok(SubmodelElement::Property(Property::new(IdShort::new(id_short)?, value)))
    }

    pub fn collection(id_short: &str, children: Vec<SubmodelElement>) -> Result<Self, ModelError> {
        Ok(SubmodelElement::Collection(Collection {
            id_short: IdShort::new(id_short)?,
            children,
        }))
    }

    pub fn reference(id_short: &str, target: ElementReference) -> Result<Self, ModelError> {
        Ok(SubmodelElement::Reference(ReferenceElement {
            id_short: IdShort::new(id_short)?,
            target,
        }))
    }

    pub fn id_short(&self) -> &IdShort {
        match self {
            SubmodelElement::Property(p) => &p.id_short,
            SubmodelElement::Reference(r) => &r.id_short,
            SubmodelElement::File(f) => &f.id_short,
            SubmodelElement::Collection(c) => &c.id_short,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SubmodelElement::Property(_) => "Property",
            SubmodelElement::Reference(_) => "ReferenceElement",
            SubmodelElement::File(_) => "File",
            SubmodelElement::Collection(_) => "SubmodelElementCollection",
        }
    }

    pub fn as_property(&self) -> Option<&Property> {
        match self {
            SubmodelElement::Property(p) => Some(p),
            _ => None,
        }
    }

    pub fn children(&self) -> &[SubmodelElement] {
        match self {
            SubmodelElement::Collection(c) => &c.children,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Submodel {
    pub id: AasId,
    pub id_short: IdShort,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_id: Option<String>,
    #[serde(default)]
    pub elements: Vec<SubmodelElement>,
    /// Runtime-local revision counter, starts at 1.
    #[serde(default = "initial_version")]
    pub version: u64,
}

fn initial_version() -> u64 {
    1
}

impl Submodel {
    pub fn new(id: AasId, id_short: IdShort) -> Self {
        Self {
            id,
            id_short,
            semantic_id: None,
            elements: Vec::new(),
            version: 1,
        }
    }

    pub fn with_semantic_id(mut self, semantic_id: impl Into<String>) -> Self {
        self.semantic_id = Some(semantic_id.into());
        self
    }

    pub fn with_element(mut self, element: SubmodelElement) -> Self {
        self.elements.push(element);
        self
    }

    /// Checks sibling uniqueness, nesting depth and file paths.
    pub fn validate(&self) -> Result<(), ModelError> {
        validate_siblings(&self.elements, self.id_short.as_str(), 1)
    }

    /// Walks `path` from the submodel root.
    ///
    /// On failure returns the number of segments that did resolve.
    pub fn find(&self, path: &[IdShort]) -> Result<&SubmodelElement, usize> {
        let mut siblings = &self.elements;
        let mut found = None;
        for (depth, segment) in path.iter().enumerate() {
            let element = siblings
                .iter()
                .find(|e| e.id_short() == segment)
                .ok_or(depth)?;
            if depth + 1 < path.len() {
                match element {
                    SubmodelElement::Collection(c) => siblings = &c.children,
                    _ => return Err(depth + 1),
                }
            }
            found = Some(element);
        }
        found.ok_or(0)
    }

    pub fn find_mut(&mut self, path: &[IdShort]) -> Result<&mut SubmodelElement, usize> {
        let (last, parents) = path.split_last().ok_or(0usize)?;
        let mut siblings = &mut self.elements;
        for (depth, segment) in parents.iter().enumerate() {
            let element = siblings
                .iter_mut()
                .find(|e| e.id_short() == segment)
                .ok_or(depth)?;
            match element {
                SubmodelElement::Collection(c) => siblings = &mut c.children,
                _ => return Err(depth + 1),
            }
        }
        siblings
            .iter_mut()
            .find(|e| e.id_short() == last)
            .ok_or(parents.len())
    }

    /// Children list addressed by `path`: the root list when empty, else a collection's children.
    pub fn children_mut(&mut self, path: &[IdShort]) -> Result<&mut Vec<SubmodelElement>, usize> {
        if path.is_empty() {
            return Ok(&mut self.elements);
        }
        match self.find_mut(path)? {
            SubmodelElement::Collection(c) => Ok(&mut c.children),
            _ => Err(path.len()),
        }
    }
}

fn validate_siblings(elements: &[SubmodelElement], parent: &str, depth: usize) -> Result<(), ModelError> {
    let mut seen = std::collections::HashSet::new();
    for element in elements {
        if !seen.insert(element.id_short()) {
            return Err(ModelError::DuplicateIdShort {
                parent: parent.to_string(),
                id_short: element.id_short().to_string(),
            });
        }
        match element {
            SubmodelElement::File(f) if !is_relative_path(&f.path) => {
                return Err(ModelError::InvalidFilePath(f.path.clone()));
            }
            SubmodelElement::Collection(c) => {
                if depth > MAX_COLLECTION_DEPTH {
                    return Err(ModelError::NestingTooDeep(format!("{parent}.{}", c.id_short)));
                }
                validate_siblings(&c.children, &format!("{parent}.{}", c.id_short), depth + 1)?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// True for non-empty, forward-slash, relative paths with no `..` segment.
pub fn is_relative_path(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && !path.contains('\0')
        && !path.split('/').any(|s| s == ".." || s == ".")
        && !path.split('/').next().is_some_and(|s| s.len() == 2 && s.ends_with(':'))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AssetAdministrationShell {
    pub id: AasId,
    pub id_short: IdShort,
    #[serde(default)]
    pub submodel_refs: Vec<ElementReference>,
}

impl AssetAdministrationShell {
    pub fn new(id: AasId, id_short: IdShort) -> Self {
        Self {
            id,
            id_short,
            submodel_refs: Vec::new(),
        }
    }

    pub fn with_submodel(mut self, submodel_id: AasId) -> Self {
        self.submodel_refs.push(ElementReference::submodel(submodel_id));
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.submodel_refs {
            if !seen.insert(r) {
                return Err(ModelError::DuplicateSubmodelRef(r.canonical_path()));
            }
        }
        Ok(())
    }
}

/// Points at a submodel, or at an element inside it via a path of idShorts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ElementReference {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aas_id: Option<AasId>,
    pub submodel_id: AasId,
    #[serde(default)]
    pub element_path: Vec<IdShort>,
}

impl ElementReference {
    pub fn submodel(submodel_id: AasId) -> Self {
        Self {
            aas_id: None,
            submodel_id,
            element_path: Vec::new(),
        }
    }

    pub fn element(submodel_id: AasId, path: Vec<IdShort>) -> Self {
        Self {
            aas_id: None,
            submodel_id,
            element_path: path,
        }
    }

    /// Parses `a.b.c` into a reference below `submodel_id`; empty means the whole submodel.
    pub fn from_dotted(submodel_id: AasId, dotted: &str) -> Result<Self, ModelError> {
        Ok(Self::element(submodel_id, parse_dotted(dotted)?))
    }

    pub fn with_aas(mut self, aas_id: AasId) -> Self {
        self.aas_id = Some(aas_id);
        self
    }

    pub fn child(&self, segment: IdShort) -> Self {
        let mut child = self.clone();
        child.element_path.push(segment);
        child
    }

    pub fn dotted_path(&self) -> String {
        join_path(&self.element_path)
    }

    /// True when one reference equals, contains, or is contained by the other.
    pub fn overlaps(&self, other: &ElementReference) -> bool {
        if self.submodel_id != other.submodel_id {
            return false;
        }
        let n = self.element_path.len().min(other.element_path.len());
        self.element_path[..n] == other.element_path[..n]
    }

    /// Deterministic textual form used in API URLs and injected environments.
    pub fn canonical_path(&self) -> String {
        let mut out = String::new();
        if let Some(aas) = &self.aas_id {
            out.push_str("shells/");
            out.extend(utf8_percent_encode(aas.as_str(), PATH_ID));
            out.push('/');
        }
        out.push_str("submodels/");
        out.extend(utf8_percent_encode(self.submodel_id.as_str(), PATH_ID));
        if !self.element_path.is_empty() {
            out.push_str("/submodel-elements/");
            out.push_str(&self.dotted_path());
        }
        out
    }

    /// Inverse of [`canonical_path`](Self::canonical_path).
    pub fn from_canonical_path(path: &str) -> Result<Self, ModelError> {
        let malformed = || ModelError::MalformedPath(path.to_string());
        let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
        let (aas_id, rest) = match segments.as_slice() {
            ["shells", aas, rest @ ..] => (Some(decode_id(aas).ok_or_else(malformed)?), rest),
            rest => (None, rest),
        };
        let (submodel_id, element_path) = match rest {
            ["submodels", sm] => (decode_id(sm).ok_or_else(malformed)?, Vec::new()),
            ["submodels", sm, "submodel-elements", dotted] if !dotted.is_empty() => (
                decode_id(sm).ok_or_else(malformed)?,
                parse_dotted(dotted).map_err(|_| malformed())?,
            ),
            _ => return Err(malformed()),
        };
        Ok(Self {
            aas_id,
            submodel_id,
            element_path,
        })
    }
}

impl fmt::Display for ElementReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_path())
    }
}

fn decode_id(raw: &str) -> Option<AasId> {
    let decoded = percent_decode_str(raw).decode_utf8().ok()?;
    AasId::new(decoded.into_owned()).ok()
}

pub fn parse_dotted(dotted: &str) -> Result<Vec<IdShort>, ModelError> {
    if dotted.is_empty() {
        return Ok(Vec::new());
    }
    dotted.split('.').map(IdShort::new).collect()
}

pub fn join_path(path: &[IdShort]) -> String {
    path.iter().map(IdShort::as_str).collect::<Vec<_>>().join(".")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("unknown submodel {0}")]
    UnknownSubmodel(AasId),
    #[error("path not found in {submodel}: resolved `{resolved}`, missing `{missing}`")]
    PathNotFound {
        submodel: AasId,
        /// Deepest prefix that did resolve, dotted.
        resolved: String,
        missing: String,
    },
}

impl ResolveError {
    pub(crate) fn path_not_found(submodel: &AasId, path: &[IdShort], resolved: usize) -> Self {
        ResolveError::PathNotFound {
            submodel: submodel.clone(),
            resolved: join_path(&path[..resolved]),
            missing: path.get(resolved).map(|s| s.to_string()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resolved<'a> {
    Submodel(&'a Submodel),
    Element(&'a SubmodelElement),
}

/// Resolves a reference against any submodel lookup.
pub fn resolve_reference<'a, F>(reference: &ElementReference, lookup: F) -> Result<Resolved<'a>, ResolveError>
where
    F: FnOnce(&AasId) -> Option<&'a Submodel>,
{
    let submodel =
        lookup(&reference.submodel_id).ok_or_else(|| ResolveError::UnknownSubmodel(reference.submodel_id.clone()))?;
    if reference.element_path.is_empty() {
        return Ok(Resolved::Submodel(submodel));
    }
    submodel
        .find(&reference.element_path)
        .map(Resolved::Element)
        .map_err(|depth| ResolveError::path_not_found(&submodel.id, &reference.element_path, depth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> AasId {
        AasId::new(s).unwrap()
    }

    fn ids(path: &[&str]) -> Vec<IdShort> {
        path.iter().map(|s| IdShort::new(*s).unwrap()).collect()
    }

    fn fixture() -> Submodel {
        Submodel::new(id("urn:x:sm1"), IdShort::new("Sm1").unwrap()).with_element(
            SubmodelElement::collection(
                "Position",
                vec![SubmodelElement::property("X", Value::Double(100.0)).unwrap()],
            )
            .unwrap(),
        )
    }

    #[test]
    fn id_validation() {
        assert!(AasId::new("urn:x:sm1").is_ok());
        assert!(AasId::new("https://example.com/ids/1").is_ok());
        assert!(AasId::new("").is_err());
        assert!(AasId::new("no-scheme").is_err());
        assert!(AasId::new("1urn:x").is_err());
        assert!(AasId::new("urn:x y").is_err());
        assert!(IdShort::new("Position_2").is_ok());
        assert!(IdShort::new("2x").is_err());
        assert!(IdShort::new("a.b").is_err());
        assert!(IdShort::new("a-b").is_err());
        assert!(IdShort::new("a".repeat(128)).is_ok());
        assert!(IdShort::new("a".repeat(129)).is_err());
    }

    #[test]
    fn resolve_empty_path_returns_submodel() {
        let sm = fixture();
        let r = ElementReference::submodel(id("urn:x:sm1"));
        assert_eq!(resolve_reference(&r, |_| Some(&sm)).unwrap(), Resolved::Submodel(&sm));
    }

    #[test]
    fn resolve_nested_property() {
        let sm = fixture();
        let r = ElementReference::element(id("urn:x:sm1"), ids(&["Position", "X"]));
        // manual walk
        let expected = &sm.elements[0].children()[0];
        assert_eq!(
            resolve_reference(&r, |i| (i == &sm.id).then_some(&sm)).unwrap(),
            Resolved::Element(expected)
        );
        assert_eq!(expected.as_property().unwrap().value, Value::Double(100.0));
    }

    #[test]
    fn resolve_errors() {
        let sm = fixture();
        let missing = ElementReference::submodel(id("urn:x:missing"));
        assert_eq!(
            resolve_reference(&missing, |i| (i == &sm.id).then_some(&sm)),
            Err(ResolveError::UnknownSubmodel(id("urn:x:missing")))
        );
        let deep = ElementReference::element(id("urn:x:sm1"), ids(&["Position", "Y"]));
        assert_eq!(
            resolve_reference(&deep, |_| Some(&sm)),
            Err(ResolveError::PathNotFound {
                submodel: id("urn:x:sm1"),
                resolved: "Position".into(),
                missing: "Y".into()
            })
        );
        // walking through a property
        let through = ElementReference::element(id("urn:x:sm1"), ids(&["Position", "X", "Z"]));
        assert!(matches!(
            resolve_reference(&through, |_| Some(&sm)),
            Err(ResolveError::PathNotFound { resolved, .. }) if resolved == "Position.X"
        ));
    }

    #[test]
    fn canonical_path_examples() {
        let whole = ElementReference::submodel(id("urn:x:sm1"));
        assert_eq!(whole.canonical_path(), "submodels/urn:x:sm1");
        let nested = ElementReference::element(id("urn:x:sm1"), ids(&["Position", "X"]));
        assert_eq!(
            nested.canonical_path(),
            ["submodels/", "urn:x:sm1", "/submodel-elements/", "Position", ".", "X"].concat()
        );
        assert_ne!(whole.canonical_path(), nested.canonical_path());
        let with_shell = nested.clone().with_aas(id("urn:x:aas"));
        assert_ne!(with_shell.canonical_path(), nested.canonical_path());
        let slashy = ElementReference::submodel(id("https://ex.com/submodel-elements/a"));
        assert_eq!(slashy.canonical_path(), "submodels/https:%2F%2Fex.com%2Fsubmodel-elements%2Fa");
        assert_eq!(ElementReference::from_canonical_path(&slashy.canonical_path()).unwrap(), slashy);
    }

    #[test]
    fn overlap_is_prefix_relation() {
        let base = ElementReference::element(id("urn:x:a"), ids(&["Position"]));
        assert!(base.overlaps(&base.child(IdShort::new("X").unwrap())));
        assert!(base.child(IdShort::new("X").unwrap()).overlaps(&base));
        assert!(base.overlaps(&ElementReference::submodel(id("urn:x:a"))));
        assert!(!base.overlaps(&ElementReference::element(id("urn:x:a"), ids(&["Speed"]))));
        assert!(!base.overlaps(&ElementReference::element(id("urn:x:b"), ids(&["Position"]))));
    }

    #[test]
    fn submodel_validation() {
        let dup = Submodel::new(id("urn:x:a"), IdShort::new("A").unwrap())
            .with_element(SubmodelElement::property("X", Value::Integer(1)).unwrap())
            .with_element(SubmodelElement::property("X", Value::Integer(2)).unwrap());
        assert!(matches!(dup.validate(), Err(ModelError::DuplicateIdShort { .. })));

        let mut deep = SubmodelElement::property("Leaf", Value::Boolean(true)).unwrap();
        for level in 0..17 {
            deep = SubmodelElement::collection(&format!("L{level}"), vec![deep]).unwrap();
        }
        let sm = Submodel::new(id("urn:x:a"), IdShort::new("A").unwrap()).with_element(deep);
        assert!(matches!(sm.validate(), Err(ModelError::NestingTooDeep(_))));

        let file = Submodel::new(id("urn:x:a"), IdShort::new("A").unwrap()).with_element(SubmodelElement::File(
            FileElement {
                id_short: IdShort::new("Doc").unwrap(),
                content_type: "text/plain".into(),
                path: "docs/../../etc/passwd".into(),
            },
        ));
        assert!(matches!(file.validate(), Err(ModelError::InvalidFilePath(_))));
    }

    #[test]
    fn value_parsing() {
        assert_eq!(Value::parse(ValueType::Double, "100.0").unwrap(), Value::Double(100.0));
        assert!(Value::parse(ValueType::Double, "abc").is_err());
        assert!(Value::parse(ValueType::Double, "NaN").is_err());
        assert_eq!(Value::parse(ValueType::Boolean, "1").unwrap(), Value::Boolean(true));
        assert!(Value::parse(ValueType::Integer, "1.5").is_err());
        let json = serde_json::json!(3);
        assert_eq!(Value::from_json(ValueType::Double, &json).unwrap(), Value::Double(3.0));
        assert!(Value::from_json(ValueType::Double, &serde_json::json!("abc")).is_err());
        assert!(Value::from_json(ValueType::Boolean, &serde_json::json!(1)).is_err());
        for v in [Value::Double(0.1), Value::Double(-1e300), Value::Integer(i64::MIN)] {
            assert_eq!(Value::parse(v.value_type(), &v.lexical()).unwrap(), v);
        }
    }

    #[test]
    fn json_shape() {
        let sm = fixture();
        let json = serde_json::to_value(&sm).unwrap();
        assert_eq!(json["elements"][0]["modelType"], "SubmodelElementCollection");
        assert_eq!(json["elements"][0]["children"][0]["valueType"], "double");
        let back: Submodel = serde_json::from_value(json).unwrap();
        assert_eq!(back, sm);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn id_short() -> impl Strategy<Value = IdShort> {
            "[A-Za-z][A-Za-z0-9_]{0,10}".prop_map(|s| IdShort::new(s).unwrap())
        }

        fn aas_id() -> impl Strategy<Value = AasId> {
            prop_oneof![
                "urn:[a-z]{1,5}:[a-zA-Z0-9:._-]{1,12}",
                "https://[a-z]{1,8}\\.com/[a-z0-9/%?#.]{0,16}",
            ]
            .prop_map(|s| AasId::new(s).unwrap())
        }

        proptest! {
            #[test]
            fn canonical_path_round_trips(
                aas in proptest::option::of(aas_id()),
                sm in aas_id(),
                path in proptest::collection::vec(id_short(), 0..5),
            ) {
                let r = ElementReference { aas_id: aas, submodel_id: sm, element_path: path };
                prop_assert_eq!(ElementReference::from_canonical_path(&r.canonical_path()).unwrap(), r);
            }
        }
    }
}
