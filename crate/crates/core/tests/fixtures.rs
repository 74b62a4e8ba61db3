//! The checked-in case-study fixtures must match what the builders produce.
//!
//! Run with `AASRT_BLESS=1` to regenerate them after an intentional change.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aasrt_core::case_study::build_case_study_package;
use aasrt_core::package::{parse_entries, read_package, render_entries, write_package};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn bless() {
    let pkg = build_case_study_package();
    let tree = fixtures().join("osaca-milling");
    let _ = std::fs::remove_dir_all(&tree);
    for (path, bytes) in render_entries(&pkg) {
        let target = tree.join(&path);
        std::fs::create_dir_all(target.parent().unwrap()).unwrap();
        std::fs::write(target, bytes).unwrap();
    }
    std::fs::write(fixtures().join("osaca-milling.aasx"), write_package(&pkg).unwrap()).unwrap();
}

#[test]
fn case_study_fixtures_are_current() {
    if std::env::var_os("AASRT_BLESS").is_some() {
        bless();
    }
    let pkg = build_case_study_package();
    let archive = std::fs::read(fixtures().join("osaca-milling.aasx")).expect("fixture archive present");
    assert!(archive == write_package(&pkg).unwrap(), "osaca-milling.aasx is stale; rerun with AASRT_BLESS=1");
    assert_eq!(read_package(&archive).unwrap(), pkg);

    let tree = read_tree(&fixtures().join("osaca-milling"));
    assert_eq!(tree, render_entries(&pkg), "osaca-milling/ is stale; rerun with AASRT_BLESS=1");
    assert_eq!(parse_entries(tree).unwrap(), pkg);
}
