//! Pair count, source-level split isolation and rebuild determinism.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};
use snowkit::dataset::{build_dataset, DatasetParams, Manifest, Split, MANIFEST_FILE};
use snowkit::degrade::PatchSet;
use snowkit::imagecore::{save_image, FileFormat};

use crate::common::scene;
use crate::{ensure, Outcome};

const SOURCES: usize = 10;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// SHA-256 of every file under `root`, keyed by relative path.
pub fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(std::fs::read(&path).unwrap());
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

pub fn run() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let src = tmp.path().join("sources");
    std::fs::create_dir(&src).map_err(err)?;
    for i in 0..SOURCES {
        let img = scene(64 + 4 * i, 72, i as u64);
        save_image(&img, &src.join(format!("src{i:02}.png")), FileFormat::Png).map_err(err)?;
    }
    let patches = PatchSet::procedural(8, 1).map_err(err)?;
    let params = DatasetParams { target: 48, ..DatasetParams::default() };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let manifest = build_dataset(&src, &patches, &params, &a, 77).map_err(err)?;
    build_dataset(&src, &patches, &params, &b, 77).map_err(err)?;

    let pairs = manifest.records.len();
    ensure(pairs == 8 * SOURCES, || format!("{SOURCES} sources gave {pairs} pairs"))?;
    let per_source = manifest.records.iter().fold(HashMap::<&str, usize>::new(), |mut m, r| {
        *m.entry(&r.source_id).or_default() += 1;
        m
    });
    ensure(per_source.len() == SOURCES && per_source.values().all(|&n| n == 8), || format!("{per_source:?}"))?;

    let mut split_of: HashMap<&str, Split> = HashMap::new();
    for r in &manifest.records {
        let s = *split_of.entry(&r.source_id).or_insert(r.split);
        ensure(s == r.split, || format!("source {} appears in {s:?} and {:?}", r.source_id, r.split))?;
    }
    let counts = manifest.header.counts;
    ensure(Split::ALL.iter().all(|&s| counts.get(s) > 0) && counts.total() == pairs, || format!("{counts:?}"))?;

    let on_disk = Manifest::read(&a.join(MANIFEST_FILE)).map_err(err)?;
    ensure(on_disk == manifest, || "manifest on disk differs from the returned one".into())?;
    let (ha, hb) = (tree_hashes(&a), tree_hashes(&b));
    ensure(ha == hb, || "rebuild with the same seed differs".into())?;
    ensure(ha.len() == 2 * pairs + pairs / 2 + 1, || format!("{} files written", ha.len()))?;

    let c = tmp.path().join("c");
    build_dataset(&src, &patches, &params, &c, 78).map_err(err)?;
    ensure(tree_hashes(&c) != ha, || "a different seed gave an identical dataset".into())?;
    Ok(format!(
        "{SOURCES} sources -> {pairs} pairs, split {}/{}/{} with no shared source, {} files hash-identical on rebuild",
        counts.train,
        counts.val,
        counts.test,
        ha.len()
    ))
}
