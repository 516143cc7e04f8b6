//! Paired clean/degraded dataset: view derivation, degradation, flips, split
//! by source, manifest I/O and batch loading.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use snowkit_tensor::Tensor;

use crate::degrade::{degrade, list_images, DegradeParams, PatchSet};
use crate::error::{invalid, io_err, Error, Result};
use crate::imagecore::{crop, flip_horizontal, images_to_tensor, load_image, resize_bilinear, save_image, FileFormat, Image, PixelRect};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    TopLeft,
    BottomRight,
    Center,
    Resized,
}

impl View {
    pub const ALL: [View; 4] = [View::TopLeft, View::BottomRight, View::Center, View::Resized];

    pub fn as_str(self) -> &'static str {
        match self {
            View::TopLeft => "top_left",
            View::BottomRight => "bottom_right",
            View::Center => "center",
            View::Resized => "resized",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Original,
    Flipped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

/// Three square crops (top-left, bottom-right, centre) and a full-image
/// resize, all `target x target`. Sources smaller than the target on either
/// side yield only the resized view.
pub fn derive_views(src: &Image, target: usize) -> Result<Vec<(View, Image)>> {
    if target == 0 {
        return Err(invalid("view size must be at least 1"));
    }
    let (w, h) = (src.width(), src.height());
    let resized = resize_bilinear(src, target, target)?;
    if w < target || h < target {
        return Ok(vec![(View::Resized, resized)]);
    }
    let at = |x, y| crop(src, PixelRect::new(x, y, target, target));
    Ok(vec![
        (View::TopLeft, at(0, 0)?),
        (View::BottomRight, at(w - target, h - target)?),
        (View::Center, at((w - target) / 2, (h - target) / 2)?),
        (View::Resized, resized),
    ])
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.683, 0.171, 0.146];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub target: usize,
    pub degrade: DegradeParams,
    /// Train, validation and test shares of the source images.
    pub fractions: [f64; 3],
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self { target: 384, degrade: DegradeParams::default(), fractions: DEFAULT_FRACTIONS }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.target == 0 {
            return Err(invalid("target side must be at least 1"));
        }
        self.degrade.validate()?;
        validate_fractions(&self.fractions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    /// Paths are relative to the manifest directory.
    pub clean_path: String,
    pub distorted_path: String,
    pub recipe_path: String,
    pub source_id: String,
    pub view: View,
    pub orientation: Orientation,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub seed: u64,
    pub params: DatasetParams,
    /// Pairs per split.
    pub counts: SplitCounts,
    pub sources: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<PairRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    fn recount(&mut self) {
        let mut counts = SplitCounts::default();
        for r in &self.records {
            counts.bump(r.split);
        }
        self.header.counts = counts;
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Source ids in order of first appearance.
    pub fn source_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.source_id.as_str()))
            .map(|r| r.source_id.clone())
            .collect()
    }

    /// Header object on the first line, then one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let bad = |line: usize, e: serde_json::Error| Error::Format { what: "manifest", detail: format!("line {line}: {e}") };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Error::Empty("manifest"))?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|e| bad(1, e))?;
        let records = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(i + 1, e)))
            .collect::<Result<Vec<PairRecord>>>()?;
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

fn validate_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|v| v.is_nan() || *v < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("split fractions {f:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier share.
pub fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

const SPLIT_STREAM: u64 = 2;

/// Assigns whole source images to splits: sources are shuffled with `seed`
/// and cut into consecutive groups sized by [`apportion`].
pub fn split(manifest: &Manifest, fractions: [f64; 3], seed: u64) -> Result<Manifest> {
    validate_fractions(&fractions)?;
    let mut sources = manifest.source_ids();
    sources.shuffle(&mut rng::seeded_stream(seed, SPLIT_STREAM));
    let [n_train, n_val, _] = apportion(sources.len(), &fractions);
    let assignment: HashMap<String, Split> = sources
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (s, split)
        })
        .collect();
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = assignment[&r.source_id];
    }
    out.header.params.fractions = fractions;
    out.recount();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Builds the paired dataset under `out_dir` and writes `manifest.jsonl`.
///
/// Each source (converted to RGB) yields up to four views; each view is
/// degraded once with a seed derived from `(seed, 4 * source + view)`, and
/// the clean/distorted pair is stored as-is and flipped horizontally.
/// Sources are processed in parallel; the manifest keeps sorted source order.
pub fn build_dataset(src_dir: &Path, patches: &PatchSet, params: &DatasetParams, out_dir: &Path, seed: u64) -> Result<Manifest> {
    params.validate()?;
    let sources = list_images(src_dir)?;
    if sources.is_empty() {
        return Err(Error::Empty("source directory"));
    }
    for sub in ["clean", "distorted", "recipes"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(d))?;
    }
    let per_source = sources
        .par_iter()
        .enumerate()
        .map(|(si, path)| build_source(si, path, patches, params, out_dir, seed))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        header: ManifestHeader {
            seed,
            params: params.clone(),
            counts: SplitCounts::default(),
            sources: sources.len(),
        },
        records: per_source.into_iter().flatten().collect(),
    };
    let manifest = split(&manifest, params.fractions, seed)?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn build_source(
    si: usize,
    path: &Path,
    patches: &PatchSet,
    params: &DatasetParams,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PairRecord>> {
    let source_id = stem(path);
    let src = load_image(path)?.to_rgb();
    let mut records = Vec::new();
    for (view, clean) in derive_views(&src, params.target)? {
        let vi = View::ALL.iter().position(|&v| v == view).expect("known view");
        let pair_seed = rng::derive_seed(seed, (si * View::ALL.len() + vi) as u64);
        let (distorted, recipe) = degrade(&clean, patches, &params.degrade, pair_seed)?;
        let base = format!("{source_id}_{}", view.as_str());
        let recipe_path = format!("recipes/{base}.json");
        let full = out_dir.join(&recipe_path);
        std::fs::write(&full, serde_json::to_string_pretty(&recipe).expect("recipe serializes")).map_err(io_err(full))?;
        for orientation in [Orientation::Original, Orientation::Flipped] {
            let (c, d, suffix) = match orientation {
                Orientation::Original => (clean.clone(), distorted.clone(), "o"),
                Orientation::Flipped => (flip_horizontal(&clean), flip_horizontal(&distorted), "f"),
            };
            let id = format!("{base}_{suffix}");
            let clean_path = format!("clean/{id}.png");
            let distorted_path = format!("distorted/{id}.png");
            save_image(&c, &out_dir.join(&clean_path), FileFormat::Png)?;
            save_image(&d, &out_dir.join(&distorted_path), FileFormat::Png)?;
            records.push(PairRecord {
                id,
                clean_path,
                distorted_path,
                recipe_path: recipe_path.clone(),
                source_id: source_id.clone(),
                view,
                orientation,
                split: Split::Train,
            });
        }
    }
    Ok(records)
}

/// One `(clean, distorted)` pair loaded from disk.
pub fn load_pair(root: &Path, record: &PairRecord) -> Result<(Image, Image)> {
    Ok((load_image(&root.join(&record.clean_path))?, load_image(&root.join(&record.distorted_path))?))
}

/// Every pair of a split as `(id, clean, distorted)`, in manifest order.
pub fn load_split(manifest: &Manifest, root: &Path, split: Split) -> Result<Vec<(String, Image, Image)>> {
    manifest
        .records_in(split)
        .map(|r| load_pair(root, r).map(|(c, d)| (r.id.clone(), c, d)))
        .collect()
}

pub struct Batch {
    pub ids: Vec<String>,
    /// `N x C x H x W`.
    pub clean: Tensor,
    pub distorted: Tensor,
}

/// Iterates a split in batches, loading images lazily. The last batch may be
/// smaller.
pub struct BatchIter<'a> {
    root: PathBuf,
    records: Vec<&'a PairRecord>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.records.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.records.len());
        let chunk = &self.records[self.pos..end];
        self.pos = end;
        Some((|| {
            let pairs = chunk.iter().map(|r| load_pair(&self.root, r)).collect::<Result<Vec<_>>>()?;
            Ok(Batch {
                ids: chunk.iter().map(|r| r.id.clone()).collect(),
                clean: images_to_tensor(&pairs.iter().map(|p| &p.0).collect::<Vec<_>>())?,
                distorted: images_to_tensor(&pairs.iter().map(|p| &p.1).collect::<Vec<_>>())?,
            })
        })())
    }
}

/// Batches of one split; `shuffle_seed = None` keeps manifest order.
pub fn load_batches<'a>(
    manifest: &'a Manifest,
    root: &Path,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let mut records: Vec<&PairRecord> = manifest.records_in(split).collect();
    if let Some(seed) = shuffle_seed {
        records.shuffle(&mut rng::seeded(seed));
    }
    Ok(BatchIter { root: root.to_path_buf(), records, batch_size, pos: 0 })
}
