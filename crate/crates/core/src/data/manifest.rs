//! Directory ingestion and seen/unseen splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::metrics::PointAnnotation;
use crate::rng::{substream, Stream};

use super::store::{list_dirs, list_files, DataStore, ANNOTATION_DIR, EGO_DIR, EXO_DIR};

/// Index within the sampler substream reserved for split decisions.
const SPLIT_STREAM_INDEX: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    Exo,
    Ego,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitMode {
    Seen,
    Unseen,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Seen => "seen",
            SplitMode::Unseen => "unseen",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(SplitMode::Seen),
            "unseen" => Ok(SplitMode::Unseen),
            other => Err(Error::Config(format!("unknown split `{other}`, expected seen or unseen"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub view: View,
    pub affordance: usize,
    pub object: String,
    pub image: PathBuf,
    /// Where the point annotation would live; egocentric images only.
    pub annotation: Option<PathBuf>,
    /// Filled by [`load_manifest`]; `None` when no annotation file exists.
    pub points: Option<PointAnnotation>,
}

impl ImageEntry {
    /// Stable id used for ordering evaluation results.
    pub fn id(&self) -> String {
        self.image.to_string_lossy().into_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub mode: SplitMode,
    pub seed: u64,
    /// Sorted affordance names; the class id is the index.
    pub affordances: Vec<String>,
    pub train: Vec<ImageEntry>,
    /// Egocentric images only.
    pub test: Vec<ImageEntry>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn train_exo(&self) -> impl Iterator<Item = (usize, &ImageEntry)> {
        self.train.iter().enumerate().filter(|(_, e)| e.view == View::Exo)
    }

    pub fn train_ego(&self) -> impl Iterator<Item = (usize, &ImageEntry)> {
        self.train.iter().enumerate().filter(|(_, e)| e.view == View::Ego)
    }

    pub fn train_objects(&self) -> BTreeSet<&str> {
        self.train.iter().map(|e| e.object.as_str()).collect()
    }

    pub fn test_objects(&self) -> BTreeSet<&str> {
        self.test.iter().map(|e| e.object.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn affordance_name(&self, id: usize) -> &str {
        &self.affordances[id]
    }
}

struct ObjectImages {
    affordance: usize,
    object: String,
    exo: Vec<ImageEntry>,
    ego: Vec<ImageEntry>,
}

fn image_files(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    Ok(list_files(dir)?
        .into_iter()
        .filter(|n| n.ends_with(".ppm"))
        .collect())
}

fn subdirs(dir: &Path) -> Result<Vec<String>> {
    if dir.is_dir() {
        list_dirs(dir)
    } else {
        Ok(Vec::new())
    }
}

fn collect(root: &Path, warnings: &mut Vec<String>) -> Result<(Vec<String>, Vec<ObjectImages>)> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let exo_root = root.join(EXO_DIR);
    let ego_root = root.join(EGO_DIR);
    let affordances: Vec<String> = subdirs(&exo_root)?
        .into_iter()
        .chain(subdirs(&ego_root)?)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut objects = Vec::new();
    for (aff_id, aff) in affordances.iter().enumerate() {
        let names: BTreeSet<String> = subdirs(&exo_root.join(aff))?
            .into_iter()
            .chain(subdirs(&ego_root.join(aff))?)
            .collect();
        for obj in names {
            let entries = |view: View| -> Result<Vec<ImageEntry>> {
                let base = match view {
                    View::Exo => &exo_root,
                    View::Ego => &ego_root,
                };
                let dir = base.join(aff).join(&obj);
                Ok(image_files(&dir)?
                    .into_iter()
                    .map(|file| {
                        let annotation = (view == View::Ego).then(|| {
                            let stem = file.trim_end_matches(".ppm");
                            root.join(ANNOTATION_DIR).join(aff).join(&obj).join(format!("{stem}.csv"))
                        });
                        ImageEntry {
                            view,
                            affordance: aff_id,
                            object: obj.clone(),
                            image: dir.join(&file),
                            annotation,
                            points: None,
                        }
                    })
                    .collect())
            };
            let exo = entries(View::Exo)?;
            let ego = entries(View::Ego)?;
            if ego.is_empty() {
                if !exo.is_empty() {
                    warnings.push(format!(
                        "{aff}/{obj}: {} exocentric images without an egocentric counterpart, excluded",
                        exo.len()
                    ));
                }
                continue;
            }
            objects.push(ObjectImages {
                affordance: aff_id,
                object: obj,
                exo,
                ego,
            });
        }
    }
    Ok((affordances, objects))
}

fn held_out_objects(objects: &[ObjectImages], n_affordances: usize, seed: u64) -> Result<BTreeSet<String>> {
    let names: BTreeSet<&str> = objects.iter().map(|o| o.object.as_str()).collect();
    if names.len() < 2 {
        return Err(Error::Config(format!(
            "unseen split needs at least two objects, found {}",
            names.len()
        )));
    }
    let mut rng = substream(seed, Stream::Sampler, SPLIT_STREAM_INDEX);
    let mut held: BTreeSet<String> = BTreeSet::new();
    for aff in 0..n_affordances {
        let candidates: Vec<&str> = objects
            .iter()
            .filter(|o| o.affordance == aff && !held.contains(&o.object))
            .map(|o| o.object.as_str())
            .collect();
        if candidates.len() >= 2 {
            let pick = candidates.choose(&mut rng).expect("nonempty");
            held.insert(pick.to_string());
        }
    }
    // Objects can appear under several affordances; never hold out all of them.
    if held.len() == names.len() {
        let keep = held.iter().next().cloned().expect("nonempty");
        held.remove(&keep);
    }
    if held.is_empty() {
        let all: Vec<&str> = names.iter().copied().collect();
        held.insert(all.choose(&mut rng).expect("nonempty").to_string());
    }
    Ok(held)
}

/// Build the split from the directory tree without opening any file.
pub fn scan_manifest(store: &DataStore, mode: SplitMode, seed: u64) -> Result<DatasetManifest> {
    let root = store.root().to_path_buf();
    let mut warnings = Vec::new();
    let (affordances, objects) = collect(&root, &mut warnings)?;
    if objects.is_empty() {
        return Err(Error::data(&root, None, "empty manifest: no egocentric images found"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    match mode {
        SplitMode::Seen => {
            let mut rng = substream(seed, Stream::Sampler, SPLIT_STREAM_INDEX);
            for obj in objects {
                train.extend(obj.exo);
                let mut ego = obj.ego;
                ego.shuffle(&mut rng);
                let n_test = if ego.len() >= 2 {
                    ((ego.len() as f64 / 3.0).round() as usize).max(1)
                } else {
                    0
                };
                let mut rest = ego.split_off(n_test);
                test.append(&mut ego);
                rest.sort_by(|a, b| a.image.cmp(&b.image));
                train.extend(rest);
            }
        }
        SplitMode::Unseen => {
            let held = held_out_objects(&objects, affordances.len(), seed)?;
            for obj in objects {
                if held.contains(&obj.object) {
                    test.extend(obj.ego);
                } else {
                    train.extend(obj.exo);
                    train.extend(obj.ego);
                }
            }
        }
    }
    test.sort_by(|a, b| a.image.cmp(&b.image));
    let present: BTreeSet<usize> = train.iter().map(|e| e.affordance).collect();
    for (id, name) in affordances.iter().enumerate() {
        if !present.contains(&id) {
            warnings.push(format!("affordance `{name}` has no training images"));
        }
    }
    Ok(DatasetManifest {
        root,
        mode,
        seed,
        affordances,
        train,
        test,
        warnings,
    })
}

/// Parse `x,y` lines into nearest-pixel coordinates. An optional `x,y`
/// header, blank lines and `#` comments are ignored.
pub fn parse_points(path: &Path, text: &str, width: usize, height: usize) -> Result<PointAnnotation> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (line_no == 1 && line.replace(' ', "") == "x,y") {
            continue;
        }
        let bad = |msg: String| Error::data(path, Some(line_no), msg);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [xs, ys] = fields[..] else {
            return Err(bad(format!("expected `x,y`, got `{line}`")));
        };
        let coord = |s: &str, limit: usize, axis: &str| -> Result<usize> {
            let v: f64 = s.parse().map_err(|_| bad(format!("{axis} value `{s}` is not a number")))?;
            let r = v.round();
            if !v.is_finite() || r < 0.0 || r >= limit as f64 {
                return Err(bad(format!("{axis} = {s} outside 0..{limit}")));
            }
            Ok(r as usize)
        };
        points.push((coord(xs, width, "x")?, coord(ys, height, "y")?));
    }
    Ok(PointAnnotation::new(points))
}

/// [`scan_manifest`] plus reading and validating every egocentric
/// annotation. Evaluation only; training must use the scan.
pub fn load_manifest(store: &DataStore, mode: SplitMode, seed: u64) -> Result<DatasetManifest> {
    let mut m = scan_manifest(store, mode, seed)?;
    let mut missing = 0;
    for entry in m.train.iter_mut().chain(m.test.iter_mut()) {
        let Some(ann) = entry.annotation.clone() else {
            continue;
        };
        if !ann.is_file() {
            missing += 1;
            continue;
        }
        let (w, h) = store.read_image_dims(&entry.image)?;
        let text = store.read_annotation_text(&ann)?;
        entry.points = Some(parse_points(&ann, &text, w, h)?);
    }
    if missing > 0 {
        m.warnings.push(format!("{missing} egocentric images have no annotation file"));
    }
    Ok(m)
}

/// Training images grouped by class id.
pub fn exo_by_affordance(m: &DatasetManifest) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in m.train_exo() {
        out.entry(e.affordance).or_default().push(i);
    }
    out
}
