//! Component library: captioned part clouds indexed by `(category, part_type)`,
//! together with the assembly schemas that say how parts of a category fit
//! together.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/manifest.jsonl                       one JSON record per line
//! <root>/<category>/<part_type>/<part_id>.xyz labelled or unlabelled points
//! <root>/schemas/<category>.json              optional; defaults are used otherwise
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::geometry::{PointCloud, Vec3};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_VERSION: u32 = 1;
pub const SCHEMA_DIR: &str = "schemas";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    Human,
    Mllm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartRecord {
    pub part_id: String,
    pub category: String,
    pub part_type: String,
    pub caption: String,
    pub cloud: PointCloud,
    pub source: CaptionSource,
    pub seed: Option<u64>,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub part_id: String,
    pub category: String,
    pub part_type: String,
    pub caption: String,
    pub path: String,
    pub source: CaptionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    manifest_version: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LibraryManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl LibraryManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = LibraryManifest {
            version: MANIFEST_VERSION,
            entries: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if value.get("part_id").is_none() {
                if let Ok(h) = serde_json::from_value::<ManifestHeader>(value) {
                    manifest.version = h.manifest_version;
                    continue;
                }
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: "record without part_id".into(),
                });
            }
            let entry = serde_json::from_value(value).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            manifest.entries.push(entry);
        }
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestHeader {
            manifest_version: self.version,
        })
        .expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes atomically (temp file + rename) so an interrupted writer never
    /// leaves a truncated manifest behind.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, self.to_jsonl()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Schemas

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Root,
    Below,
    Above,
    BesidePosX,
    BesideNegX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub part_type: String,
    pub relation: Relation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
    /// Face separation in model units; negative values allow interpenetration.
    #[serde(default)]
    pub margin: f64,
    /// For beside relations: Z position of the part center as a fraction of
    /// the anchor's Z extent. For above/below: Y placement of the part within
    /// the anchor's Y span (0 front-aligned, 1 rear-aligned).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    /// Probability that the slot is filled in a generated shape.
    #[serde(default = "one")]
    pub inclusion: f64,
    /// Optional slots sharing a group are included or dropped together.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblySchema {
    pub category: String,
    pub slots: Vec<Slot>,
    /// `(support_slot, cover_slot)`: the cover's XY footprint must hold the support.
    #[serde(default)]
    pub cover_pairs: Vec<(String, String)>,
}

impl AssemblySchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: AssemblySchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    /// Distinct part types in slot order.
    pub fn part_types(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.slots
            .iter()
            .filter(|s| seen.insert(s.part_type.clone()))
            .map(|s| s.part_type.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Schema {
            category: self.category.clone(),
            reason,
        };
        if self.slots.is_empty() {
            return Err(fail("no slots".into()));
        }
        let roots = self.slots.iter().filter(|s| s.relation == Relation::Root).count();
        if roots != 1 {
            return Err(fail(format!("expected exactly one root slot, found {roots}")));
        }
        let mut names = BTreeSet::new();
        for (i, slot) in self.slots.iter().enumerate() {
            if !names.insert(slot.name.as_str()) {
                return Err(fail(format!("duplicate slot `{}`", slot.name)));
            }
            match (slot.relation, &slot.anchor) {
                (Relation::Root, None) => {}
                (Relation::Root, Some(_)) => {
                    return Err(fail(format!("root slot `{}` has an anchor", slot.name)))
                }
                (_, None) => return Err(fail(format!("slot `{}` needs an anchor", slot.name))),
                (_, Some(a)) => match self.slot_index(a) {
                    Some(j) if j < i => {}
                    _ => {
                        return Err(fail(format!(
                            "slot `{}` anchors on `{a}`, which is not an earlier slot",
                            slot.name
                        )))
                    }
                },
            }
            if !(0.0..=1.0).contains(&slot.inclusion) {
                return Err(fail(format!("slot `{}` inclusion outside [0,1]", slot.name)));
            }
            if slot.relation == Relation::Root && slot.inclusion < 1.0 {
                return Err(fail("root slot cannot be optional".into()));
            }
            if let Some(a) = slot.align {
                if !a.is_finite() {
                    return Err(fail(format!("slot `{}` align is not finite", slot.name)));
                }
            }
            if !slot.margin.is_finite() {
                return Err(fail(format!("slot `{}` margin is not finite", slot.name)));
            }
        }
        // Optional slots must trail the required ones so that labels of the
        // required slots stay dense.
        if let Some(first_opt) = self.slots.iter().position(|s| s.inclusion < 1.0) {
            if self.slots[first_opt..].iter().any(|s| s.inclusion >= 1.0) {
                return Err(fail("required slots must precede optional slots".into()));
            }
        }
        for (support, cover) in &self.cover_pairs {
            for name in [support, cover] {
                if self.slot_index(name).is_none() {
                    return Err(fail(format!("cover pair references unknown slot `{name}`")));
                }
            }
        }
        Ok(())
    }
}

/// The two shipped furniture schemas.
pub fn default_schemas() -> Vec<AssemblySchema> {
    let slot = |name: &str, part_type: &str, relation, anchor: Option<&str>| Slot {
        name: name.into(),
        part_type: part_type.into(),
        relation,
        anchor: anchor.map(Into::into),
        margin: 0.0,
        align: None,
        inclusion: 1.0,
        group: None,
    };
    let table = AssemblySchema {
        category: "table".into(),
        slots: vec![
            slot("tabletop", "tabletop", Relation::Root, None),
            slot("base", "base", Relation::Below, Some("tabletop")),
        ],
        cover_pairs: vec![("base".into(), "tabletop".into())],
    };
    let arm = |name: &str, relation| Slot {
        margin: 0.02,
        align: Some(0.5),
        inclusion: 0.5,
        group: Some("arms".into()),
        ..slot(name, "arm", relation, Some("seat"))
    };
    let chair = AssemblySchema {
        category: "chair".into(),
        slots: vec![
            slot("seat", "seat", Relation::Root, None),
            slot("base", "base", Relation::Below, Some("seat")),
            Slot {
                align: Some(1.0),
                ..slot("back", "back", Relation::Above, Some("seat"))
            },
            arm("arm_right", Relation::BesidePosX),
            arm("arm_left", Relation::BesideNegX),
        ],
        cover_pairs: vec![("base".into(), "seat".into())],
    };
    vec![table, chair]
}

/// Loads every `*.json` under `dir`, sorted by file name.
pub fn load_schemas(dir: impl AsRef<Path>) -> Result<Vec<AssemblySchema>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(AssemblySchema::load).collect()
}

pub type Taxonomy = BTreeMap<String, Vec<String>>;

pub fn taxonomy_of(schemas: &[AssemblySchema]) -> Taxonomy {
    schemas
        .iter()
        .map(|s| (s.category.clone(), s.part_types()))
        .collect()
}

// ---------------------------------------------------------------------------
// Library

#[derive(Debug, Clone, Default)]
pub struct ComponentLibrary {
    records: Vec<PartRecord>,
    buckets: BTreeMap<(String, String), Vec<usize>>,
    taxonomy: Taxonomy,
    schemas: Vec<AssemblySchema>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub path: PathBuf,
    pub part_id: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct IngestReport {
    pub library: ComponentLibrary,
    pub errors: Vec<RecordError>,
}

impl IngestReport {
    pub fn bucket_counts(&self) -> BTreeMap<(String, String), usize> {
        self.library.bucket_counts()
    }
}

impl ComponentLibrary {
    pub fn new(schemas: Vec<AssemblySchema>) -> Result<Self> {
        for s in &schemas {
            s.validate()?;
        }
        Ok(Self {
            records: Vec::new(),
            buckets: BTreeMap::new(),
            taxonomy: taxonomy_of(&schemas),
            schemas,
        })
    }

    pub fn insert(&mut self, record: PartRecord) -> Result<()> {
        if record.cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if record.caption.trim().is_empty() {
            return Err(Error::invalid(format!("part `{}` has an empty caption", record.part_id)));
        }
        match self.taxonomy.get(&record.category) {
            None => {
                return Err(Error::invalid(format!("unknown category `{}`", record.category)))
            }
            Some(types) if !types.contains(&record.part_type) => {
                return Err(Error::invalid(format!(
                    "part type `{}` not in the `{}` taxonomy",
                    record.part_type, record.category
                )))
            }
            _ => {}
        }
        if self.records.iter().any(|r| r.part_id == record.part_id) {
            return Err(Error::invalid(format!("duplicate part id `{}`", record.part_id)));
        }
        let key = (record.category.clone(), record.part_type.clone());
        self.buckets.entry(key).or_default().push(self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[PartRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn schemas(&self) -> &[AssemblySchema] {
        &self.schemas
    }

    pub fn schema(&self, category: &str) -> Option<&AssemblySchema> {
        self.schemas.iter().find(|s| s.category == category)
    }

    pub fn bucket(&self, category: &str, part_type: &str) -> Vec<&PartRecord> {
        self.buckets
            .get(&(category.to_string(), part_type.to_string()))
            .map(|ix| ix.iter().map(|&i| &self.records[i]).collect())
            .unwrap_or_default()
    }

    pub fn bucket_counts(&self) -> BTreeMap<(String, String), usize> {
        let mut counts: BTreeMap<_, _> = self
            .taxonomy
            .iter()
            .flat_map(|(c, ts)| ts.iter().map(move |t| ((c.clone(), t.clone()), 0)))
            .collect();
        for (k, v) in &self.buckets {
            counts.insert(k.clone(), v.len());
        }
        counts
    }

    pub fn manifest(&self) -> LibraryManifest {
        LibraryManifest {
            version: MANIFEST_VERSION,
            entries: self
                .records
                .iter()
                .map(|r| ManifestEntry {
                    part_id: r.part_id.clone(),
                    category: r.category.clone(),
                    part_type: r.part_type.clone(),
                    caption: r.caption.clone(),
                    path: relative_part_path(r),
                    source: r.source,
                    seed: r.seed,
                })
                .collect(),
        }
    }

    /// Writes clouds, manifest and schemas under `root`.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for r in &self.records {
            let path = root.join(relative_part_path(r));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            r.cloud.write_xyz(&path)?;
        }
        let schema_dir = root.join(SCHEMA_DIR);
        std::fs::create_dir_all(&schema_dir).map_err(|e| Error::io(&schema_dir, e))?;
        for s in &self.schemas {
            let p = schema_dir.join(format!("{}.json", s.category));
            std::fs::write(&p, s.to_json()).map_err(|e| Error::io(&p, e))?;
        }
        self.manifest().write(root.join(MANIFEST_FILE))
    }
}

fn relative_part_path(r: &PartRecord) -> String {
    format!("{}/{}/{}.xyz", r.category, r.part_type, r.part_id)
}

/// Reads a library directory. Invalid records are reported and skipped; the
/// call fails only when no record survives.
pub fn ingest(root: impl AsRef<Path>) -> Result<IngestReport> {
    let root = root.as_ref();
    let schema_dir = root.join(SCHEMA_DIR);
    let schemas = if schema_dir.is_dir() {
        load_schemas(&schema_dir)?
    } else {
        default_schemas()
    };
    ingest_with(root, schemas)
}

pub fn ingest_with(root: impl AsRef<Path>, schemas: Vec<AssemblySchema>) -> Result<IngestReport> {
    let root = root.as_ref();
    let manifest = LibraryManifest::read(root.join(MANIFEST_FILE))?;
    let mut library = ComponentLibrary::new(schemas)?;
    let mut errors = Vec::new();
    for entry in manifest.entries {
        let path = root.join(&entry.path);
        let reject = |reason: String| RecordError {
            path: path.clone(),
            part_id: entry.part_id.clone(),
            reason,
        };
        let cloud = match PointCloud::read_xyz(&path) {
            Ok(c) => c,
            Err(e) => {
                errors.push(reject(e.to_string()));
                continue;
            }
        };
        let record = PartRecord {
            part_id: entry.part_id.clone(),
            category: entry.category.clone(),
            part_type: entry.part_type.clone(),
            caption: entry.caption.clone(),
            cloud,
            source: entry.source,
            seed: entry.seed,
        };
        if let Err(e) = library.insert(record) {
            errors.push(reject(e.to_string()));
        }
    }
    if library.is_empty() {
        return Err(Error::invalid(format!(
            "no valid records under {} ({} rejected)",
            root.display(),
            errors.len()
        )));
    }
    Ok(IngestReport { library, errors })
}

/// A sampled part together with the schema slot it fills.
#[derive(Debug, Clone, Copy)]
pub struct SlotPick<'a> {
    pub slot: usize,
    pub record: &'a PartRecord,
}

/// Draws the included slots of `schema` and one record per included slot,
/// uniformly and independently.
pub fn sample_parts<'a>(
    lib: &'a ComponentLibrary,
    schema: &AssemblySchema,
    rng: &mut Rng,
) -> Result<Vec<SlotPick<'a>>> {
    let mut group_draws: BTreeMap<&str, bool> = BTreeMap::new();
    let mut picks = Vec::with_capacity(schema.slots.len());
    for (i, slot) in schema.slots.iter().enumerate() {
        let included = if slot.inclusion >= 1.0 {
            true
        } else {
            match slot.group.as_deref() {
                Some(g) => *group_draws
                    .entry(g)
                    .or_insert_with(|| rng.random_bool(slot.inclusion)),
                None => rng.random_bool(slot.inclusion),
            }
        };
        if !included {
            continue;
        }
        let bucket = lib
            .buckets
            .get(&(schema.category.clone(), slot.part_type.clone()))
            .filter(|b| !b.is_empty())
            .ok_or_else(|| Error::EmptyBucket {
                category: schema.category.clone(),
                part_type: slot.part_type.clone(),
            })?;
        let record = &lib.records[bucket[rng.random_range(0..bucket.len())]];
        picks.push(SlotPick { slot: i, record });
    }
    Ok(picks)
}

// ---------------------------------------------------------------------------
// Synthetic parts

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub part_type: String,
    pub extents: Vec3,
    pub point_count: usize,
    pub caption_phrase: String,
}

fn is_frame_type(part_type: &str) -> bool {
    matches!(part_type, "base" | "leg" | "legs")
}

/// Samples a part centered at the origin: the surface of a box, or four
/// vertical posts for leg-like part types. The first eight points are the
/// corners of the bounding box so the extents are reproduced exactly.
pub fn synth_part(part_id: &str, category: &str, spec: &SynthSpec, seed: u64) -> Result<PartRecord> {
    let [ex, ey, ez] = spec.extents;
    if !(ex > 0.0 && ey > 0.0 && ez > 0.0) || spec.extents.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("extents must be positive, got {:?}", spec.extents)));
    }
    if spec.point_count < 8 {
        return Err(Error::invalid("synthetic parts need at least 8 points"));
    }
    let (hx, hy, hz) = (ex / 2.0, ey / 2.0, ez / 2.0);
    let mut points = Vec::with_capacity(spec.point_count);
    for sx in [-hx, hx] {
        for sy in [-hy, hy] {
            for sz in [-hz, hz] {
                points.push([sx, sy, sz]);
            }
        }
    }
    let mut rng = rng::stream(seed);
    let boxes: Vec<([f64; 3], [f64; 3])> = if is_frame_type(&spec.part_type) {
        let t = 0.15 * ex.min(ey);
        [(-hx, -hy), (hx - t, -hy), (-hx, hy - t), (hx - t, hy - t)]
            .into_iter()
            .map(|(x0, y0)| ([x0, y0, -hz], [x0 + t, y0 + t, hz]))
            .collect()
    } else {
        vec![([-hx, -hy, -hz], [hx, hy, hz])]
    };
    // faces of every box, weighted by area
    let mut faces = Vec::new();
    for (lo, hi) in &boxes {
        for axis in 0..3 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let area = (hi[u] - lo[u]) * (hi[v] - lo[v]);
            for at in [lo[axis], hi[axis]] {
                faces.push((axis, at, *lo, *hi, area));
            }
        }
    }
    let total: f64 = faces.iter().map(|f| f.4).sum();
    while points.len() < spec.point_count {
        let mut pick = rng.random::<f64>() * total;
        let face = faces
            .iter()
            .find(|f| {
                pick -= f.4;
                pick <= 0.0
            })
            .unwrap_or(faces.last().expect("at least one face"));
        let (axis, at, lo, hi, _) = *face;
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = if k == axis {
                at
            } else {
                lo[k] + rng.random::<f64>() * (hi[k] - lo[k])
            };
        }
        points.push(p);
    }
    Ok(PartRecord {
        part_id: part_id.into(),
        category: category.into(),
        part_type: spec.part_type.clone(),
        caption: spec.caption_phrase.clone(),
        cloud: PointCloud::new(points)?,
        source: CaptionSource::Human,
        seed: Some(seed),
    })
}

/// Variants used by [`synthetic_library`]: `(category, part_type, extents, phrase)`.
const SYNTH_CATALOG: &[(&str, &str, Vec3, &str)] = &[
    ("table", "tabletop", [1.6, 0.8, 0.06], "a long rectangular top"),
    ("table", "tabletop", [0.9, 0.9, 0.05], "a thin square top"),
    ("table", "tabletop", [1.2, 1.2, 0.16], "a broad thick slab top"),
    ("table", "tabletop", [0.6, 0.6, 0.08], "a small compact top"),
    ("table", "tabletop", [2.0, 0.6, 0.05], "a narrow elongated bench top"),
    ("table", "tabletop", [1.0, 0.7, 0.25], "a chunky deep block top"),
    ("table", "base", [1.4, 0.7, 0.7], "four tall slender legs"),
    ("table", "base", [0.8, 0.8, 0.3], "four short stubby legs"),
    ("table", "base", [1.0, 1.0, 1.0], "a high wide leg frame"),
    ("table", "base", [0.5, 0.5, 0.6], "a narrow cluster of legs"),
    ("table", "base", [1.8, 0.5, 0.45], "a low long trestle base"),
    ("table", "base", [1.1, 0.9, 0.8], "sturdy medium legs"),
    ("chair", "seat", [0.5, 0.5, 0.08], "a square cushioned seat"),
    ("chair", "seat", [0.7, 0.5, 0.12], "a wide padded seat"),
    ("chair", "seat", [0.4, 0.4, 0.05], "a tiny thin seat"),
    ("chair", "seat", [0.6, 0.6, 0.2], "a thick plush seat"),
    ("chair", "seat", [0.9, 0.6, 0.1], "a broad bench seat"),
    ("chair", "base", [0.5, 0.5, 0.45], "four straight legs"),
    ("chair", "base", [0.6, 0.6, 0.25], "short squat legs"),
    ("chair", "base", [0.45, 0.45, 0.75], "tall bar stool legs"),
    ("chair", "base", [0.8, 0.6, 0.4], "splayed wide legs"),
    ("chair", "back", [0.5, 0.06, 0.5], "a solid square backrest"),
    ("chair", "back", [0.5, 0.05, 0.9], "a tall upright back"),
    ("chair", "back", [0.6, 0.1, 0.3], "a low curved back"),
    ("chair", "back", [0.4, 0.04, 0.6], "a slim narrow back"),
    ("chair", "arm", [0.05, 0.45, 0.2], "a thin armrest"),
    ("chair", "arm", [0.1, 0.5, 0.1], "a padded armrest"),
    ("chair", "arm", [0.06, 0.5, 0.45], "a tall armrest"),
    ("chair", "arm", [0.12, 0.3, 0.15], "a short stubby armrest"),
];

/// Desk-scale library of box and frame parts for the default table and chair
/// schemas; every bucket holds at least four captioned variants.
pub fn synthetic_library(seed: u64, points_per_part: usize) -> Result<ComponentLibrary> {
    let mut lib = ComponentLibrary::new(default_schemas())?;
    let mut counters: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (k, (category, part_type, extents, phrase)) in SYNTH_CATALOG.iter().enumerate() {
        let n = counters.entry((category, part_type)).or_default();
        let part_id = format!("{category}-{part_type}-{n:02}");
        *n += 1;
        let spec = SynthSpec {
            part_type: part_type.to_string(),
            extents: *extents,
            point_count: points_per_part,
            caption_phrase: phrase.to_string(),
        };
        lib.insert(synth_part(&part_id, category, &spec, rng::derive(seed, k as u64))?)?;
    }
    Ok(lib)
}
