//! Shape-and-caption augmentation: sample parts from the library, center
//! them, shrink supports under their covers (intra adjustment), stack the
//! parts along the schema relations (inter adjustment) and fill the caption
//! template.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    aabb, axis_gap, centroid, containment_fraction, downsample, scale_xy_about_origin, translate,
    Aabb, Axis, PointCloud,
};
use crate::library::{sample_parts, AssemblySchema, ComponentLibrary, Relation};
use crate::rng;
use crate::{Error, Result};

pub const CATEGORY_PLACEHOLDER: &str = "{category}";
pub const PARTS_PLACEHOLDER: &str = "{part_captions}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionTemplate {
    pub pattern: String,
    pub separator: String,
    pub conjunction: String,
}

impl Default for CaptionTemplate {
    fn default() -> Self {
        Self {
            pattern: "a {category} with {part_captions}".into(),
            separator: ", ".into(),
            conjunction: " and ".into(),
        }
    }
}

impl CaptionTemplate {
    pub fn new(pattern: &str, separator: &str, conjunction: &str) -> Result<Self> {
        let t = Self {
            pattern: pattern.into(),
            separator: separator.into(),
            conjunction: conjunction.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for ph in [CATEGORY_PLACEHOLDER, PARTS_PLACEHOLDER] {
            let n = self.pattern.matches(ph).count();
            if n != 1 {
                return Err(Error::invalid(format!(
                    "template must contain {ph} exactly once, found {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Joins captions as `a, b and c` and substitutes them into the template.
pub fn fill_template(tmpl: &CaptionTemplate, category: &str, captions: &[&str]) -> Result<String> {
    tmpl.validate()?;
    let joined = match captions {
        [] => return Err(Error::invalid("no part captions to fill")),
        [only] => only.to_string(),
        [init @ .., last] => format!("{}{}{}", init.join(&tmpl.separator), tmpl.conjunction, last),
    };
    Ok(tmpl
        .pattern
        .replace(CATEGORY_PLACEHOLDER, category)
        .replace(PARTS_PLACEHOLDER, &joined))
}

/// Translates every part so its centroid sits at the origin.
pub fn center_parts(parts: &[PointCloud]) -> Result<Vec<PointCloud>> {
    parts
        .iter()
        .map(|p| {
            let c = centroid(p)?;
            Ok(translate(p, [-c[0], -c[1], -c[2]]))
        })
        .collect()
}

/// `gaps[i][j][axis]` is the signed AABB gap between parts `i` and `j`.
pub fn pairwise_axis_distances(parts: &[PointCloud]) -> Result<Vec<Vec<[f64; 3]>>> {
    let boxes = parts.iter().map(aabb).collect::<Result<Vec<_>>>()?;
    Ok(boxes
        .iter()
        .map(|a| {
            boxes
                .iter()
                .map(|b| Axis::ALL.map(|axis| axis_gap(a, b, axis)))
                .collect()
        })
        .collect())
}

/// A part cloud together with the schema slot it occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedPart {
    pub slot: usize,
    pub cloud: PointCloud,
}

fn position_of(parts: &[PlacedPart], schema: &AssemblySchema, name: &str) -> Result<usize> {
    let slot = schema
        .slot_index(name)
        .ok_or_else(|| Error::UnknownAnchor(name.to_string()))?;
    parts
        .iter()
        .position(|p| p.slot == slot)
        .ok_or_else(|| Error::UnknownAnchor(name.to_string()))
}

/// Positions each non-root part against its (already placed) anchor.
pub fn adjust_inter(parts: &[PlacedPart], schema: &AssemblySchema) -> Result<Vec<PlacedPart>> {
    let mut out: Vec<PlacedPart> = Vec::with_capacity(parts.len());
    let mut boxes: Vec<Aabb> = Vec::with_capacity(parts.len());
    for part in parts {
        let slot = schema
            .slots
            .get(part.slot)
            .ok_or_else(|| Error::invalid(format!("slot index {} out of range", part.slot)))?;
        let own = aabb(&part.cloud)?;
        let shift = match slot.relation {
            Relation::Root => [0.0; 3],
            rel => {
                let name = slot.anchor.as_deref().unwrap_or_default();
                let at = position_of(&out, schema, name)?;
                let anchor = boxes[at];
                let mut t = [0.0; 3];
                match rel {
                    Relation::Below => t[2] = anchor.min[2] - slot.margin - own.max[2],
                    Relation::Above => t[2] = anchor.max[2] + slot.margin - own.min[2],
                    Relation::BesidePosX => t[0] = anchor.max[0] + slot.margin - own.min[0],
                    Relation::BesideNegX => t[0] = anchor.min[0] - slot.margin - own.max[0],
                    Relation::Root => unreachable!(),
                }
                if let Some(f) = slot.align {
                    match rel {
                        Relation::Below | Relation::Above => {
                            let room = anchor.extent(Axis::Y) - own.extent(Axis::Y);
                            t[1] = anchor.min[1] + f * room - own.min[1];
                        }
                        _ => {
                            let target = anchor.min[2] + f * anchor.extent(Axis::Z);
                            t[2] = target - own.center(Axis::Z);
                        }
                    }
                }
                t
            }
        };
        boxes.push(own.translated(shift));
        out.push(PlacedPart {
            slot: part.slot,
            cloud: translate(&part.cloud, shift),
        });
    }
    Ok(out)
}

/// Largest origin-centered half-width that stays inside `[lo, hi]`.
fn inner_half(lo: f64, hi: f64) -> f64 {
    (-lo).min(hi)
}

/// Outer half-width of a cloud about the origin along one axis.
fn outer_half(cloud: &PointCloud, axis: usize) -> f64 {
    cloud.points().iter().map(|p| p[axis].abs()).fold(0.0, f64::max)
}

/// XY scale that brings `support` inside the origin-centered part of `cover`'s footprint.
pub fn cover_scale(support: &PointCloud, cover: &Aabb) -> Result<f64> {
    if cover.extent(Axis::X) <= 0.0 || cover.extent(Axis::Y) <= 0.0 {
        return Err(Error::invalid("cover has zero XY extent"));
    }
    let mut s: f64 = 1.0;
    for axis in [0, 1] {
        let cover_half = inner_half(cover.min[axis], cover.max[axis]);
        if cover_half <= 0.0 {
            return Err(Error::invalid("cover footprint does not surround the origin"));
        }
        let support_half = outer_half(support, axis);
        if support_half > 0.0 {
            s = s.min(cover_half / support_half);
        }
    }
    if s < 1.0 {
        // keep boundary points inside despite rounding in s * x
        s *= 1.0 - 1e-12;
    }
    Ok(s)
}

/// Shrinks each cover pair's support in XY about the origin when fewer than
/// `theta` of its points project inside the cover's footprint.
pub fn adjust_intra(
    parts: &[PlacedPart],
    schema: &AssemblySchema,
    theta: f64,
) -> Result<Vec<PlacedPart>> {
    let mut out = parts.to_vec();
    for (support, cover) in &schema.cover_pairs {
        let (Ok(si), Ok(ci)) = (
            position_of(&out, schema, support),
            position_of(&out, schema, cover),
        ) else {
            continue;
        };
        let cover_box = aabb(&out[ci].cloud)?;
        if containment_fraction(&out[si].cloud, &cover_box)? >= theta {
            continue;
        }
        let s = cover_scale(&out[si].cloud, &cover_box)?;
        out[si].cloud = scale_xy_about_origin(&out[si].cloud, s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    /// Points per generated shape.
    pub n_points: usize,
    /// Containment threshold for cover pairs.
    pub theta: f64,
    pub inter: bool,
    pub intra: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            n_points: 256,
            theta: 0.95,
            inter: true,
            intra: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub category: String,
    pub part_ids: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair {
    /// Labelled by slot index.
    pub shape: PointCloud,
    pub caption: String,
    pub provenance: Provenance,
}

/// Full-resolution parts of a generated shape, before merging and downsampling.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub parts: Vec<PlacedPart>,
    pub part_captions: Vec<String>,
    pub caption: String,
    pub provenance: Provenance,
}

pub fn assemble(
    lib: &ComponentLibrary,
    schema: &AssemblySchema,
    tmpl: &CaptionTemplate,
    opts: &AugmentOptions,
    rng: &mut rng::Rng,
    seed: u64,
) -> Result<Assembly> {
    let picks = sample_parts(lib, schema, rng)?;
    let clouds: Vec<PointCloud> = picks.iter().map(|p| p.record.cloud.clone()).collect();
    let centered = center_parts(&clouds)?;
    let mut parts: Vec<PlacedPart> = picks
        .iter()
        .zip(centered)
        .map(|(p, cloud)| PlacedPart {
            slot: p.slot,
            cloud: cloud.labelled(p.slot as u32),
        })
        .collect();
    if opts.intra {
        parts = adjust_intra(&parts, schema, opts.theta)?;
    }
    if opts.inter {
        parts = adjust_inter(&parts, schema)?;
    }
    let part_captions: Vec<String> = picks.iter().map(|p| p.record.caption.clone()).collect();
    let refs: Vec<&str> = part_captions.iter().map(String::as_str).collect();
    let caption = fill_template(tmpl, &schema.category, &refs)?;
    Ok(Assembly {
        parts,
        part_captions,
        caption,
        provenance: Provenance {
            category: schema.category.clone(),
            part_ids: picks.iter().map(|p| p.record.part_id.clone()).collect(),
            seed,
        },
    })
}

/// Generates one pair and also returns its full-resolution assembly.
pub fn generate_pair_detailed(
    lib: &ComponentLibrary,
    schema: &AssemblySchema,
    tmpl: &CaptionTemplate,
    opts: &AugmentOptions,
    seed: u64,
) -> Result<(GeneratedPair, Assembly)> {
    let mut rng = rng::stream(seed);
    let assembly = assemble(lib, schema, tmpl, opts, &mut rng, seed)?;
    let merged = PointCloud::merge(assembly.parts.iter().map(|p| &p.cloud));
    let shape = downsample(&merged, opts.n_points, &mut rng)?;
    let pair = GeneratedPair {
        shape,
        caption: assembly.caption.clone(),
        provenance: assembly.provenance.clone(),
    };
    Ok((pair, assembly))
}

pub fn generate_pair(
    lib: &ComponentLibrary,
    schema: &AssemblySchema,
    tmpl: &CaptionTemplate,
    opts: &AugmentOptions,
    seed: u64,
) -> Result<GeneratedPair> {
    generate_pair_detailed(lib, schema, tmpl, opts, seed).map(|(pair, _)| pair)
}

/// Pair `k` is generated from seed `base_seed ^ k`; items are independent, so
/// the result does not depend on how the work is scheduled.
pub fn generate_stream(
    lib: &ComponentLibrary,
    schema: &AssemblySchema,
    tmpl: &CaptionTemplate,
    opts: &AugmentOptions,
    count: usize,
    base_seed: u64,
) -> Result<Vec<GeneratedPair>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| generate_pair(lib, schema, tmpl, opts, rng::derive(base_seed, k)))
        .collect()
}

/// Like [`generate_pair`] but first draws the category uniformly from the
/// library's schemas; parts never mix across categories.
pub fn generate_any(
    lib: &ComponentLibrary,
    tmpl: &CaptionTemplate,
    opts: &AugmentOptions,
    seed: u64,
) -> Result<GeneratedPair> {
    let schemas = lib.schemas();
    if schemas.is_empty() {
        return Err(Error::invalid("library has no schemas"));
    }
    let pick = rng::stream(rng::fork(seed, "category")).random_range(0..schemas.len());
    generate_pair(lib, &schemas[pick], tmpl, opts, seed)
}

pub fn generate_any_stream(
    lib: &ComponentLibrary,
    tmpl: &CaptionTemplate,
    opts: &AugmentOptions,
    count: usize,
    base_seed: u64,
) -> Result<Vec<GeneratedPair>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| generate_any(lib, tmpl, opts, rng::derive(base_seed, k)))
        .collect()
}

// ---------------------------------------------------------------------------
// Datasets on disk

pub const PAIRS_FILE: &str = "pairs.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub index: usize,
    pub caption: String,
    /// Shape file relative to the dataset directory. Several captions may
    /// name the same file; they are then all relevant to that shape.
    pub shape: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Writes `pair_<k>.xyz` files and `pairs.jsonl` into `dir`.
pub fn write_pairs(dir: impl AsRef<Path>, pairs: &[GeneratedPair]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut jsonl = String::new();
    for (k, pair) in pairs.iter().enumerate() {
        let name = format!("pair_{k}.xyz");
        pair.shape.write_xyz(dir.join(&name))?;
        let entry = PairEntry {
            index: k,
            caption: pair.caption.clone(),
            shape: name,
            provenance: Some(pair.provenance.clone()),
        };
        jsonl.push_str(&serde_json::to_string(&entry)?);
        jsonl.push('\n');
    }
    let path = dir.join(PAIRS_FILE);
    std::fs::write(&path, jsonl).map_err(|e| Error::io(&path, e))
}

/// A shape/caption dataset read back from disk.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub shapes: Vec<PointCloud>,
    pub shape_files: Vec<PathBuf>,
    pub captions: Vec<String>,
    /// For each caption, the index of its shape.
    pub caption_shape: Vec<usize>,
}

pub fn read_pairs(dir: impl AsRef<Path>) -> Result<PairDataset> {
    let dir = dir.as_ref();
    let path = dir.join(PAIRS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut ds = PairDataset {
        shapes: Vec::new(),
        shape_files: Vec::new(),
        captions: Vec::new(),
        caption_shape: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: PairEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let file = dir.join(&entry.shape);
        let shape_ix = match ds.shape_files.iter().position(|f| *f == file) {
            Some(ix) => ix,
            None => {
                ds.shapes.push(PointCloud::read_xyz(&file)?);
                ds.shape_files.push(file);
                ds.shapes.len() - 1
            }
        };
        ds.captions.push(entry.caption);
        ds.caption_shape.push(shape_ix);
    }
    if ds.captions.is_empty() {
        return Err(Error::invalid(format!("{} lists no pairs", path.display())));
    }
    Ok(ds)
}
