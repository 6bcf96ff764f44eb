//! Point-cloud primitives.
//!
//! Z is the vertical axis. All arithmetic is done in `f64`; clouds are
//! serialized as 32-bit floats in the ASCII `.xyz` format
//! (`x y z [label]` per line, `#` starts a comment).

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;

use crate::rng::Rng;
use crate::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        check_finite(&points)?;
        Ok(Self {
            points,
            labels: None,
        })
    }

    pub fn with_labels(points: Vec<Vec3>, labels: Vec<u32>) -> Result<Self> {
        check_finite(&points)?;
        if labels.len() != points.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} points",
                labels.len(),
                points.len()
            )));
        }
        Ok(Self {
            points,
            labels: Some(labels),
        })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Replaces (or sets) every label with `label`.
    pub fn labelled(mut self, label: u32) -> Self {
        self.labels = Some(vec![label; self.points.len()]);
        self
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Concatenates clouds. The result is labelled only if every input is.
    pub fn merge<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> PointCloud {
        let mut points = Vec::new();
        let mut labels = Some(Vec::new());
        for c in clouds {
            points.extend_from_slice(&c.points);
            match (&mut labels, &c.labels) {
                (Some(acc), Some(l)) => acc.extend_from_slice(l),
                _ => labels = None,
            }
        }
        PointCloud { points, labels }
    }

    pub fn read_xyz(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_xyz(&text, path)
    }

    pub fn parse_xyz(text: &str, origin: &Path) -> Result<Self> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut labelled: Option<bool> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                reason,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 && fields.len() != 4 {
                return Err(err(format!("expected 3 or 4 fields, got {}", fields.len())));
            }
            let mut p = [0.0; 3];
            for (slot, f) in p.iter_mut().zip(&fields) {
                let v: f32 = f.parse().map_err(|_| err(format!("bad coordinate `{f}`")))?;
                if !v.is_finite() {
                    return Err(err(format!("non-finite coordinate `{f}`")));
                }
                *slot = v as f64;
            }
            let has_label = fields.len() == 4;
            match labelled {
                None => labelled = Some(has_label),
                Some(prev) if prev != has_label => {
                    return Err(err("mixed labelled and unlabelled lines".into()))
                }
                _ => {}
            }
            if has_label {
                labels.push(
                    fields[3]
                        .parse()
                        .map_err(|_| err(format!("bad label `{}`", fields[3])))?,
                );
            }
            points.push(p);
        }
        if labelled == Some(true) {
            Self::with_labels(points, labels)
        } else {
            Self::new(points)
        }
    }

    /// Serializes with `f32` precision; the shortest round-trip form is used so
    /// that a load/save cycle is byte-stable.
    pub fn to_xyz(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 32);
        for (i, p) in self.points.iter().enumerate() {
            let _ = write!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
            if let Some(l) = &self.labels {
                let _ = write!(out, " {}", l[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_xyz(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_xyz()).map_err(|e| Error::io(path, e))
    }

    /// Rounds every coordinate through `f32`, matching what a save/load cycle produces.
    pub fn quantized(&self) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| p.map(|v| v as f32 as f64))
            .collect();
        Self {
            points,
            labels: self.labels.clone(),
        }
    }
}

fn check_finite(points: &[Vec3]) -> Result<()> {
    if points.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("point coordinates".into()))
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|k| !(min[k] <= max[k])) {
            return Err(Error::invalid(format!("aabb min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self, axis: Axis) -> f64 {
        self.max[axis.index()] - self.min[axis.index()]
    }

    pub fn center(&self, axis: Axis) -> f64 {
        0.5 * (self.max[axis.index()] + self.min[axis.index()])
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self {
            min: [self.min[0] + t[0], self.min[1] + t[1], self.min[2] + t[2]],
            max: [self.max[0] + t[0], self.max[1] + t[1], self.max[2] + t[2]],
        }
    }

    /// Closed test against the XY rectangle.
    pub fn contains_xy(&self, p: &Vec3) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

pub fn centroid(cloud: &PointCloud) -> Result<Vec3> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut sum = [0.0; 3];
    for p in cloud.points() {
        for k in 0..3 {
            sum[k] += p[k];
        }
    }
    let n = cloud.len() as f64;
    Ok(sum.map(|s| s / n))
}

pub fn aabb(cloud: &PointCloud) -> Result<Aabb> {
    let first = cloud.points().first().ok_or(Error::EmptyCloud)?;
    let mut min = *first;
    let mut max = *first;
    for p in &cloud.points()[1..] {
        for k in 0..3 {
            min[k] = min[k].min(p[k]);
            max[k] = max[k].max(p[k]);
        }
    }
    Ok(Aabb { min, max })
}

/// Signed separation of two boxes along `axis`; negative values are overlap depth.
pub fn axis_gap(a: &Aabb, b: &Aabb, axis: Axis) -> f64 {
    let k = axis.index();
    (a.min[k] - b.max[k]).max(b.min[k] - a.max[k])
}

/// Fraction of `base` points whose XY projection falls inside the XY rectangle of `cover`.
pub fn containment_fraction(base: &PointCloud, cover: &Aabb) -> Result<f64> {
    if base.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let inside = base.points().iter().filter(|p| cover.contains_xy(p)).count();
    Ok(inside as f64 / base.len() as f64)
}

pub fn translate(cloud: &PointCloud, t: Vec3) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect(),
        labels: cloud.labels.clone(),
    }
}

pub fn scale_xy_about_origin(cloud: &PointCloud, s: f64) -> PointCloud {
    if s == 1.0 {
        return cloud.clone();
    }
    PointCloud {
        points: cloud.points.iter().map(|p| [p[0] * s, p[1] * s, p[2]]).collect(),
        labels: cloud.labels.clone(),
    }
}

/// Resamples to exactly `n_target` points: without replacement when the cloud
/// is large enough, with replacement otherwise. Labels travel with their points.
pub fn downsample(cloud: &PointCloud, n_target: usize, rng: &mut Rng) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if n_target == 0 {
        return Err(Error::invalid("downsample target must be at least 1"));
    }
    let picks: Vec<usize> = if cloud.len() >= n_target {
        index::sample(rng, cloud.len(), n_target).into_vec()
    } else {
        (0..n_target).map(|_| rng.random_range(0..cloud.len())).collect()
    };
    Ok(PointCloud {
        points: picks.iter().map(|&i| cloud.points[i]).collect(),
        labels: cloud
            .labels
            .as_ref()
            .map(|l| picks.iter().map(|&i| l[i]).collect()),
    })
}
