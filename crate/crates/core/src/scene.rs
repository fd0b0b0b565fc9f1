//! Scenes as sets of labeled oriented boxes, plus the box arithmetic the
//! rest of the crate relies on. All lengths are meters.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::io::BufRead;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Box given by center, full extents and a rotation about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: Vec3,
    pub size: Vec3,
    #[serde(default)]
    pub yaw: f64,
}

impl Box3 {
    /// Builds a validated box; yaw is wrapped into `[-pi, pi)`.
    pub fn new(center: Vec3, size: Vec3, yaw: f64) -> Result<Self> {
        if !center.is_finite() || !size.is_finite() || !yaw.is_finite() {
            return Err(Error::InvalidScene("non-finite box geometry".into()));
        }
        if size.x <= 0.0 || size.y <= 0.0 || size.z <= 0.0 {
            return Err(Error::InvalidScene(format!(
                "box size must be positive, got {:?}",
                size.to_array()
            )));
        }
        Ok(Box3 {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn axis_aligned(center: Vec3, size: Vec3) -> Result<Self> {
        Box3::new(center, size, 0.0)
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    /// Half extents of the axis-aligned hull of this (possibly rotated) box.
    pub fn half_extents(&self) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let (hx, hy) = (self.size.x / 2.0, self.size.y / 2.0);
        Vec3::new(
            (hx * c).abs() + (hy * s).abs(),
            (hx * s).abs() + (hy * c).abs(),
            self.size.z / 2.0,
        )
    }

    pub fn min(&self) -> Vec3 {
        self.center - self.half_extents()
    }

    pub fn max(&self) -> Vec3 {
        self.center + self.half_extents()
    }

    /// Half the length of the box's space diagonal.
    pub fn half_diagonal(&self) -> f64 {
        self.size.norm() / 2.0
    }

    /// Same box with extents scaled by `factor` about its center.
    pub fn inflated(&self, factor: f64) -> Box3 {
        Box3 {
            size: self.size * factor,
            ..*self
        }
    }

    pub fn contains_point(&self, p: Vec3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (lo.x..=hi.x).contains(&p.x) && (lo.y..=hi.y).contains(&p.y) && (lo.z..=hi.z).contains(&p.z)
    }

    pub fn contains_box(&self, other: &Box3) -> bool {
        self.contains_point(other.min()) && self.contains_point(other.max())
    }

    /// Area of the overlap of the two footprints on the floor plane.
    pub fn footprint_overlap(&self, other: &Box3) -> f64 {
        let (a0, a1, b0, b1) = (self.min(), self.max(), other.min(), other.max());
        interval_overlap(a0.x, a1.x, b0.x, b1.x) * interval_overlap(a0.y, a1.y, b0.y, b1.y)
    }

    pub fn footprint_area(&self) -> f64 {
        let h = self.half_extents();
        4.0 * h.x * h.y
    }
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Intersection-over-union of two axis-aligned boxes.
pub fn aabb_iou(a: &Box3, b: &Box3) -> Result<f64> {
    if a.yaw != 0.0 || b.yaw != 0.0 {
        return Err(Error::NonAxisAligned);
    }
    let (a0, a1, b0, b1) = (a.min(), a.max(), b.min(), b.max());
    let inter = interval_overlap(a0.x, a1.x, b0.x, b1.x)
        * interval_overlap(a0.y, a1.y, b0.y, b1.y)
        * interval_overlap(a0.z, a1.z, b0.z, b1.z);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    if a == b {
        return Ok(1.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: i64,
    #[serde(rename = "class")]
    pub class_label: String,
    #[serde(flatten)]
    pub bbox: Box3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec3>>,
}

impl SceneObject {
    pub fn new(id: i64, class_label: impl Into<String>, bbox: Box3) -> Self {
        SceneObject {
            id,
            class_label: class_label.into(),
            bbox,
            points: None,
        }
    }

    pub fn center(&self) -> Vec3 {
        self.bbox.center
    }

    fn validate(&self) -> Result<()> {
        if self.id < 0 {
            return Err(Error::InvalidScene(format!("negative object id {}", self.id)));
        }
        if self.class_label.is_empty() {
            return Err(Error::InvalidScene(format!("object {} has empty class", self.id)));
        }
        Box3::new(self.bbox.center, self.bbox.size, self.bbox.yaw)?;
        if !(-PI..PI).contains(&self.bbox.yaw) {
            return Err(Error::InvalidScene(format!(
                "object {} has yaw outside [-pi, pi)",
                self.id
            )));
        }
        if let Some(points) = &self.points {
            let hull = self.bbox.inflated(1.05);
            if let Some(p) = points.iter().find(|p| !hull.contains_point(**p)) {
                return Err(Error::InvalidScene(format!(
                    "object {} has point {:?} outside its box",
                    self.id,
                    p.to_array()
                )));
            }
        }
        Ok(())
    }
}

/// Euclidean distance between box centers.
pub fn distance(a: &SceneObject, b: &SceneObject) -> f64 {
    (a.center() - b.center()).norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Builds a scene and checks its invariants.
    pub fn new(scene_id: impl Into<String>, objects: Vec<SceneObject>) -> Result<Self> {
        let s = Scene {
            scene_id: scene_id.into(),
            objects,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidScene(format!("scene {} has no objects", self.scene_id)));
        }
        let mut seen = HashSet::new();
        for o in &self.objects {
            o.validate()?;
            if !seen.insert(o.id) {
                return Err(Error::InvalidScene(format!("duplicate object id {}", o.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn index_of(&self, id: i64) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    pub fn object(&self, id: i64) -> Result<&SceneObject> {
        self.objects.iter().find(|o| o.id == id).ok_or(Error::UnknownObject(id))
    }

    pub fn contains(&self, id: i64) -> bool {
        self.index_of(id).is_some()
    }

    /// Mean of all object centers.
    pub fn centroid(&self) -> Vec3 {
        if self.objects.is_empty() {
            return Vec3::ZERO;
        }
        let sum = self.objects.iter().fold(Vec3::ZERO, |acc, o| acc + o.center());
        sum * (1.0 / self.objects.len() as f64)
    }

    /// Number of objects carrying `class_label`.
    pub fn class_count(&self, class_label: &str) -> usize {
        self.objects.iter().filter(|o| o.class_label == class_label).count()
    }

    /// Copy of the scene keeping only objects whose id satisfies `keep`.
    /// Object order is preserved.
    pub fn retain_ids(&self, keep: impl Fn(i64) -> bool) -> Scene {
        Scene {
            scene_id: self.scene_id.clone(),
            objects: self.objects.iter().filter(|o| keep(o.id)).cloned().collect(),
        }
    }
}

/// Translates the scene so the centroid of its object centers is the origin.
pub fn center_scene(s: &Scene) -> Scene {
    let c = s.centroid();
    let mut out = s.clone();
    for o in &mut out.objects {
        o.bbox.center = o.bbox.center - c;
        if let Some(points) = &mut o.points {
            for p in points.iter_mut() {
                *p = *p - c;
            }
        }
    }
    out
}

/// Ids of every other object sharing the target's class label.
pub fn same_class_distractors(s: &Scene, target_id: i64) -> Result<BTreeSet<i64>> {
    let target = s.object(target_id)?;
    Ok(s.objects
        .iter()
        .filter(|o| o.id != target_id && o.class_label == target.class_label)
        .map(|o| o.id)
        .collect())
}

/// Reads either a single JSON scene or a JSONL stream of scenes.
pub fn read_scenes(reader: impl BufRead) -> Result<Vec<Scene>> {
    let text = std::io::read_to_string(reader)?;
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if let Ok(scene) = serde_json::from_str::<Scene>(trimmed) {
        scene.validate()?;
        return Ok(vec![scene]);
    }
    let mut scenes = Vec::new();
    for line in trimmed.lines().filter(|l| !l.trim().is_empty()) {
        let scene: Scene = serde_json::from_str(line)?;
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn write_scenes_jsonl(scenes: &[Scene]) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}
