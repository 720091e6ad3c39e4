//! Deterministic synthetic shapes world.
//!
//! Scenes are small collections of coloured, textured shapes with pairwise
//! spatial relations. Captions are realized from a three-template grammar
//! whose frequencies are deliberately skewed: the plain `a {color} {shape}`
//! template dominates, while texture and relation captions are rare. A
//! captioner trained on this data collapses onto the frequent template,
//! which makes caption degeneration observable on a laptop.
//!
//! Everything is a pure function of `(scene_id, seed, config)`. Geometry and
//! rasterization use integer arithmetic only.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
const PLACEMENT_ATTEMPTS: usize = 1000;
pub const BACKGROUND: f32 = 0.5;

macro_rules! word_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

word_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Star => "star",
    Diamond => "diamond",
    Hexagon => "hexagon",
});

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
    White => "white",
    Black => "black",
});

word_enum!(Size {
    Small => "small",
    Large => "large",
});

word_enum!(Texture {
    Solid => "solid",
    Striped => "striped",
    Dotted => "dotted",
    Checkered => "checkered",
});

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 0.75, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Purple => [0.6, 0.0, 0.8],
            Color::Orange => [1.0, 0.55, 0.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
        }
    }

    /// Contrasting shade used for the secondary pixels of a texture.
    pub fn texture_rgb(self) -> [f32; 3] {
        let [r, g, b] = self.rgb();
        let lum = 0.299 * r + 0.587 * g + 0.114 * b;
        if lum > 0.5 {
            [r * 0.35, g * 0.35, b * 0.35]
        } else {
            [r * 0.35 + 0.65, g * 0.35 + 0.65, b * 0.35 + 0.65]
        }
    }
}

/// Spatial predicate between two objects. Multi-word predicates realize as
/// `<head> of`; the head word is the class-set word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    LeftOf,
    RightOf,
    Above,
    Below,
    Near,
}

impl Predicate {
    pub const ALL: &'static [Predicate] = &[
        Predicate::LeftOf,
        Predicate::RightOf,
        Predicate::Above,
        Predicate::Below,
        Predicate::Near,
    ];

    pub fn head_word(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left",
            Predicate::RightOf => "right",
            Predicate::Above => "above",
            Predicate::Below => "below",
            Predicate::Near => "near",
        }
    }

    pub fn tokens(self) -> &'static [&'static str] {
        match self {
            Predicate::LeftOf => &["left", "of"],
            Predicate::RightOf => &["right", "of"],
            Predicate::Above => &["above"],
            Predicate::Below => &["below"],
            Predicate::Near => &["near"],
        }
    }
}

/// Axis-aligned box in pixels, top-left origin. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        BBox { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn is_valid_in(&self, width: u32, height: u32) -> bool {
        self.w > 0 && self.h > 0 && self.x as u64 + self.w as u64 <= width as u64 && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn intersection(&self, other: &BBox) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Centre in half-pixel units, so it stays integral.
    fn center2(&self) -> (i64, i64) {
        (
            2 * self.x as i64 + self.w as i64,
            2 * self.y as i64 + self.h as i64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub texture: Texture,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: u32,
    pub predicate: Predicate,
    pub object: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub scene_id: u64,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    pub canvas_size: u32,
}

impl SceneGraph {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn relations_of(&self, subject: u32) -> impl Iterator<Item = &Relation> {
        self.relations.iter().filter(move |r| r.subject == subject)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub canvas_size: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that an object gets a non-solid texture.
    pub non_solid_ratio: f64,
    /// Inclusive side-length range for small objects.
    pub small_side: (u32, u32),
    /// Inclusive side-length range for large objects.
    pub large_side: (u32, u32),
    /// Placement rejects boxes whose IoU with an earlier box reaches this.
    pub max_overlap_iou: f64,
    /// Centres closer than this fraction of the canvas are `near`.
    pub near_fraction: f64,
    /// Sampling weights of templates T0, T1, T2.
    pub template_weights: [f64; 3],
    /// Maximum jitter of the referred box as a fraction of its side; 0 disables.
    pub box_jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            canvas_size: 96,
            min_objects: 2,
            max_objects: 5,
            non_solid_ratio: 0.2,
            small_side: (14, 20),
            large_side: (24, 32),
            max_overlap_iou: 0.3,
            near_fraction: 0.22,
            template_weights: [0.8, 0.1, 0.1],
            box_jitter: 0.0,
        }
    }
}

fn scene_rng(scene_id: u64, seed: u64) -> ChaCha8Rng {
    // splitmix-style mixing keeps neighbouring ids decorrelated.
    let mut z = seed ^ scene_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Generates scene `scene_id` of the world identified by `seed`.
pub fn generate_scene(scene_id: u64, seed: u64, config: &WorldConfig) -> Result<SceneGraph> {
    let mut rng = scene_rng(scene_id, seed);
    let lo = config.min_objects.clamp(1, config.max_objects.max(1));
    let hi = config.max_objects.max(lo);
    let count = rng.random_range(lo..=hi);
    let canvas = config.canvas_size;

    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for id in 0..count {
        let shape = *Shape::ALL.choose(&mut rng).unwrap();
        let color = *Color::ALL.choose(&mut rng).unwrap();
        let size = *Size::ALL.choose(&mut rng).unwrap();
        let texture = if rng.random_bool(config.non_solid_ratio) {
            *Texture::ALL[1..].choose(&mut rng).unwrap()
        } else {
            Texture::Solid
        };
        let (lo_side, hi_side) = match size {
            Size::Small => config.small_side,
            Size::Large => config.large_side,
        };
        let hi_side = hi_side.min(canvas);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = rng.random_range(lo_side.min(hi_side)..=hi_side);
            let x = rng.random_range(0..=canvas - side);
            let y = rng.random_range(0..=canvas - side);
            let candidate = BBox { x, y, w: side, h: side };
            if objects
                .iter()
                .all(|o| o.bbox.iou(&candidate) < config.max_overlap_iou)
            {
                placed = Some(candidate);
                break;
            }
        }
        let bbox = placed.ok_or(Error::Placement {
            object: id,
            attempts: PLACEMENT_ATTEMPTS,
        })?;
        objects.push(SceneObject {
            id: id as u32,
            shape,
            color,
            size,
            texture,
            bbox,
        });
    }

    let near2 = {
        let d = config.near_fraction * canvas as f64 * 2.0;
        (d * d) as i64
    };
    let mut relations = Vec::new();
    for a in &objects {
        for b in &objects {
            if a.id == b.id {
                continue;
            }
            let (ax, ay) = a.bbox.center2();
            let (bx, by) = b.bbox.center2();
            let (dx, dy) = (bx - ax, by - ay);
            let predicate = if dx * dx + dy * dy <= near2 {
                Predicate::Near
            } else if dx.abs() >= dy.abs() {
                if dx > 0 {
                    Predicate::LeftOf
                } else {
                    Predicate::RightOf
                }
            } else if dy > 0 {
                Predicate::Above
            } else {
                Predicate::Below
            };
            relations.push(Relation {
                subject: a.id,
                predicate,
                object: b.id,
            });
        }
    }

    Ok(SceneGraph {
        scene_id,
        seed,
        objects,
        relations,
        canvas_size: canvas,
    })
}

// Polygon vertices in per-mille of the bounding box.
const TRIANGLE: &[(i64, i64)] = &[(500, 0), (1000, 1000), (0, 1000)];
const DIAMOND: &[(i64, i64)] = &[(500, 0), (1000, 500), (500, 1000), (0, 500)];
const HEXAGON: &[(i64, i64)] = &[
    (250, 0),
    (750, 0),
    (1000, 500),
    (750, 1000),
    (250, 1000),
    (0, 500),
];
const STAR: &[(i64, i64)] = &[
    (500, 0),
    (647, 298),
    (976, 345),
    (738, 577),
    (794, 905),
    (500, 750),
    (206, 905),
    (262, 577),
    (24, 345),
    (353, 298),
];

/// Even-odd test with integer cross products.
/// Even-odd test of `(px, py)` against `poly` with its vertices scaled by
/// `(sx, sy)`.
fn in_polygon(px: i64, py: i64, poly: &[(i64, i64)], sx: i64, sy: i64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (ax, ay) = (poly[i].0 * sx, poly[i].1 * sy);
        let (bx, by) = (poly[(i + 1) % n].0 * sx, poly[(i + 1) % n].1 * sy);
        if (ay > py) != (by > py) {
            let t = (px - ax) * (by - ay) - (bx - ax) * (py - ay);
            if (by > ay && t < 0) || (by < ay && t > 0) {
                inside = !inside;
            }
        }
    }
    inside
}

/// Whether the pixel at box offset `(dx, dy)` is covered by `shape`.
fn covers(shape: Shape, dx: u32, dy: u32, w: u32, h: u32) -> bool {
    // Pixel centre in half-pixel units: u in (0, 2w).
    let u = 2 * dx as i64 + 1;
    let v = 2 * dy as i64 + 1;
    let (w, h) = (w as i64, h as i64);
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let (cu, cv) = (u - w, v - h);
            cu * cu * h * h + cv * cv * w * w <= w * w * h * h
        }
        Shape::Triangle | Shape::Diamond | Shape::Hexagon | Shape::Star => {
            let poly = match shape {
                Shape::Triangle => TRIANGLE,
                Shape::Diamond => DIAMOND,
                Shape::Hexagon => HEXAGON,
                _ => STAR,
            };
            // Map both point and polygon into a common integer frame.
            in_polygon(u * 1000, v * 1000, poly, 2 * w, 2 * h)
        }
    }
}

fn texture_alt(texture: Texture, dx: u32, dy: u32) -> bool {
    match texture {
        Texture::Solid => false,
        Texture::Striped => (dy / 2) % 2 == 1,
        Texture::Dotted => (dx / 2) % 2 == 1 && (dy / 2) % 2 == 1,
        Texture::Checkered => (dx / 4 + dy / 4) % 2 == 1,
    }
}

/// Rasterizes the scene onto a uniform grey background, painting objects in
/// id order.
pub fn render(scene: &SceneGraph) -> Image {
    let n = scene.canvas_size as usize;
    let mut img = Image::filled(n, n, BACKGROUND);
    for obj in &scene.objects {
        let b = obj.bbox;
        let base = obj.color.rgb();
        let alt = obj.color.texture_rgb();
        for dy in 0..b.h {
            for dx in 0..b.w {
                if covers(obj.shape, dx, dy, b.w, b.h) {
                    let rgb = if texture_alt(obj.texture, dx, dy) { alt } else { base };
                    img.set_pixel((b.x + dx) as usize, (b.y + dy) as usize, rgb);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    T0,
    T1,
    T2,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [TemplateId::T0, TemplateId::T1, TemplateId::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn rarity(self) -> Rarity {
        match self {
            TemplateId::T0 => Rarity::Frequent,
            _ => Rarity::Rare,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rarity {
    Frequent,
    Rare,
}

/// One captioned region. Field names are the manifest wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSample {
    pub scene_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub caption: Vec<String>,
    pub template_id: TemplateId,
    pub gold_subject_tags: BTreeSet<String>,
    pub gold_object_tags: BTreeSet<String>,
    pub rarity: Rarity,
}

impl RegionSample {
    pub fn caption_text(&self) -> String {
        self.caption.join(" ")
    }

    /// All gold tags, subject first, each group in caption order.
    pub fn gold_tags_in_caption_order(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for group in [&self.gold_subject_tags, &self.gold_object_tags] {
            for tok in &self.caption {
                if group.contains(tok) && !out.contains(tok) {
                    out.push(tok.clone());
                }
            }
        }
        out
    }
}

fn eligible(scene: &SceneGraph, obj: &SceneObject, template: TemplateId) -> bool {
    match template {
        TemplateId::T0 => true,
        TemplateId::T1 => obj.texture != Texture::Solid,
        TemplateId::T2 => scene.relations_of(obj.id).next().is_some(),
    }
}

pub fn sample_template(weights: &[f64; 3], rng: &mut impl Rng) -> TemplateId {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (t, w) in TemplateId::ALL.iter().zip(weights) {
        if r < *w {
            return *t;
        }
        r -= w;
    }
    TemplateId::T2
}

/// Samples a template by the configured weights and realizes a caption for
/// the object. Ineligible draws fall back to T0.
pub fn realize_caption(
    scene: &SceneGraph,
    object_id: u32,
    config: &WorldConfig,
    rng: &mut impl Rng,
) -> Result<RegionSample> {
    let template = sample_template(&config.template_weights, rng);
    realize_with_template(scene, object_id, template, config, rng)
}

/// Realizes a caption with a forced template (falling back to T0 when the
/// object cannot support it).
pub fn realize_with_template(
    scene: &SceneGraph,
    object_id: u32,
    template: TemplateId,
    config: &WorldConfig,
    rng: &mut impl Rng,
) -> Result<RegionSample> {
    let obj = scene
        .object(object_id)
        .ok_or_else(|| Error::Dataset(format!("scene {} has no object {object_id}", scene.scene_id)))?;
    let template = if eligible(scene, obj, template) {
        template
    } else {
        TemplateId::T0
    };

    let mut caption: Vec<String> = vec!["a".into()];
    let mut subject: BTreeSet<String> = BTreeSet::new();
    let mut object: BTreeSet<String> = BTreeSet::new();
    if template == TemplateId::T1 {
        caption.push(obj.texture.word().into());
        subject.insert(obj.texture.word().into());
    }
    caption.push(obj.color.word().into());
    caption.push(obj.shape.word().into());
    subject.insert(obj.color.word().into());
    subject.insert(obj.shape.word().into());

    if template == TemplateId::T2 {
        let rels: Vec<&Relation> = scene.relations_of(obj.id).collect();
        let rel = **rels.choose(rng).expect("eligibility checked");
        let other = scene.object(rel.object).expect("relation references scene object");
        caption.extend(rel.predicate.tokens().iter().map(|s| s.to_string()));
        caption.push("a".into());
        caption.push(other.color.word().into());
        caption.push(other.shape.word().into());
        for w in [rel.predicate.head_word(), other.color.word(), other.shape.word()] {
            if !subject.contains(w) {
                object.insert(w.to_string());
            }
        }
    }

    let bbox = jitter_box(obj.bbox, config, scene.canvas_size, rng);
    Ok(RegionSample {
        scene_id: scene.scene_id,
        bbox,
        caption,
        template_id: template,
        gold_subject_tags: subject,
        gold_object_tags: object,
        rarity: template.rarity(),
    })
}

fn jitter_box(b: BBox, config: &WorldConfig, canvas: u32, rng: &mut impl Rng) -> BBox {
    if config.box_jitter <= 0.0 {
        return b;
    }
    let j = config.box_jitter.min(0.1);
    let max_dx = (b.w as f64 * j).floor() as i64;
    let max_dy = (b.h as f64 * j).floor() as i64;
    let mut shift = |m: i64| if m > 0 { rng.random_range(-m..=m) } else { 0 };
    let x0 = (b.x as i64 + shift(max_dx)).max(0);
    let y0 = (b.y as i64 + shift(max_dy)).max(0);
    let x1 = (b.x as i64 + b.w as i64 + shift(max_dx)).min(canvas as i64);
    let y1 = (b.y as i64 + b.h as i64 + shift(max_dy)).min(canvas as i64);
    if x1 - x0 < 2 || y1 - y0 < 2 {
        return b;
    }
    BBox {
        x: x0 as u32,
        y: y0 as u32,
        w: (x1 - x0) as u32,
        h: (y1 - y0) as u32,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Region samples drawn from each scene (distinct objects).
    pub regions_per_scene: usize,
    /// Upper bound on scene ids the builder may consume.
    pub max_scenes: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train_samples: 10_000,
            val_samples: 1_000,
            test_samples: 1_000,
            regions_per_scene: 2,
            max_scenes: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub train: Vec<RegionSample>,
    pub val: Vec<RegionSample>,
    pub test: Vec<RegionSample>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[RegionSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn world(&self) -> &WorldConfig {
        &self.header.config.world
    }

    /// Regenerates a scene from its id; scenes are never stored.
    pub fn scene(&self, scene_id: u64) -> Result<SceneGraph> {
        generate_scene(scene_id, self.header.seed, self.world())
    }

    /// All scene ids referenced by any split, ascending.
    pub fn scene_ids(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(|s| s.scene_id)
            .collect();
        set.into_iter().collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = dir.join("header.json");
        fs::write(&header, serde_json::to_string_pretty(&self.header)?).map_err(|e| Error::io(&header, e))?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let path = dir.join(format!("{}.jsonl", split.name()));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for s in self.split(split) {
                serde_json::to_writer(&mut w, s)?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let header_path = dir.join("header.json");
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: ManifestHeader = serde_json::from_str(&text)?;
        if header.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported manifest format {} (expected {MANIFEST_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let read_split = |split: Split| -> Result<Vec<RegionSample>> {
            let path = dir.join(format!("{}.jsonl", split.name()));
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut out = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if !line.trim().is_empty() {
                    out.push(serde_json::from_str(&line)?);
                }
            }
            Ok(out)
        };
        Ok(Self {
            train: read_split(Split::Train)?,
            val: read_split(Split::Val)?,
            test: read_split(Split::Test)?,
            header,
        })
    }
}

/// Builds scene-disjoint train/val/test splits.
///
/// Templates are drawn first and then assigned to an eligible, not yet used
/// object of the current scene; a draw that no object can support is carried
/// over to the next scene. This keeps the template marginals at the
/// configured weights even though texture and relation eligibility vary per
/// scene.
pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<DatasetManifest> {
    if config.regions_per_scene == 0 {
        return Err(Error::Dataset("regions_per_scene must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut next_scene: u64 = 0;
    let mut splits = Vec::new();
    for target in [config.train_samples, config.val_samples, config.test_samples] {
        let mut samples = Vec::with_capacity(target);
        let mut pending: VecDeque<TemplateId> = VecDeque::new();
        while samples.len() < target {
            if next_scene >= config.max_scenes {
                return Err(Error::Dataset(format!(
                    "requested split sizes need more than max_scenes = {} scenes",
                    config.max_scenes
                )));
            }
            let scene = generate_scene(next_scene, seed, &config.world)?;
            next_scene += 1;
            let mut used: HashSet<u32> = HashSet::new();
            let mut deferred = Vec::new();
            let mut attempts = 0;
            while used.len() < config.regions_per_scene
                && used.len() < scene.objects.len()
                && samples.len() < target
                && attempts < 4 * config.regions_per_scene
            {
                attempts += 1;
                let template = pending
                    .pop_front()
                    .unwrap_or_else(|| sample_template(&config.world.template_weights, &mut rng));
                let candidates: Vec<u32> = scene
                    .objects
                    .iter()
                    .filter(|o| !used.contains(&o.id) && eligible(&scene, o, template))
                    .map(|o| o.id)
                    .collect();
                match candidates.choose(&mut rng) {
                    Some(&id) => {
                        used.insert(id);
                        samples.push(realize_with_template(&scene, id, template, &config.world, &mut rng)?);
                    }
                    None => deferred.push(template),
                }
            }
            for t in deferred.into_iter().rev() {
                pending.push_front(t);
            }
        }
        splits.push(samples);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(DatasetManifest {
        header: ManifestHeader {
            format_version: MANIFEST_FORMAT_VERSION,
            config: config.clone(),
            seed,
        },
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n: usize) -> DatasetConfig {
        DatasetConfig {
            train_samples: n,
            val_samples: n / 10,
            test_samples: n / 10,
            ..Default::default()
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = serde_json::to_string(&generate_scene(0, 0, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_scene(0, 0, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&generate_scene(1, 0, &cfg).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_object_config_has_no_relations() {
        let cfg = WorldConfig {
            min_objects: 1,
            max_objects: 1,
            ..Default::default()
        };
        for id in 0..20 {
            let s = generate_scene(id, 3, &cfg).unwrap();
            assert_eq!(s.objects.len(), 1);
            assert!(s.relations.is_empty());
        }
    }

    #[test]
    fn scene_invariants_hold() {
        let cfg = WorldConfig::default();
        for id in 0..300 {
            let s = generate_scene(id, 11, &cfg).unwrap();
            assert!((2..=5).contains(&s.objects.len()));
            for o in &s.objects {
                assert!(o.bbox.is_valid_in(cfg.canvas_size, cfg.canvas_size));
            }
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[i + 1..] {
                    assert!(a.bbox.iou(&b.bbox) <= 0.3);
                }
            }
            for r in &s.relations {
                assert!(s.object(r.subject).is_some() && s.object(r.object).is_some());
            }
        }
    }

    #[test]
    fn over_dense_config_fails_placement() {
        let cfg = WorldConfig {
            min_objects: 5,
            max_objects: 5,
            small_side: (90, 96),
            large_side: (90, 96),
            max_overlap_iou: 0.01,
            ..Default::default()
        };
        assert!(matches!(generate_scene(0, 0, &cfg), Err(Error::Placement { .. })));
    }

    #[test]
    fn non_solid_fraction_over_many_seeds() {
        let cfg = WorldConfig::default();
        let (mut non_solid, mut total) = (0usize, 0usize);
        for seed in 0..1000 {
            let s = generate_scene(0, seed, &cfg).unwrap();
            total += s.objects.len();
            non_solid += s.objects.iter().filter(|o| o.texture != Texture::Solid).count();
        }
        let frac = non_solid as f64 / total as f64;
        assert!((0.15..=0.25).contains(&frac), "non-solid fraction {frac}");
    }

    fn one_object_scene(shape: Shape, color: Color, texture: Texture, bbox: BBox) -> SceneGraph {
        SceneGraph {
            scene_id: 0,
            seed: 0,
            objects: vec![SceneObject {
                id: 0,
                shape,
                color,
                size: Size::Large,
                texture,
                bbox,
            }],
            relations: vec![],
            canvas_size: 96,
        }
    }

    #[test]
    fn empty_scene_renders_uniform_grey() {
        let mut s = one_object_scene(Shape::Square, Color::Red, Texture::Solid, BBox { x: 0, y: 0, w: 1, h: 1 });
        s.objects.clear();
        let img = render(&s);
        assert_eq!((img.width, img.height), (96, 96));
        assert!(img.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn red_square_fills_its_box() {
        let b = BBox { x: 10, y: 20, w: 30, h: 30 };
        let img = render(&one_object_scene(Shape::Square, Color::Red, Texture::Solid, b));
        for y in 21..49 {
            for x in 11..39 {
                assert_eq!(img.pixel(x, y), [1.0, 0.0, 0.0]);
            }
        }
        assert_eq!(img.pixel(9, 20), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn textures_change_object_pixels() {
        let b = BBox { x: 30, y: 30, w: 28, h: 28 };
        let solid = render(&one_object_scene(Shape::Circle, Color::Blue, Texture::Solid, b));
        for tex in [Texture::Striped, Texture::Dotted, Texture::Checkered] {
            let textured = render(&one_object_scene(Shape::Circle, Color::Blue, tex, b));
            let (mut object_px, mut diff) = (0, 0);
            for y in 0..96 {
                for x in 0..96 {
                    if solid.pixel(x, y) != [0.5, 0.5, 0.5] {
                        object_px += 1;
                        if solid.pixel(x, y) != textured.pixel(x, y) {
                            diff += 1;
                        }
                    }
                }
            }
            assert!(diff * 10 >= object_px, "{tex:?}: {diff}/{object_px}");
        }
    }

    #[test]
    fn shapes_are_distinct_masks() {
        let b = BBox { x: 0, y: 0, w: 32, h: 32 };
        let masks: Vec<Vec<bool>> = Shape::ALL
            .iter()
            .map(|&s| {
                let img = render(&one_object_scene(s, Color::Black, Texture::Solid, b));
                img.data.chunks(3).map(|p| p[0] == 0.0).collect()
            })
            .collect();
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                let d = masks[i].iter().zip(&masks[j]).filter(|(a, b)| a != b).count();
                assert!(d > 20, "{:?} vs {:?}", Shape::ALL[i], Shape::ALL[j]);
            }
        }
    }

    #[test]
    fn forced_templates_realize_exact_captions() {
        let scene = one_object_scene(Shape::Circle, Color::Red, Texture::Striped, BBox { x: 5, y: 5, w: 20, h: 20 });
        let cfg = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t1 = realize_with_template(&scene, 0, TemplateId::T1, &cfg, &mut rng).unwrap();
        assert_eq!(t1.caption_text(), "a striped red circle");
        assert_eq!(t1.gold_subject_tags, ["striped", "red", "circle"].iter().map(|s| s.to_string()).collect());
        assert!(t1.gold_object_tags.is_empty());
        assert_eq!(t1.rarity, Rarity::Rare);
        let t0 = realize_with_template(&scene, 0, TemplateId::T0, &cfg, &mut rng).unwrap();
        assert_eq!(t0.caption_text(), "a red circle");
        assert_eq!(t0.gold_subject_tags.len(), 2);
        // No relations in a one-object scene: T2 falls back to T0.
        let t2 = realize_with_template(&scene, 0, TemplateId::T2, &cfg, &mut rng).unwrap();
        assert_eq!(t2.template_id, TemplateId::T0);
    }

    #[test]
    fn relation_caption_splits_tags() {
        let cfg = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = 0;
        for id in 0..50 {
            let scene = generate_scene(id, 1, &cfg).unwrap();
            let s = realize_with_template(&scene, 0, TemplateId::T2, &cfg, &mut rng).unwrap();
            assert_eq!(s.template_id, TemplateId::T2);
            assert!(s.gold_subject_tags.is_disjoint(&s.gold_object_tags));
            for t in s.gold_subject_tags.iter().chain(&s.gold_object_tags) {
                assert!(s.caption.contains(t));
            }
            seen += 1;
        }
        assert_eq!(seen, 50);
    }

    #[test]
    fn dataset_splits_are_scene_disjoint_and_deterministic() {
        let cfg = small_config(600);
        let a = build_dataset(&cfg, 4).unwrap();
        let b = build_dataset(&cfg, 4).unwrap();
        assert_eq!(a, b);
        let ids = |v: &[RegionSample]| v.iter().map(|s| s.scene_id).collect::<HashSet<_>>();
        let (tr, va, te) = (ids(&a.train), ids(&a.val), ids(&a.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(a.train.len(), 600);
        assert_eq!(a.test.len(), 60);
    }

    #[test]
    fn dataset_gold_tags_appear_in_captions() {
        let m = build_dataset(&small_config(500), 2).unwrap();
        for s in m.train.iter().chain(&m.test) {
            for t in s.gold_subject_tags.iter().chain(&s.gold_object_tags) {
                assert!(s.caption.contains(t));
            }
            if s.template_id == TemplateId::T0 {
                assert_eq!(s.caption.len(), 3);
            }
            assert_eq!(s.rarity == Rarity::Rare, s.template_id != TemplateId::T0);
            let scene = m.scene(s.scene_id).unwrap();
            assert!(scene.objects.iter().any(|o| o.bbox == s.bbox));
        }
    }

    #[test]
    fn manifest_round_trips_through_files() {
        let m = build_dataset(&small_config(100), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(DatasetManifest::read(dir.path()).unwrap(), m);
    }

    #[test]
    fn refuses_when_scene_budget_is_too_small() {
        let cfg = DatasetConfig {
            max_scenes: 10,
            ..small_config(100)
        };
        assert!(build_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn jitter_stays_in_canvas() {
        let cfg = WorldConfig {
            box_jitter: 0.1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in 0..100 {
            let scene = generate_scene(id, 0, &cfg).unwrap();
            let s = realize_caption(&scene, 0, &cfg, &mut rng).unwrap();
            assert!(s.bbox.is_valid_in(96, 96));
            assert!(s.bbox.iou(&scene.objects[0].bbox) > 0.5);
        }
    }
}
