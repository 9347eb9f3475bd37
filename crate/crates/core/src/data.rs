//! Procedural objects with two-level part labels, and their file formats.
//!
//! Objects are assembled from surface patches (box faces, open cylinders,
//! disks) and sampled uniformly by area. Every patch carries a middle-level
//! class; each middle class belongs to exactly one top-level part.
//!
//! | family | top parts (K_top) | middle classes (C_true) |
//! |--------|-------------------|-------------------------|
//! | chairs | seat, back, legs, armrest | seat top, seat sides, back panel, back posts, leg shafts, leg feet, arm pads, arm supports |
//! | tables | top, legs, supports | top surface, top edges, leg shafts, leg feet, aprons, shelf |
//! | lamps | base, pole, shade | base top, base side, pole, shade wall, shade cap |
//! | mixed | all of the above, offset | all of the above, offset |
//!
//! Armrests (chairs) and shelves (tables) are present in half of the
//! objects. Coordinates are raw; normalization happens in
//! [`crate::geometry::prepare`].

use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const DEFAULT_POINTS: usize = 512;
pub const CLOUD_HEADER: &str = "ptc v1";
pub const MANIFEST_FORMAT: &str = "hpk-manifest.v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Chairs,
    Tables,
    Lamps,
    Mixed,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Chairs, Family::Tables, Family::Lamps, Family::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Chairs => "chairs",
            Family::Tables => "tables",
            Family::Lamps => "lamps",
            Family::Mixed => "mixed",
        }
    }

    /// Middle class → top part.
    pub fn mid_to_top(self) -> Vec<usize> {
        match self {
            Family::Chairs => vec![0, 0, 1, 1, 2, 2, 3, 3],
            Family::Tables => vec![0, 0, 1, 1, 2, 2],
            Family::Lamps => vec![0, 0, 1, 2, 2],
            Family::Mixed => {
                let mut out = Vec::new();
                let mut offset = 0;
                for f in [Family::Chairs, Family::Tables, Family::Lamps] {
                    out.extend(f.mid_to_top().iter().map(|t| t + offset));
                    offset += f.num_top();
                }
                out
            }
        }
    }

    pub fn num_top(self) -> usize {
        self.mid_to_top().iter().max().map_or(0, |m| m + 1)
    }

    pub fn num_mid(self) -> usize {
        self.mid_to_top().len()
    }

    /// The family whose schema has these class counts.
    pub fn from_counts(num_top: usize, num_mid: usize) -> Option<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.num_top() == num_top && f.num_mid() == num_mid)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown family {s:?}; expected chairs, tables, lamps or mixed")))
    }
}

/// A cloud with 0-based top and middle labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub top: Vec<usize>,
    pub mid: Vec<usize>,
    pub family: Family,
}

impl LabeledCloud {
    pub fn new(cloud: PointCloud, top: Vec<usize>, mid: Vec<usize>, family: Family) -> Result<Self> {
        if top.len() != cloud.len() || mid.len() != cloud.len() {
            return Err(Error::Contract(format!(
                "{} points with {} top and {} middle labels",
                cloud.len(),
                top.len(),
                mid.len()
            )));
        }
        let map = family.mid_to_top();
        for (i, (&t, &m)) in top.iter().zip(&mid).enumerate() {
            if m >= map.len() || map[m] != t {
                return Err(Error::Contract(format!(
                    "point {i}: middle class {m} is not a sub-part of top part {t} in the {family} schema"
                )));
            }
        }
        Ok(LabeledCloud { cloud, top, mid, family })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn length(a: V3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Two unit vectors orthogonal to `axis` and to each other.
fn basis(axis: V3) -> (V3, V3) {
    let a = scale(axis, 1.0 / length(axis));
    let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = cross(a, helper);
    let e1 = scale(e1, 1.0 / length(e1));
    (e1, cross(a, e1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// `origin + s·u + t·v` for `s, t ∈ [0, 1]`.
    Rect { origin: V3, u: V3, v: V3 },
    /// Lateral surface of a cylinder standing on `base` along unit `axis`.
    Cylinder { base: V3, axis: V3, radius: f64, height: f64 },
    Disk { center: V3, normal: V3, radius: f64 },
}

impl Shape {
    pub fn area(&self) -> f64 {
        match *self {
            Shape::Rect { u, v, .. } => length(cross(u, v)),
            Shape::Cylinder { radius, height, .. } => 2.0 * PI * radius * height,
            Shape::Disk { radius, .. } => PI * radius * radius,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> V3 {
        match *self {
            Shape::Rect { origin, u, v } => add(origin, add(scale(u, rng.gen()), scale(v, rng.gen()))),
            Shape::Cylinder {
                base,
                axis,
                radius,
                height,
            } => {
                let (e1, e2) = basis(axis);
                let theta = rng.gen::<f64>() * 2.0 * PI;
                let h = rng.gen::<f64>() * height;
                let ring = add(scale(e1, radius * theta.cos()), scale(e2, radius * theta.sin()));
                add(base, add(ring, scale(axis, h)))
            }
            Shape::Disk { center, normal, radius } => {
                let (e1, e2) = basis(normal);
                let theta = rng.gen::<f64>() * 2.0 * PI;
                let rho = radius * rng.gen::<f64>().sqrt();
                add(center, add(scale(e1, rho * theta.cos()), scale(e2, rho * theta.sin())))
            }
        }
    }
}

/// A labelled surface primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub shape: Shape,
    pub top: usize,
    pub mid: usize,
}

const UP: V3 = [0.0, 0.0, 1.0];

struct Builder {
    patches: Vec<Patch>,
    mid_to_top: Vec<usize>,
}

impl Builder {
    fn new(family: Family) -> Self {
        Builder {
            patches: Vec::new(),
            mid_to_top: family.mid_to_top(),
        }
    }

    fn push(&mut self, shape: Shape, mid: usize) {
        self.patches.push(Patch {
            shape,
            top: self.mid_to_top[mid],
            mid,
        });
    }

    /// Axis-aligned box; the upward face gets `top_mid`, the other five
    /// faces `rest_mid`.
    fn cuboid(&mut self, lo: V3, hi: V3, top_mid: usize, rest_mid: usize) {
        let [dx, dy, dz] = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let x = [dx, 0.0, 0.0];
        let y = [0.0, dy, 0.0];
        let z = [0.0, 0.0, dz];
        self.push(Shape::Rect { origin: add(lo, z), u: x, v: y }, top_mid);
        self.push(Shape::Rect { origin: lo, u: x, v: y }, rest_mid);
        self.push(Shape::Rect { origin: lo, u: x, v: z }, rest_mid);
        self.push(Shape::Rect { origin: add(lo, y), u: x, v: z }, rest_mid);
        self.push(Shape::Rect { origin: lo, u: y, v: z }, rest_mid);
        self.push(Shape::Rect { origin: add(lo, x), u: y, v: z }, rest_mid);
    }

    fn post(&mut self, x: f64, y: f64, z0: f64, z1: f64, radius: f64, mid: usize) {
        self.push(
            Shape::Cylinder {
                base: [x, y, z0],
                axis: UP,
                radius,
                height: z1 - z0,
            },
            mid,
        );
    }

    fn disk(&mut self, x: f64, y: f64, z: f64, radius: f64, mid: usize) {
        self.push(
            Shape::Disk {
                center: [x, y, z],
                normal: UP,
                radius,
            },
            mid,
        );
    }
}

fn chair<R: Rng + ?Sized>(b: &mut Builder, rng: &mut R) {
    let w = rng.gen_range(0.8..1.2);
    let d = rng.gen_range(0.8..1.1);
    let t = rng.gen_range(0.08..0.14);
    let h = rng.gen_range(0.8..1.05);
    b.cuboid([-w / 2.0, -d / 2.0, h], [w / 2.0, d / 2.0, h + t], 0, 1);

    let r = rng.gen_range(0.04..0.065);
    let foot = rng.gen_range(0.06..0.1);
    let inset = r * 1.6;
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let x = sx * (w / 2.0 - inset);
        let y = sy * (d / 2.0 - inset);
        b.post(x, y, foot, h, r, 4);
        b.post(x, y, 0.0, foot, 1.6 * r, 5);
        b.disk(x, y, 0.0, 1.6 * r, 5);
    }

    let seat_top = h + t;
    let back_h = rng.gen_range(0.8..1.15);
    let gap = rng.gen_range(0.15..0.3);
    let rp = rng.gen_range(0.035..0.055);
    let panel_t = rng.gen_range(0.05..0.08);
    let y_back = d / 2.0 - rp;
    for sx in [-1.0, 1.0] {
        b.post(sx * (w / 2.0 - rp), y_back, seat_top, seat_top + back_h, rp, 3);
    }
    b.cuboid(
        [-w / 2.0 + 2.0 * rp, y_back - panel_t / 2.0, seat_top + gap],
        [w / 2.0 - 2.0 * rp, y_back + panel_t / 2.0, seat_top + back_h],
        2,
        2,
    );

    if rng.gen_bool(0.5) {
        let arm_h = rng.gen_range(0.25..0.35);
        let ra = rng.gen_range(0.03..0.045);
        let pad_w = rng.gen_range(0.08..0.12);
        for sx in [-1.0, 1.0] {
            let x = sx * (w / 2.0 - pad_w / 2.0);
            b.post(x, -d / 4.0, seat_top, seat_top + arm_h, ra, 7);
            b.cuboid(
                [x - pad_w / 2.0, -d / 2.0, seat_top + arm_h],
                [x + pad_w / 2.0, d / 2.0 - 2.0 * rp - 0.02, seat_top + arm_h + 0.05],
                6,
                6,
            );
        }
    }
}

fn table<R: Rng + ?Sized>(b: &mut Builder, rng: &mut R) {
    let w = rng.gen_range(1.4..2.0);
    let d = rng.gen_range(0.8..1.2);
    let t = rng.gen_range(0.06..0.1);
    let h = rng.gen_range(1.1..1.4);
    b.cuboid([-w / 2.0, -d / 2.0, h - t], [w / 2.0, d / 2.0, h], 0, 1);

    let r = rng.gen_range(0.045..0.07);
    let foot = rng.gen_range(0.05..0.09);
    let inset = rng.gen_range(0.1..0.15);
    let apron = rng.gen_range(0.1..0.16);
    let (lx, ly) = (w / 2.0 - inset, d / 2.0 - inset);
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        b.post(sx * lx, sy * ly, foot, h - t, r, 2);
        b.post(sx * lx, sy * ly, 0.0, foot, 1.5 * r, 3);
        b.disk(sx * lx, sy * ly, 0.0, 1.5 * r, 3);
    }
    let z0 = h - t - apron;
    let th = 0.02;
    b.cuboid([-lx, -ly - th, z0], [lx, -ly + th, h - t], 4, 4);
    b.cuboid([-lx, ly - th, z0], [lx, ly + th, h - t], 4, 4);
    b.cuboid([-lx - th, -ly, z0], [-lx + th, ly, h - t], 4, 4);
    b.cuboid([lx - th, -ly, z0], [lx + th, ly, h - t], 4, 4);
    if rng.gen_bool(0.5) {
        let zs = rng.gen_range(0.25..0.4);
        b.cuboid([-lx, -ly, zs], [lx, ly, zs + 0.03], 5, 5);
    }
}

fn lamp<R: Rng + ?Sized>(b: &mut Builder, rng: &mut R) {
    let rb = rng.gen_range(0.3..0.45);
    let hb = rng.gen_range(0.06..0.12);
    b.post(0.0, 0.0, 0.0, hb, rb, 1);
    b.disk(0.0, 0.0, 0.0, rb, 1);
    b.disk(0.0, 0.0, hb, rb, 0);

    let rp = rng.gen_range(0.025..0.045);
    let hp = rng.gen_range(1.0..1.5);
    b.post(0.0, 0.0, hb, hb + hp, rp, 2);

    let rs = rng.gen_range(0.35..0.5);
    let hs = rng.gen_range(0.35..0.5);
    let z0 = hb + hp - 0.3 * hs;
    b.post(0.0, 0.0, z0, z0 + hs, rs, 3);
    b.disk(0.0, 0.0, z0 + hs, rs, 4);
}

/// Surface patches of one random object.
pub fn assemble<R: Rng + ?Sized>(family: Family, rng: &mut R) -> Vec<Patch> {
    match family {
        Family::Mixed => {
            let pick = [Family::Chairs, Family::Tables, Family::Lamps][rng.gen_range(0..3)];
            let (top_offset, mid_offset) = match pick {
                Family::Chairs => (0, 0),
                Family::Tables => (Family::Chairs.num_top(), Family::Chairs.num_mid()),
                _ => (
                    Family::Chairs.num_top() + Family::Tables.num_top(),
                    Family::Chairs.num_mid() + Family::Tables.num_mid(),
                ),
            };
            assemble(pick, rng)
                .into_iter()
                .map(|p| Patch {
                    shape: p.shape,
                    top: p.top + top_offset,
                    mid: p.mid + mid_offset,
                })
                .collect()
        }
        _ => {
            let mut b = Builder::new(family);
            match family {
                Family::Chairs => chair(&mut b, rng),
                Family::Tables => table(&mut b, rng),
                _ => lamp(&mut b, rng),
            }
            b.patches
        }
    }
}

/// Area-uniform sample of `m` points with their patch labels.
pub fn sample_surface<R: Rng + ?Sized>(patches: &[Patch], m: usize, rng: &mut R) -> Result<(Vec<V3>, Vec<usize>, Vec<usize>)> {
    let areas: Vec<f64> = patches.iter().map(|p| p.shape.area()).collect();
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::Contract(format!("patch areas: {e}")))?;
    let mut pts = Vec::with_capacity(m);
    let mut top = Vec::with_capacity(m);
    let mut mid = Vec::with_capacity(m);
    for _ in 0..m {
        let p = &patches[pick.sample(rng)];
        pts.push(p.shape.sample(rng));
        top.push(p.top);
        mid.push(p.mid);
    }
    Ok((pts, top, mid))
}

/// One random object of `family` with `m` points, fully determined by `seed`.
pub fn generate_object(family: Family, seed: u64, m: usize) -> Result<LabeledCloud> {
    if m == 0 {
        return Err(Error::Parameter("an object needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = assemble(family, &mut rng);
    let (pts, top, mid) = sample_surface(&patches, m, &mut rng)?;
    LabeledCloud::new(PointCloud::new(pts)?, top, mid, family)
}

/// Seed of object `index` in a dataset generated from `seed`.
pub fn object_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.gen()
}

/// Writes a `ptc v1` file with 1-based labels and round-trip float text.
pub fn write_cloud(path: &Path, c: &LabeledCloud) -> Result<()> {
    let mut text = format!(
        "{CLOUD_HEADER} {} {} {}\n",
        c.len(),
        c.family.num_top(),
        c.family.num_mid()
    );
    for ((p, t), m) in c.cloud.points().iter().zip(&c.top).zip(&c.mid) {
        writeln!(text, "{} {} {} {} {}", p[0], p[1], p[2], t + 1, m + 1).expect("string write");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<LabeledCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text, &path.display().to_string())
}

/// Parses `ptc v1` text; `source` names the input in error messages.
pub fn parse_cloud(text: &str, source: &str) -> Result<LabeledCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (m, k, c) = match fields.as_slice() {
        ["ptc", "v1", m, k, c] => {
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(1, format!("bad header count {s:?}")));
            (num(m)?, num(k)?, num(c)?)
        }
        _ => return Err(err(1, format!("expected `ptc v1 <m> <K_top> <C_true>`, got {header:?}"))),
    };
    let family = Family::from_counts(k, c)
        .ok_or_else(|| err(1, format!("no family schema has K_top = {k} and C_true = {c}")))?;
    let mut pts = Vec::with_capacity(m);
    let mut top = Vec::with_capacity(m);
    let mut mid = Vec::with_capacity(m);
    for row in 0..m {
        let line_no = row + 2;
        let line = lines
            .next()
            .ok_or_else(|| err(line_no, format!("missing point row {} of {m}", row + 1)))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(err(line_no, format!("expected 5 fields, got {}", f.len())));
        }
        let coord = |s: &str| match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(err(line_no, format!("invalid coordinate {s:?}"))),
        };
        let label = |s: &str, max: usize| match s.parse::<usize>() {
            Ok(v) if (1..=max).contains(&v) => Ok(v - 1),
            _ => Err(err(line_no, format!("label {s:?} outside [1, {max}]"))),
        };
        pts.push([coord(f[0])?, coord(f[1])?, coord(f[2])?]);
        top.push(label(f[3], k)?);
        mid.push(label(f[4], c)?);
    }
    if let Some((extra, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(m + 2 + extra, format!("more rows than the {m} declared in the header")));
    }
    let cloud = PointCloud::new(pts).map_err(|e| err(1, e.to_string()))?;
    LabeledCloud::new(cloud, top, mid, family).map_err(|e| err(1, e.to_string()))
}

/// Fixed colour cycle for exported labels.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Colour of label `c`.
pub fn palette_color(label: usize) -> [u8; 3] {
    PALETTE[label % PALETTE.len()]
}

/// ASCII PLY text of the cloud coloured by `labels`.
pub fn colored_ply(cloud: &PointCloud, labels: &[usize]) -> Result<String> {
    if labels.len() != cloud.len() {
        return Err(Error::Contract(format!("{} labels for {} points", labels.len(), cloud.len())));
    }
    let mut text = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    for (p, &l) in cloud.points().iter().zip(labels) {
        let [r, g, b] = palette_color(l);
        writeln!(text, "{} {} {} {r} {g} {b}", p[0], p[1], p[2]).expect("string write");
    }
    Ok(text)
}

pub fn export_colored(path: &Path, cloud: &PointCloud, labels: &[usize]) -> Result<()> {
    let text = colored_ply(cloud, labels)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub seed: u64,
    pub family: Family,
    pub num_train: usize,
    pub num_test: usize,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestRecord {
    Header(ManifestHeader),
    Entry(ManifestEntry),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(&ManifestRecord::Header(self.header.clone()))?;
        text.push('\n');
        for e in &self.entries {
            text.push_str(&serde_json::to_string(&ManifestRecord::Entry(e.clone()))?);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and validates a manifest: format tag, disjoint splits, and
    /// every referenced file present.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let source = path.display().to_string();
        let mut header = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: source.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            match record {
                ManifestRecord::Header(h) if header.is_none() && i == 0 => header = Some(h),
                ManifestRecord::Header(_) => {
                    return Err(Error::Parse {
                        path: source,
                        line: i + 1,
                        msg: "header record must come first and only once".into(),
                    })
                }
                ManifestRecord::Entry(e) => entries.push(e),
            }
        }
        let header = header.ok_or_else(|| Error::Parse {
            path: source.clone(),
            line: 1,
            msg: "missing header record".into(),
        })?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Incompatible(format!(
                "manifest format {:?}, expected {MANIFEST_FORMAT:?}",
                header.format
            )));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Manifest { header, entries, root };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::Contract(format!("{} is listed more than once", e.path)));
            }
            let p = self.root.join(&e.path);
            if !p.is_file() {
                return Err(Error::Contract(format!("manifest references missing file {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn paths(&self, split: Split) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| self.root.join(&e.path))
            .collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledCloud>> {
        self.paths(split).iter().map(|p| read_cloud(p)).collect()
    }
}

/// File name of the manifest inside a generated dataset directory.
pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Generates `num_train + num_test` objects into `dir` and writes the
/// manifest. Object `i` uses [`object_seed`]`(seed, i)`.
pub fn generate_dataset(
    dir: &Path,
    family: Family,
    seed: u64,
    num_train: usize,
    num_test: usize,
    points: usize,
) -> Result<Manifest> {
    for sub in ["train", "test"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(num_train + num_test);
    for i in 0..num_train + num_test {
        let split = if i < num_train { Split::Train } else { Split::Test };
        let rel = match split {
            Split::Train => format!("train/{i:05}.ptc"),
            Split::Test => format!("test/{i:05}.ptc"),
        };
        let obj = generate_object(family, object_seed(seed, i as u64), points)?;
        write_cloud(&dir.join(&rel), &obj)?;
        entries.push(ManifestEntry { path: rel, split });
    }
    let manifest = Manifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            seed,
            family,
            num_train,
            num_test,
            points,
        },
        entries,
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
