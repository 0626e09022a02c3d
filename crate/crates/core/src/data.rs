//! Point clouds: synthetic primitives, OFF meshes, normalization,
//! subsampling and the PCF1 binary format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::networks::Task;

pub const CUBE_HALF_EXTENT: f64 = 1.0;
pub const CYLINDER_RADIUS: f64 = 1.0;
pub const CYLINDER_HEIGHT: f64 = 2.0;
pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.35;
pub const DEFAULT_NOISE: f64 = 0.02;

const PCF_MAGIC: &[u8; 4] = b"PCF1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(u16),
    Parts(Vec<u16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// Row-major `N × 3`.
    pub points: Vec<f32>,
    pub label: Label,
    /// Shape category for part segmentation.
    pub category: Option<u16>,
}

impl PointCloud {
    pub fn new(points: Vec<f32>, label: Label) -> Result<Self> {
        if points.is_empty() || points.len() % 3 != 0 {
            return Err(Error::Input(format!("{} coordinates do not form points", points.len())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite coordinate".into()));
        }
        if let Label::Parts(p) = &label {
            if p.len() * 3 != points.len() {
                return Err(Error::Input(format!(
                    "{} part labels for {} points",
                    p.len(),
                    points.len() / 3
                )));
            }
        }
        Ok(Self {
            points,
            label,
            category: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f32; 3] {
        [self.points[i * 3], self.points[i * 3 + 1], self.points[i * 3 + 2]]
    }

    pub fn class(&self) -> Option<u16> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Parts(_) => None,
        }
    }

    pub fn parts(&self) -> Option<&[u16]> {
        match &self.label {
            Label::Parts(p) => Some(p),
            Label::Class(_) => None,
        }
    }

    /// Points in the order of `indices`, labels carried along.
    pub fn select(&self, indices: &[usize]) -> Self {
        let points = indices.iter().flat_map(|&i| self.point(i)).collect();
        let label = match &self.label {
            Label::Class(c) => Label::Class(*c),
            Label::Parts(p) => Label::Parts(indices.iter().map(|&i| p[i]).collect()),
        };
        Self {
            points,
            label,
            category: self.category,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Cylinder, ShapeKind::Torus];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }
}

/// Part labels of the segmentation benchmark.
pub mod parts {
    pub const CYLINDER_CAP: u16 = 0;
    pub const CYLINDER_BODY: u16 = 1;
    pub const SPHERE_UPPER: u16 = 2;
    pub const SPHERE_LOWER: u16 = 3;
    pub const COUNT: usize = 4;
}

/// Segmentation categories and their part labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartTable {
    pub categories: Vec<(String, Vec<u16>)>,
}

impl PartTable {
    pub fn synthetic() -> Self {
        Self {
            categories: vec![
                ("cylinder".into(), vec![parts::CYLINDER_CAP, parts::CYLINDER_BODY]),
                ("sphere".into(), vec![parts::SPHERE_UPPER, parts::SPHERE_LOWER]),
            ],
        }
    }

    pub fn part_count(&self) -> usize {
        self.categories
            .iter()
            .flat_map(|(_, p)| p.iter())
            .map(|&p| p as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn parts_of(&self, category: u16) -> Option<&[u16]> {
        self.categories.get(category as usize).map(|(_, p)| p.as_slice())
    }

    pub fn category_of_part(&self, part: u16) -> Option<u16> {
        self.categories
            .iter()
            .position(|(_, p)| p.contains(&part))
            .map(|c| c as u16)
    }
}

fn gaussian_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Uniform surface point of a primitive with its region label.
fn surface_point(kind: ShapeKind, rng: &mut impl Rng) -> ([f64; 3], u16) {
    match kind {
        ShapeKind::Sphere => {
            let p = gaussian_unit(rng);
            let part = if p[2] >= 0.0 { parts::SPHERE_UPPER } else { parts::SPHERE_LOWER };
            (p, part)
        }
        ShapeKind::Cube => {
            let h = CUBE_HALF_EXTENT;
            let face = rng.random_range(0..6usize);
            let (a, b) = (rng.random_range(-h..h), rng.random_range(-h..h));
            let sign = if face % 2 == 0 { h } else { -h };
            let p = match face / 2 {
                0 => [sign, a, b],
                1 => [a, sign, b],
                _ => [a, b, sign],
            };
            (p, 0)
        }
        ShapeKind::Cylinder => {
            let (r, h) = (CYLINDER_RADIUS, CYLINDER_HEIGHT);
            let cap_area = 2.0 * std::f64::consts::PI * r * r;
            let body_area = 2.0 * std::f64::consts::PI * r * h;
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            if rng.random_range(0.0..cap_area + body_area) < body_area {
                let z = rng.random_range(-h / 2.0..h / 2.0);
                ([r * t.cos(), r * t.sin(), z], parts::CYLINDER_BODY)
            } else {
                let rho = r * rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { h / 2.0 } else { -h / 2.0 };
                ([rho * t.cos(), rho * t.sin(), z], parts::CYLINDER_CAP)
            }
        }
        ShapeKind::Torus => {
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            loop {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                let ring = big + small * v.cos();
                if rng.random_range(0.0..big + small) < ring {
                    return ([ring * u.cos(), ring * u.sin(), small * v.sin()], 0);
                }
            }
        }
    }
}

/// Uniform surface samples of a primitive plus isotropic Gaussian jitter.
/// Cylinders are labelled cap/body and spheres upper/lower hemisphere.
pub fn synth_generate(kind: ShapeKind, n_points: usize, noise_sigma: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if n_points == 0 {
        return Err(Error::Parameter("n_points must be positive".into()));
    }
    let jitter = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::Parameter(format!("noise sigma {noise_sigma}: {e}")))?;
    let mut points = Vec::with_capacity(n_points * 3);
    let mut labels = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let (p, part) = surface_point(kind, rng);
        for v in p {
            let j = if noise_sigma > 0.0 { jitter.sample(rng) } else { 0.0 };
            points.push((v + j) as f32);
        }
        labels.push(part);
    }
    let label = match kind {
        ShapeKind::Sphere | ShapeKind::Cylinder => Label::Parts(labels),
        _ => Label::Class(0),
    };
    PointCloud::new(points, label)
}

/// Centers on the centroid and scales the largest norm to one.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in cloud.points.chunks_exact(3) {
        for a in 0..3 {
            centroid[a] += p[a] as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let centered: Vec<f64> = cloud
        .points
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |a| p[a] as f64 - centroid[a]))
        .collect();
    let max_norm = centered
        .chunks_exact(3)
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = if max_norm > 0.0 { 1.0 / max_norm } else { 1.0 };
    PointCloud {
        points: centered.iter().map(|&v| (v * scale) as f32).collect(),
        label: cloud.label.clone(),
        category: cloud.category,
    }
}

/// `m` distinct points drawn uniformly, in draw order.
pub fn subsample(cloud: &PointCloud, m: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Parameter(format!("cannot draw {m} of {n} points")));
    }
    let picked = index::sample(rng, n, m).into_vec();
    Ok(cloud.select(&picked))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffMesh {
    pub vertices: Vec<[f32; 3]>,
    /// Triangles; polygons are fanned from their first vertex.
    pub faces: Vec<[usize; 3]>,
}

pub fn parse_off(text: &str) -> Result<OffMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(hline, format!("expected OFF header, found {header:?}")))?
        .trim();
    let (cline, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| parse_err(hline + 1, "missing counts line".into()))?
    } else {
        (hline, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(cline, format!("bad counts {counts:?}: {e}")))?;
    if counts.len() < 2 {
        return Err(parse_err(cline, "counts line needs vertex and face counts".into()));
    }
    let (nv, nf) = (counts[0], counts[1]);
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(cline, format!("expected {nv} vertices, file ended")))?;
        let v: Vec<f32> = l
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(ln, format!("bad vertex: {e}")))?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(ln, "vertex needs three finite coordinates".into()));
        }
        vertices.push([v[0], v[1], v[2]]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(cline, format!("expected {nf} faces, file ended")))?;
        let idx: Vec<usize> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(ln, format!("bad face: {e}")))?;
        let (&count, rest) = idx
            .split_first()
            .ok_or_else(|| parse_err(ln, "empty face line".into()))?;
        if count < 3 || rest.len() < count {
            return Err(parse_err(ln, format!("face declares {count} vertices")));
        }
        if let Some(&bad) = rest[..count].iter().find(|&&i| i >= nv) {
            return Err(parse_err(ln, format!("vertex index {bad} out of range")));
        }
        for t in 1..count - 1 {
            faces.push([rest[0], rest[t], rest[t + 1]]);
        }
    }
    Ok(OffMesh { vertices, faces })
}

pub fn read_off_mesh(path: &Path) -> Result<OffMesh> {
    parse_off(&fs::read_to_string(path)?)
}

/// Vertices of an OFF file as a cloud labelled class 0.
pub fn load_off(path: &Path) -> Result<PointCloud> {
    let mesh = read_off_mesh(path)?;
    PointCloud::new(mesh.vertices.iter().flatten().copied().collect(), Label::Class(0))
}

pub fn write_off(path: &Path, mesh: &OffMesh) -> Result<()> {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        s.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    fs::write(path, s)?;
    Ok(())
}

fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let x = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Area-weighted surface sampling. `uniform` supplies draws in `[0, 1)`:
/// one to pick the face, two for the barycentric coordinates.
pub fn sample_mesh_with(
    vertices: &[[f32; 3]],
    faces: &[[usize; 3]],
    n: usize,
    mut uniform: impl FnMut() -> f64,
) -> Result<PointCloud> {
    let vert = |i: usize| -> Result<[f64; 3]> {
        vertices
            .get(i)
            .map(|v| [v[0] as f64, v[1] as f64, v[2] as f64])
            .ok_or_else(|| Error::Input(format!("face references vertex {i}")))
    };
    let mut cumulative = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for f in faces {
        total += triangle_area(vert(f[0])?, vert(f[1])?, vert(f[2])?);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Input("mesh has no surface area".into()));
    }
    let mut points = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let target = uniform() * total;
        let fi = cumulative.partition_point(|&c| c <= target).min(faces.len() - 1);
        let [a, b, c] = faces[fi].map(|i| vert(i).expect("checked above"));
        let (r1, r2) = (uniform().sqrt(), uniform());
        let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        for axis in 0..3 {
            points.push((wa * a[axis] + wb * b[axis] + wc * c[axis]) as f32);
        }
    }
    PointCloud::new(points, Label::Class(0))
}

pub fn sample_mesh(vertices: &[[f32; 3]], faces: &[[usize; 3]], n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    sample_mesh_with(vertices, faces, n, || rng.random::<f64>())
}

pub fn encode_pcf(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + cloud.points.len() * 4 + cloud.len() * 2);
    out.extend_from_slice(PCF_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    let mode: u32 = match cloud.label {
        Label::Class(_) => 0,
        Label::Parts(_) => 1,
    };
    out.extend_from_slice(&mode.to_le_bytes());
    for v in &cloud.points {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &cloud.label {
        Label::Class(c) => out.extend_from_slice(&c.to_le_bytes()),
        Label::Parts(p) => p.iter().for_each(|l| out.extend_from_slice(&l.to_le_bytes())),
    }
    out
}

pub fn decode_pcf(bytes: &[u8]) -> Result<PointCloud> {
    let bad = |msg: &str| Error::Input(format!("PCF1: {msg}"));
    if bytes.len() < 12 || &bytes[..4] != PCF_MAGIC {
        return Err(bad("missing magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"));
    let n = word(4) as usize;
    let mode = word(8);
    let labels = match mode {
        0 => 1,
        1 => n,
        other => return Err(bad(&format!("unknown label mode {other}"))),
    };
    let expected = 12 + n * 12 + labels * 2;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let points = bytes[12..12 + n * 12]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
        .collect();
    let raw: Vec<u16> = bytes[12 + n * 12..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let label = if mode == 0 { Label::Class(raw[0]) } else { Label::Parts(raw) };
    PointCloud::new(points, label)
}

pub fn write_pcf(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_pcf(cloud))?;
    Ok(())
}

pub fn read_pcf(path: &Path) -> Result<PointCloud> {
    decode_pcf(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: Task,
    pub split: Split,
    pub clouds: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub part_table: Option<PartTable>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Classes for classification, part labels for segmentation.
    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::Classification => self.class_names.len(),
            Task::Segmentation => self.part_table.as_ref().map_or(0, PartTable::part_count),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let limit = self.num_classes();
        for (i, c) in self.clouds.iter().enumerate() {
            let ok = match (&c.label, self.task) {
                (Label::Class(l), Task::Classification) => (*l as usize) < limit,
                (Label::Parts(p), Task::Segmentation) => {
                    let table = self.part_table.as_ref().expect("segmentation has a part table");
                    let allowed = c.category.and_then(|k| table.parts_of(k));
                    allowed.is_some_and(|a| p.iter().all(|l| a.contains(l)))
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Input(format!("cloud {i} has labels outside the dataset tables")));
            }
        }
        Ok(())
    }

    /// Writes `NNNNN.pcf` files into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, c) in self.clouds.iter().enumerate() {
            write_pcf(&dir.join(format!("{i:05}.pcf")), c)?;
        }
        Ok(())
    }

    /// Reads every `.pcf` file in `dir`, in file-name order. The task follows
    /// from the label mode.
    pub fn load_dir(dir: &Path, split: Split) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pcf"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Input(format!("no .pcf files in {}", dir.display())));
        }
        let mut clouds = paths.iter().map(|p| read_pcf(p)).collect::<Result<Vec<_>>>()?;
        let segmentation = matches!(clouds[0].label, Label::Parts(_));
        if clouds.iter().any(|c| matches!(c.label, Label::Parts(_)) != segmentation) {
            return Err(Error::Input("directory mixes label modes".into()));
        }
        let ds = if segmentation {
            let table = PartTable::synthetic();
            for c in &mut clouds {
                let first = c.parts().expect("segmentation labels")[0];
                c.category = table.category_of_part(first);
            }
            Dataset {
                task: Task::Segmentation,
                split,
                clouds,
                class_names: table.categories.iter().map(|(n, _)| n.clone()).collect(),
                part_table: Some(table),
            }
        } else {
            Dataset {
                task: Task::Classification,
                split,
                clouds,
                class_names: ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect(),
                part_table: None,
            }
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub task: Task,
    pub per_class: usize,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Normalized synthetic split. Shapes cycle through the classes; the split
/// selects an independent random stream.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let (kinds, table): (Vec<ShapeKind>, Option<PartTable>) = match spec.task {
        Task::Classification => (ShapeKind::ALL.to_vec(), None),
        Task::Segmentation => (vec![ShapeKind::Cylinder, ShapeKind::Sphere], Some(PartTable::synthetic())),
    };
    let mut clouds = Vec::with_capacity(spec.per_class * kinds.len());
    for _ in 0..spec.per_class {
        for (ci, &kind) in kinds.iter().enumerate() {
            let mut cloud = normalize_unit_sphere(&synth_generate(kind, spec.points, spec.noise, &mut rng)?);
            match spec.task {
                Task::Classification => cloud.label = Label::Class(ci as u16),
                Task::Segmentation => cloud.category = Some(ci as u16),
            }
            clouds.push(cloud);
        }
    }
    let class_names = kinds.iter().map(|k| k.name().to_string()).collect();
    let ds = Dataset {
        task: spec.task,
        split,
        clouds,
        class_names,
        part_table: table,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcf_round_trip() {
        let c = PointCloud::new(vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0], Label::Parts(vec![1, 3])).unwrap();
        let back = decode_pcf(&encode_pcf(&c)).unwrap();
        assert_eq!(back, c);
        let mut bytes = encode_pcf(&c);
        bytes.pop();
        assert!(decode_pcf(&bytes).is_err());
    }

    #[test]
    fn part_table_lookup() {
        let t = PartTable::synthetic();
        assert_eq!(t.part_count(), 4);
        assert_eq!(t.category_of_part(parts::SPHERE_LOWER), Some(1));
        assert_eq!(t.parts_of(0), Some(&[0u16, 1][..]));
    }

    #[test]
    fn off_header_with_inline_counts() {
        let m = parse_off("OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }
}
