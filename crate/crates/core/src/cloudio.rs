//! Point-cloud data model, ASCII readers/writers, normalization and
//! augmentation.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Margin kept between a normalized cloud's bounding box and the unit cube.
pub const NORMALIZE_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Presentation class of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    BonaFide,
    SiliconeMask,
    WrapPhoto,
}

/// The two-way decision the detector makes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryClass {
    BonaFide,
    Attack,
}

impl BinaryClass {
    /// Index of the class in the network's output row.
    pub fn index(self) -> usize {
        match self {
            BinaryClass::BonaFide => 0,
            BinaryClass::Attack => 1,
        }
    }
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::BonaFide,
        ClassLabel::SiliconeMask,
        ClassLabel::WrapPhoto,
    ];

    pub fn binary(self) -> BinaryClass {
        match self {
            ClassLabel::BonaFide => BinaryClass::BonaFide,
            ClassLabel::SiliconeMask | ClassLabel::WrapPhoto => BinaryClass::Attack,
        }
    }

    pub fn is_attack(self) -> bool {
        self.binary() == BinaryClass::Attack
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::BonaFide => "bona_fide",
            ClassLabel::SiliconeMask => "silicone_mask",
            ClassLabel::WrapPhoto => "wrap_photo",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bona_fide" | "bonafide" => Ok(ClassLabel::BonaFide),
            "silicone_mask" | "mask" => Ok(ClassLabel::SiliconeMask),
            "wrap_photo" | "wrap" => Ok(ClassLabel::WrapPhoto),
            other => Err(Error::InvalidConfig(format!("unknown class label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    /// Raw capture coordinates (meters).
    Capture,
    /// Unit-cube coordinates produced by [`normalize`].
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub label: ClassLabel,
    /// Subject or artifact series the cloud belongs to.
    pub identity: String,
    pub space: Space,
    /// File the cloud was read from, if any.
    pub source: Option<String>,
}

impl PointCloud {
    /// An unlabeled capture-space cloud.
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            label: ClassLabel::BonaFide,
            identity: String::new(),
            space: Space::Capture,
            source: None,
        }
    }

    pub fn with_label(mut self, label: ClassLabel, identity: impl Into<String>) -> Self {
        self.label = label;
        self.identity = identity.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn with_points(&self, points: Vec<Point3>, space: Space) -> Self {
        Self {
            points,
            label: self.label,
            identity: self.identity.clone(),
            space,
            source: self.source.clone(),
        }
    }
}

/// Augmentation recipe applied in point space before voxelization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub rotation_copies: usize,
    pub jitter_sigma: f64,
    pub mirror: bool,
    pub shift_max: f64,
    pub rng_seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_copies: 12,
            jitter_sigma: 0.005,
            mirror: true,
            shift_max: 0.02,
            rng_seed: 0,
        }
    }
}

impl AugmentSpec {
    /// A spec that returns the input unchanged.
    pub fn identity() -> Self {
        Self {
            rotation_copies: 1,
            jitter_sigma: 0.0,
            mirror: false,
            shift_max: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_copies == 0 {
            return Err(Error::InvalidConfig("rotation_copies must be >= 1".into()));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidConfig("jitter_sigma must be >= 0".into()));
        }
        if !(self.shift_max >= 0.0 && self.shift_max.is_finite()) {
            return Err(Error::InvalidConfig("shift_max must be >= 0".into()));
        }
        Ok(())
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_coord(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("non-numeric token {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

#[derive(Debug)]
enum PlyProperty {
    Scalar(String),
    List,
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

/// Reads an ASCII PLY file. Only the `vertex` element's `x`, `y`, `z`
/// properties are kept; every other property and element is skipped.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let text = match std::str::from_utf8(bytes) {
        Ok(t) => t,
        Err(_) => {
            let lossy = String::from_utf8_lossy(bytes);
            let binary = lossy
                .lines()
                .take_while(|l| l.trim() != "end_header")
                .position(|l| l.trim_start().starts_with("format binary"));
            return Err(match binary {
                Some(i) => parse_err(i + 1, "binary PLY is not supported; only ascii 1.0 is read"),
                None => parse_err(1, "input is not ASCII text"),
            });
        }
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing \"ply\" magic")),
    }

    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;
    for (n, line) in lines.by_ref() {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("format") => {
                let fmt = toks.next().unwrap_or("");
                if fmt != "ascii" {
                    return Err(parse_err(
                        n,
                        format!("unsupported PLY format {fmt:?}; only ascii 1.0 is read"),
                    ));
                }
                if toks.next() != Some("1.0") {
                    return Err(parse_err(n, "unsupported PLY version"));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = toks
                    .next()
                    .ok_or_else(|| parse_err(n, "element without a name"))?;
                let count = toks
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(n, "element without a valid count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(n, "property before any element"))?;
                let prop = match toks.next() {
                    Some("list") => PlyProperty::List,
                    Some(_ty) => PlyProperty::Scalar(
                        toks.next()
                            .ok_or_else(|| parse_err(n, "property without a name"))?
                            .to_string(),
                    ),
                    None => return Err(parse_err(n, "empty property declaration")),
                };
                el.props.push(prop);
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(parse_err(n, format!("unexpected header keyword {other:?}"))),
            None => return Err(parse_err(n, "blank line in header")),
        }
    }
    if !saw_format {
        return Err(parse_err(1, "missing format line"));
    }
    if !header_done {
        return Err(parse_err(text.lines().count(), "missing end_header"));
    }

    let vertex_idx = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(1, "no vertex element"))?;
    let vertex = &elements[vertex_idx];
    let find = |axis: &str| {
        vertex.props.iter().position(|p| matches!(p, PlyProperty::Scalar(name) if name == axis))
    };
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(1, "vertex element lacks x/y/z properties")),
    };

    let mut records = lines.filter(|(_, l)| !l.is_empty());
    let mut points = Vec::with_capacity(vertex.count);
    let mut last_line = text.lines().count();
    for (ei, el) in elements.iter().enumerate() {
        for rec in 0..el.count {
            let Some((n, line)) = records.next() else {
                return Err(parse_err(
                    last_line,
                    format!(
                        "{} count mismatch: declared {}, found {}",
                        el.name, el.count, rec
                    ),
                ));
            };
            last_line = n;
            if ei != vertex_idx {
                continue;
            }
            let mut values = [0.0f64; 3];
            let mut toks = line.split_whitespace();
            for (pi, prop) in el.props.iter().enumerate() {
                match prop {
                    PlyProperty::Scalar(_) => {
                        let tok = toks
                            .next()
                            .ok_or_else(|| parse_err(n, "too few values in vertex record"))?;
                        if pi == ix || pi == iy || pi == iz {
                            let v = parse_coord(tok, n)?;
                            let slot = if pi == ix { 0 } else if pi == iy { 1 } else { 2 };
                            values[slot] = v;
                        }
                    }
                    PlyProperty::List => {
                        let len: usize = toks
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| parse_err(n, "bad list length"))?;
                        for _ in 0..len {
                            toks.next().ok_or_else(|| parse_err(n, "truncated list"))?;
                        }
                    }
                }
            }
            points.push(Point3::new(values[0], values[1], values[2]));
        }
    }
    if let Some((n, _)) = records.next() {
        return Err(parse_err(
            n,
            "vertex count mismatch: more records than declared in the header",
        ));
    }
    Ok(PointCloud::new(points))
}

/// Reads whitespace-separated `x y z` lines. Blank lines and lines starting
/// with `#` are skipped; tokens after the third are ignored.
pub fn parse_xyz(bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|_| parse_err(1, "input is not ASCII text"))?;
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let mut coord = || -> Result<f64> {
            let tok = toks
                .next()
                .ok_or_else(|| parse_err(n, "expected three coordinates"))?;
            parse_coord(tok, n)
        };
        let (x, y, z) = (coord()?, coord()?, coord()?);
        points.push(Point3::new(x, y, z));
    }
    Ok(PointCloud::new(points))
}

/// Serializes a cloud as ASCII PLY. Coordinates are written with the
/// shortest representation that parses back to the same `f64`.
pub fn write_ply(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(64 + cloud.len() * 48);
    out.push_str("ply\nformat ascii 1.0\n");
    if !cloud.identity.is_empty() {
        let _ = writeln!(out, "comment class {} identity {}", cloud.label, cloud.identity);
    }
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

/// Sum that does not depend on the order of `values`.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Maps a capture-space cloud into the unit cube: centroid at
/// (0.5, 0.5, 0.5), isotropic scale so the bounding box lies within
/// `[0.05, 0.95]^3`.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    let mut buf = Vec::with_capacity(cloud.len());
    for (axis, c) in centroid.iter_mut().enumerate() {
        buf.clear();
        buf.extend(cloud.points.iter().map(|p| p.to_array()[axis]));
        *c = order_free_sum(&mut buf) / n;
    }

    let mut reach = 0.0f64;
    for p in &cloud.points {
        for (v, c) in p.to_array().iter().zip(centroid) {
            reach = reach.max((v - c).abs());
        }
    }
    if reach == 0.0 {
        return Err(Error::ZeroExtent);
    }
    let scale = (0.5 - NORMALIZE_MARGIN) / reach;
    let points = cloud
        .points
        .iter()
        .map(|p| {
            Point3::new(
                0.5 + (p.x - centroid[0]) * scale,
                0.5 + (p.y - centroid[1]) * scale,
                0.5 + (p.z - centroid[2]) * scale,
            )
        })
        .collect();
    Ok(cloud.with_points(points, Space::Normalized))
}

/// Produces `spec.rotation_copies` perturbed copies of a normalized cloud.
///
/// Copy `k` is rotated about the vertical axis through the cube center by
/// `k * 360 / rotation_copies` degrees, then jittered, optionally mirrored
/// across `x = 0.5`, shifted, and clipped back into the unit cube. The RNG
/// stream is consumed per copy in that order.
pub fn augment(cloud: &PointCloud, spec: &AugmentSpec) -> Result<Vec<PointCloud>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let jitter = Normal::new(0.0, spec.jitter_sigma)
        .map_err(|e| Error::InvalidConfig(format!("jitter_sigma: {e}")))?;

    let mut copies = Vec::with_capacity(spec.rotation_copies);
    for k in 0..spec.rotation_copies {
        let mut points = cloud.points.clone();
        if k > 0 {
            let angle = std::f64::consts::TAU * k as f64 / spec.rotation_copies as f64;
            let (sin, cos) = angle.sin_cos();
            for p in &mut points {
                let (dx, dy) = (p.x - 0.5, p.y - 0.5);
                p.x = 0.5 + cos * dx - sin * dy;
                p.y = 0.5 + sin * dx + cos * dy;
            }
        }

        let mirrored = spec.mirror && rng.random_bool(0.5);
        let shift = if spec.shift_max > 0.0 {
            let s = spec.shift_max;
            [
                rng.random_range(-s..=s),
                rng.random_range(-s..=s),
                rng.random_range(-s..=s),
            ]
        } else {
            [0.0; 3]
        };
        let jittered = spec.jitter_sigma > 0.0;
        let perturbed = jittered || mirrored || spec.shift_max > 0.0;

        if perturbed {
            for p in &mut points {
                if jittered {
                    p.x += jitter.sample(&mut rng);
                    p.y += jitter.sample(&mut rng);
                    p.z += jitter.sample(&mut rng);
                }
                if mirrored {
                    p.x = 1.0 - p.x;
                }
                p.x += shift[0];
                p.y += shift[1];
                p.z += shift[2];
            }
        }
        for p in &mut points {
            p.x = p.x.clamp(0.0, 1.0);
            p.y = p.y.clamp(0.0, 1.0);
            p.z = p.z.clamp(0.0, 1.0);
        }
        copies.push(cloud.with_points(points, Space::Normalized));
    }
    Ok(copies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.1..0.2),
                    rng.random_range(0.3..0.35),
                    rng.random_range(-2.0..-1.7),
                )
            })
            .collect();
        PointCloud::new(points)
    }

    #[test]
    fn ply_single_vertex() {
        let src = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        let c = parse_ply(src.as_bytes()).unwrap();
        assert_eq!(c.points, vec![Point3::new(0.0, 0.0, 0.0)]);
        assert_eq!(c.space, Space::Capture);
    }

    #[test]
    fn ply_extra_properties_and_faces_are_skipped() {
        let src = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\n\
                   property float nx\nproperty float x\nproperty float y\nproperty float z\nproperty float ny\nproperty float nz\n\
                   element face 1\nproperty list uchar int vertex_indices\nend_header\n\
                   9 1 2 3 9 9\n9 4 5 6 9 9\n9 7 8 9.5 9 9\n3 0 1 2\n";
        let c = parse_ply(src.as_bytes()).unwrap();
        assert_eq!(
            c.points,
            vec![
                Point3::new(1.0, 2.0, 3.0),
                Point3::new(4.0, 5.0, 6.0),
                Point3::new(7.0, 8.0, 9.5)
            ]
        );
    }

    #[test]
    fn ply_errors_name_lines() {
        let header = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        let short = format!("{header}0 0 0\n");
        match parse_ply(short.as_bytes()) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("count mismatch"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let long = format!("{header}0 0 0\n1 1 1\n2 2 2\n");
        match parse_ply(long.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 10);
                assert!(msg.contains("count mismatch"));
            }
            other => panic!("{other:?}"),
        }
        let nan = format!("{header}0 0 0\n1 nan 1\n");
        match parse_ply(nan.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_ply(b"plx\nformat ascii 1.0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn ply_binary_rejected() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        bytes.extend_from_slice(&[0x00, 0x00, 0x80, 0xff, 0xfe, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00]);
        match parse_ply(&bytes) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("binary"));
            }
            other => panic!("{other:?}"),
        }
        // Valid UTF-8 but still binary-declared.
        let ascii_payload = "ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        assert!(parse_ply(ascii_payload.as_bytes()).is_err());
    }

    #[test]
    fn ply_round_trip_is_exact() {
        let cloud = random_cloud(3, 500);
        let back = parse_ply(write_ply(&cloud).as_bytes()).unwrap();
        assert_eq!(back.points, cloud.points);
    }

    #[test]
    fn xyz_basic() {
        assert_eq!(parse_xyz(b"0 0 0\n1 1 1").unwrap().len(), 2);
        let c = parse_xyz(b"# comment\n0.5 -0.2 0.3").unwrap();
        assert_eq!(c.points, vec![Point3::new(0.5, -0.2, 0.3)]);
        match parse_xyz(b"0 0 0\n\n1 x 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn xyz_line_count_matches_independent_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut text = String::new();
        for i in 0..10_000 {
            match rng.random_range(0..10) {
                0 => text.push('\n'),
                1 => text.push_str("# note\n"),
                _ => {
                    let _ = writeln!(text, "{} {} {}", i, -(i as f64) * 0.5, 1e-3 * i as f64);
                }
            }
        }
        let expected = text
            .split('\n')
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .count();
        assert_eq!(parse_xyz(text.as_bytes()).unwrap().len(), expected);
    }

    #[test]
    fn normalize_cube_corners() {
        let mut pts = Vec::new();
        for &x in &[2.0, 5.0] {
            for &y in &[-1.0, 2.0] {
                for &z in &[10.0, 13.0] {
                    pts.push(Point3::new(x, y, z));
                }
            }
        }
        let n = normalize(&PointCloud::new(pts)).unwrap();
        assert_eq!(n.space, Space::Normalized);
        for p in &n.points {
            for v in p.to_array() {
                assert!(((v - 0.5).abs() - 0.45).abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn normalize_degenerate() {
        let c = PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0); 10]);
        assert!(matches!(normalize(&c), Err(Error::ZeroExtent)));
        assert!(matches!(normalize(&PointCloud::new(vec![])), Err(Error::EmptyCloud)));
    }

    #[test]
    fn normalize_random_cloud_bounds_and_centroid() {
        let n = normalize(&random_cloud(5, 200)).unwrap();
        let mut sum = [0.0; 3];
        for p in &n.points {
            for (axis, v) in p.to_array().into_iter().enumerate() {
                assert!((0.05 - 1e-9..=0.95 + 1e-9).contains(&v));
                sum[axis] += v;
            }
        }
        for s in sum {
            assert!((s / 200.0 - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn augment_identity_spec() {
        let c = normalize(&random_cloud(1, 50)).unwrap();
        let out = augment(&c, &AugmentSpec::identity()).unwrap();
        assert_eq!(out, vec![c]);
    }

    #[test]
    fn augment_quarter_turns() {
        let c = PointCloud {
            space: Space::Normalized,
            ..PointCloud::new(vec![Point3::new(0.9, 0.5, 0.5)])
        };
        let spec = AugmentSpec {
            rotation_copies: 4,
            ..AugmentSpec::identity()
        };
        let out = augment(&c, &spec).unwrap();
        let expected = [(0.9, 0.5), (0.5, 0.9), (0.1, 0.5), (0.5, 0.1)];
        for (copy, (x, y)) in out.iter().zip(expected) {
            let p = copy.points[0];
            assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12 && p.z == 0.5, "{p:?}");
        }
    }

    #[test]
    fn augment_is_seed_deterministic() {
        let c = normalize(&random_cloud(2, 300)).unwrap();
        let spec = AugmentSpec {
            rng_seed: 99,
            ..AugmentSpec::default()
        };
        let a = augment(&c, &spec).unwrap();
        let b = augment(&c, &spec).unwrap();
        let bits = |v: &[PointCloud]| -> Vec<u64> {
            v.iter()
                .flat_map(|c| c.points.iter().flat_map(|p| p.to_array().map(f64::to_bits)))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.len(), 12);
        for copy in &a {
            assert_eq!(copy.len(), c.len());
            assert!(copy.points.iter().all(|p| p
                .to_array()
                .iter()
                .all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn augment_rejects_bad_spec() {
        let c = normalize(&random_cloud(2, 10)).unwrap();
        let spec = AugmentSpec {
            rotation_copies: 0,
            ..AugmentSpec::identity()
        };
        assert!(augment(&c, &spec).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn normalize_commutes_with_permutation(seed in any::<u64>(), n in 2usize..200) {
            let c = random_cloud(seed, n);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
            let shuffled = PointCloud::new(perm.iter().map(|&i| c.points[i]).collect());
            let a = normalize(&shuffled).unwrap();
            let b = normalize(&c).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a.points[k], b.points[i]);
            }
        }

        #[test]
        fn normalize_is_idempotent(seed in any::<u64>(), n in 2usize..200) {
            let once = normalize(&random_cloud(seed, n)).unwrap();
            let twice = normalize(&once).unwrap();
            for (p, q) in once.points.iter().zip(&twice.points) {
                prop_assert!(p.distance(q) < 1e-9);
            }
        }

        #[test]
        fn rotation_copies_are_rigid(seed in any::<u64>(), copies in 1usize..16) {
            let c = normalize(&random_cloud(seed, 40)).unwrap();
            // Shrink towards the center so rotations never reach the clip planes.
            let inner = PointCloud {
                points: c.points.iter().map(|p| Point3::new(0.5 + (p.x - 0.5) * 0.7, 0.5 + (p.y - 0.5) * 0.7, p.z)).collect(),
                ..c.clone()
            };
            let spec = AugmentSpec { rotation_copies: copies, ..AugmentSpec::identity() };
            for copy in augment(&inner, &spec).unwrap() {
                prop_assert_eq!(copy.len(), inner.len());
                for i in 0..inner.len() {
                    for j in (i + 1)..inner.len() {
                        let d0 = inner.points[i].distance(&inner.points[j]);
                        let d1 = copy.points[i].distance(&copy.points[j]);
                        prop_assert!((d0 - d1).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
