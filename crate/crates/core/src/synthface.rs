//! Synthetic face-like point clouds for the three presentation classes.
//!
//! Geometry is in metres. The face looks toward `-y`, `z` points up and `x`
//! spans the width of the head.
//!
//! * Bona fide: half-ellipsoid head, Gaussian nose and fine surface relief.
//! * Silicone mask: the same head with the relief damped and the nose blurred.
//! * Wrap photo: a cylindrically bent sheet cut to the head silhouette, with
//!   no nose and no relief.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloudio::{self, ClassLabel, Point3, PointCloud, Space};
use crate::{derive_seed, Error, Result};

pub const MANIFEST_HEADER: &str = "path,class,identity,session";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Silhouette radius, as a fraction of the head radii, that is sampled.
const SILHOUETTE: f64 = 0.95;
const DETAIL_TERMS: usize = 6;
const MASK_DETAIL_FACTOR: f64 = 0.2;
const MASK_NOSE_WIDTH_FACTOR: f64 = 1.3;
const MASK_NOSE_HEIGHT_FACTOR: f64 = 0.85;
/// Maximum head yaw between sessions, in degrees.
const SESSION_YAW_DEG: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub identity_id: String,
    /// Half-widths along x, y (depth) and z (height).
    pub head_radii: [f64; 3],
    pub nose_height: f64,
    pub nose_width: f64,
    pub surface_detail_amp: f64,
    /// Radius of the bent sheet used for wrap photos, relative to the head width.
    pub wrap_bend: f64,
    pub rng_seed: u64,
}

impl IdentityParams {
    /// Draws plausible head proportions from `seed`.
    pub fn random(identity_id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            identity_id: identity_id.into(),
            head_radii: [
                rng.random_range(0.070..0.080),
                rng.random_range(0.055..0.065),
                rng.random_range(0.095..0.110),
            ],
            nose_height: rng.random_range(0.020..0.028),
            nose_width: rng.random_range(0.011..0.015),
            surface_detail_amp: rng.random_range(0.008..0.012),
            wrap_bend: rng.random_range(1.3..1.8),
            rng_seed: rng.next_u64(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.head_radii.iter().all(|r| *r > 0.0 && r.is_finite())
            && self.nose_height > 0.0
            && self.nose_width > 0.0
            && self.wrap_bend >= 1.0;
        if !positive || self.surface_detail_amp.is_nan() || self.surface_detail_amp < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "identity {} has invalid geometry parameters",
                self.identity_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub class: ClassLabel,
    pub points_per_cloud: usize,
    pub sessions: usize,
    /// Standard deviation of isotropic sensor noise, in metres.
    pub noise_sigma: f64,
}

impl SynthSpec {
    pub fn new(class: ClassLabel) -> Self {
        Self {
            class,
            points_per_cloud: 5000,
            sessions: 10,
            noise_sigma: 0.0005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_cloud < 100 {
            return Err(Error::InvalidConfig(format!(
                "points_per_cloud must be >= 100, got {}",
                self.points_per_cloud
            )));
        }
        if self.sessions == 0 {
            return Err(Error::InvalidConfig("sessions must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Sum of plane waves with per-identity directions, wavelengths and phases.
struct Relief {
    terms: Vec<(f64, f64, f64)>,
}

impl Relief {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let terms = (0..DETAIL_TERMS)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..PI);
                let k = TAU / rng.random_range(0.025..0.05);
                (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..TAU))
            })
            .collect();
        Self { terms }
    }

    fn at(&self, x: f64, z: f64) -> f64 {
        let s: f64 = self
            .terms
            .iter()
            .map(|&(kx, kz, phase)| (kx * x + kz * z + phase).sin())
            .sum();
        s / (self.terms.len() as f64).sqrt()
    }
}

/// Depth of the head surface at `(x, z)`, before detail and noise.
fn head_depth(p: &IdentityParams, x: f64, z: f64, nose_h: f64, nose_w: f64) -> f64 {
    let [rx, ry, rz] = p.head_radii;
    let r2 = (x / rx).powi(2) + (z / rz).powi(2);
    let shell = -ry * (1.0 - r2).max(0.0).sqrt();
    // The nose is elongated vertically and centred slightly below mid-face.
    let nz = -0.1 * rz;
    let bump = nose_h * (-(x * x) / (2.0 * nose_w * nose_w) - (z - nz).powi(2) / (2.0 * (2.0 * nose_w).powi(2))).exp();
    shell - bump
}

/// Samples one capture of `identity` as `spec.class`.
pub fn generate_cloud(identity: &IdentityParams, spec: &SynthSpec, session_seed: u64) -> Result<PointCloud> {
    identity.validate()?;
    spec.validate()?;
    let [rx, _, rz] = identity.head_radii;
    let relief = Relief::new(identity.rng_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed);
    let yaw = rng.random_range(-SESSION_YAW_DEG..=SESSION_YAW_DEG).to_radians();
    let (sy, cy) = yaw.sin_cos();
    let offset = Point3::new(
        rng.random_range(-0.01..0.01),
        0.5 + rng.random_range(-0.02..0.02),
        rng.random_range(-0.01..0.01),
    );
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let bend = identity.wrap_bend * rx;

    let mut points = Vec::with_capacity(spec.points_per_cloud);
    while points.len() < spec.points_per_cloud {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        if u * u + v * v > SILHOUETTE * SILHOUETTE {
            continue;
        }
        let (x, z) = (u * rx, v * rz);
        let y = match spec.class {
            ClassLabel::BonaFide => {
                head_depth(identity, x, z, identity.nose_height, identity.nose_width)
                    - identity.surface_detail_amp * relief.at(x, z)
            }
            ClassLabel::SiliconeMask => {
                head_depth(
                    identity,
                    x,
                    z,
                    identity.nose_height * MASK_NOSE_HEIGHT_FACTOR,
                    identity.nose_width * MASK_NOSE_WIDTH_FACTOR,
                ) - MASK_DETAIL_FACTOR * identity.surface_detail_amp * relief.at(x, z)
            }
            ClassLabel::WrapPhoto => -(bend * bend - x * x).sqrt(),
        };
        let (x, y) = (cy * x - sy * y, sy * x + cy * y);
        let mut p = Point3::new(x + offset.x, y + offset.y, z + offset.z);
        if spec.noise_sigma > 0.0 {
            p.x += noise.sample(&mut rng);
            p.y += noise.sample(&mut rng);
            p.z += noise.sample(&mut rng);
        }
        points.push(p);
    }
    Ok(PointCloud {
        points,
        label: spec.class,
        identity: identity.identity_id.clone(),
        space: Space::Capture,
        source: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub bona_fide_identities: usize,
    pub mask_identities: usize,
    pub wrap_identities: usize,
    pub sessions: usize,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            bona_fide_identities: 12,
            mask_identities: 4,
            wrap_identities: 8,
            sessions: 10,
            points_per_cloud: 5000,
            noise_sigma: 0.0005,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn synth_spec(&self, class: ClassLabel) -> SynthSpec {
        SynthSpec {
            class,
            points_per_cloud: self.points_per_cloud,
            sessions: self.sessions,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn identities(&self, class: ClassLabel) -> usize {
        match class {
            ClassLabel::BonaFide => self.bona_fide_identities,
            ClassLabel::SiliconeMask => self.mask_identities,
            ClassLabel::WrapPhoto => self.wrap_identities,
        }
    }

    pub fn total_clouds(&self) -> usize {
        (self.bona_fide_identities + self.mask_identities + self.wrap_identities) * self.sessions
    }
}

fn identity_prefix(class: ClassLabel) -> &'static str {
    match class {
        ClassLabel::BonaFide => "bf",
        ClassLabel::SiliconeMask => "sm",
        ClassLabel::WrapPhoto => "wp",
    }
}

fn class_tag(class: ClassLabel) -> u64 {
    match class {
        ClassLabel::BonaFide => 1,
        ClassLabel::SiliconeMask => 2,
        ClassLabel::WrapPhoto => 3,
    }
}

/// Parameters of the `index`-th identity of `class` under `master_seed`.
pub fn identity_params(class: ClassLabel, index: usize, master_seed: u64) -> IdentityParams {
    let class_seed = derive_seed(master_seed, class_tag(class));
    let id = format!("{}{index:02}", identity_prefix(class));
    IdentityParams::random(id, derive_seed(class_seed, index as u64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCloud {
    pub cloud: PointCloud,
    pub session: usize,
}

impl GeneratedCloud {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{:02}.ply", self.cloud.label, self.cloud.identity, self.session)
    }
}

/// Every session of every identity, ordered by class, identity, session.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<GeneratedCloud>> {
    let mut out = Vec::with_capacity(spec.total_clouds());
    for class in ClassLabel::ALL {
        let synth = spec.synth_spec(class);
        synth.validate()?;
        for index in 0..spec.identities(class) {
            let params = identity_params(class, index, spec.seed);
            for session in 0..spec.sessions {
                let seed = derive_seed(params.rng_seed, 1000 + session as u64);
                let cloud = generate_cloud(&params, &synth, seed)?;
                let mut g = GeneratedCloud { cloud, session };
                g.cloud.source = Some(g.file_name());
                out.push(g);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub class: ClassLabel,
    pub identity: String,
    pub session: usize,
}

pub fn manifest_csv(entries: &[ManifestEntry]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        let _ = writeln!(out, "{},{},{},{}", e.path.display(), e.class, e.identity, e.session);
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected manifest header {MANIFEST_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [path, class, identity, session] = fields[..] else {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        };
        out.push(ManifestEntry {
            path: PathBuf::from(path),
            class: class.parse().map_err(|_| err(format!("unknown class {class:?}")))?,
            identity: identity.to_string(),
            session: session.parse().map_err(|_| err(format!("bad session {session:?}")))?,
        });
    }
    Ok(out)
}

/// Writes one PLY per cloud plus `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, clouds: &[GeneratedCloud]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(clouds.len());
    for g in clouds {
        let name = g.file_name();
        fs::write(dir.join(&name), cloudio::write_ply(&g.cloud))?;
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            class: g.cloud.label,
            identity: g.cloud.identity.clone(),
            session: g.session,
        });
    }
    fs::write(dir.join(MANIFEST_FILE), manifest_csv(&entries))?;
    Ok(entries)
}

/// Reads a manifest and every cloud it lists, tagging each with its entry.
pub fn load_manifest(manifest: &Path) -> Result<Vec<PointCloud>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(manifest)?;
    parse_manifest(&text)?
        .into_iter()
        .map(|e| {
            let path = base.join(&e.path);
            let bytes = fs::read(&path).map_err(|err| {
                Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}", path.display())))
            })?;
            let cloud = match path.extension().and_then(|s| s.to_str()) {
                Some("xyz") => cloudio::parse_xyz(&bytes)?,
                _ => cloudio::parse_ply(&bytes)?,
            };
            let mut cloud = cloud.with_label(e.class, e.identity);
            cloud.source = Some(e.path.display().to_string());
            Ok(cloud)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudio::normalize;
    use crate::voxel::{voxelize, GridSpec, VoxelGrid};

    fn params() -> IdentityParams {
        identity_params(ClassLabel::BonaFide, 0, 11)
    }

    fn grid(c: &PointCloud, r: usize) -> VoxelGrid {
        voxelize(&normalize(c).unwrap(), &GridSpec::with_resolution(r)).unwrap()
    }

    #[test]
    fn deterministic_without_noise() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            ..SynthSpec::new(ClassLabel::BonaFide)
        };
        let a = generate_cloud(&params(), &spec, 5).unwrap();
        let b = generate_cloud(&params(), &spec, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5000);
        assert_ne!(a, generate_cloud(&params(), &spec, 6).unwrap());
    }

    #[test]
    fn rejects_small_clouds() {
        let spec = SynthSpec {
            points_per_cloud: 99,
            ..SynthSpec::new(ClassLabel::BonaFide)
        };
        assert!(generate_cloud(&params(), &spec, 0).is_err());
    }

    /// Least-squares circle through the `(x, y)` projection; returns the
    /// largest radial residual.
    fn cylinder_residual(points: &[Point3]) -> f64 {
        // x² + y² + D x + E y + F = 0 via the 3x3 normal equations.
        let mut a = [[0.0f64; 4]; 3];
        for p in points {
            let row = [p.x, p.y, 1.0];
            let rhs = -(p.x * p.x + p.y * p.y);
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] += row[i] * row[j];
                }
                a[i][3] += row[i] * rhs;
            }
        }
        for col in 0..3 {
            let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, pivot);
            for r in 0..3 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    let pivot_row = a[col];
                    for (x, p) in a[r].iter_mut().zip(pivot_row).skip(col) {
                        *x -= f * p;
                    }
                }
            }
        }
        let (d, e, f) = (a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]);
        let (cx, cy) = (-d / 2.0, -e / 2.0);
        let r = (cx * cx + cy * cy - f).sqrt();
        points
            .iter()
            .map(|p| ((p.x - cx).hypot(p.y - cy) - r).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn wrap_is_a_bent_sheet() {
        let p = params();
        let wrap = generate_cloud(&p, &SynthSpec::new(ClassLabel::WrapPhoto), 3).unwrap();
        let residual = cylinder_residual(&wrap.points);
        assert!(residual < p.nose_height / 4.0, "residual {residual}");
        let bona = generate_cloud(&p, &SynthSpec::new(ClassLabel::BonaFide), 3).unwrap();
        assert!(cylinder_residual(&bona.points) > p.nose_height / 4.0);
    }

    #[test]
    fn bona_fide_and_wrap_grids_differ() {
        let p = params();
        let bona = grid(&generate_cloud(&p, &SynthSpec::new(ClassLabel::BonaFide), 1).unwrap(), 64);
        let wrap = grid(&generate_cloud(&p, &SynthSpec::new(ClassLabel::WrapPhoto), 1).unwrap(), 64);
        let diff = bona.hamming(&wrap).unwrap() as f64;
        let occupied = bona.occupied_count().max(wrap.occupied_count()) as f64;
        assert!(diff / occupied >= 0.05, "{diff} / {occupied}");
    }

    #[test]
    fn mask_keeps_shape_but_loses_detail() {
        let p = params();
        let spec = |c| SynthSpec {
            noise_sigma: 0.0,
            ..SynthSpec::new(c)
        };
        let bona = generate_cloud(&p, &spec(ClassLabel::BonaFide), 8).unwrap();
        let mask = generate_cloud(&p, &spec(ClassLabel::SiliconeMask), 8).unwrap();
        // Same sampling seed, so points pair up and differ only in depth.
        let mut max_gap: f64 = 0.0;
        for (a, b) in bona.points.iter().zip(&mask.points) {
            assert!((a.z - b.z).abs() < 1e-12);
            max_gap = max_gap.max(a.distance(b));
        }
        assert!(max_gap > 0.5 * p.surface_detail_amp);
        assert!(max_gap < 3.0 * p.surface_detail_amp + p.nose_height);
    }

    #[test]
    fn default_dataset_shape() {
        let spec = DatasetSpec {
            points_per_cloud: 100,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        assert_eq!(data.len(), 240);
        let count = |c| data.iter().filter(|g| g.cloud.label == c).count();
        assert_eq!(count(ClassLabel::BonaFide), 120);
        assert_eq!(count(ClassLabel::SiliconeMask), 40);
        assert_eq!(count(ClassLabel::WrapPhoto), 80);
        for g in &data {
            let prefix = identity_prefix(g.cloud.label);
            assert!(g.cloud.identity.starts_with(prefix));
            assert!(normalize(&g.cloud).is_ok());
        }
        assert_eq!(data[0].file_name(), "bona_fide_bf00_00.ply");
        assert_eq!(data, generate_dataset(&spec).unwrap());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            bona_fide_identities: 2,
            mask_identities: 1,
            wrap_identities: 1,
            sessions: 2,
            points_per_cloud: 120,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let entries = write_dataset(dir.path(), &data).unwrap();
        assert_eq!(entries.len(), 8);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.starts_with("path,class,identity,session\nbona_fide_bf00_00.ply,bona_fide,bf00,0\n"));
        assert_eq!(parse_manifest(&text).unwrap(), entries);
        let loaded = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        for (l, g) in loaded.iter().zip(&data) {
            assert_eq!((l.label, &l.identity), (g.cloud.label, &g.cloud.identity));
            assert_eq!(l.points, g.cloud.points);
        }
        assert!(parse_manifest("path,class\n").is_err());
        assert!(parse_manifest("path,class,identity,session\na.ply,dog,x,0\n").is_err());
    }

    #[test]
    fn classes_are_separable_in_voxel_space() {
        let spec = DatasetSpec {
            bona_fide_identities: 3,
            mask_identities: 0,
            wrap_identities: 0,
            sessions: 3,
            ..DatasetSpec::default()
        };
        let mut cross = Vec::new();
        let mut within = Vec::new();
        for index in 0..spec.bona_fide_identities {
            let p = identity_params(ClassLabel::BonaFide, index, spec.seed);
            let grids = |c| -> Vec<VoxelGrid> {
                (0..spec.sessions)
                    .map(|s| grid(&generate_cloud(&p, &spec.synth_spec(c), derive_seed(p.rng_seed, s as u64)).unwrap(), 32))
                    .collect()
            };
            let bona = grids(ClassLabel::BonaFide);
            let wrap = grids(ClassLabel::WrapPhoto);
            for i in 0..bona.len() {
                cross.push(bona[i].hamming(&wrap[i]).unwrap() as f64);
                for j in i + 1..bona.len() {
                    within.push(bona[i].hamming(&bona[j]).unwrap() as f64);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&cross) > mean(&within), "cross {} within {}", mean(&cross), mean(&within));
    }
}
