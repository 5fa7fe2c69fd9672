//! Binary occupancy grids and the `VXG1` grid file format.

use crate::cloudio::{Point3, PointCloud};
use crate::tengine::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Cells per axis.
    pub resolution: usize,
    pub origin: Point3,
    /// Edge length of the cubic region covered by the grid.
    pub extent: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            origin: Point3::new(0.0, 0.0, 0.0),
            extent: 1.0,
        }
    }
}

impl GridSpec {
    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::InvalidConfig("grid resolution must be >= 1".into()));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) || !self.origin.is_finite() {
            return Err(Error::InvalidConfig("grid extent must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.resolution.pow(3)
    }

    /// Cell index along one axis, or `None` when `v` lies outside
    /// `[origin, origin + extent]`. The far boundary maps to the last cell.
    fn axis_index(&self, v: f64, origin: f64) -> Option<usize> {
        let rel = v - origin;
        if !(rel >= 0.0 && rel <= self.extent) {
            return None;
        }
        let i = (rel / self.extent * self.resolution as f64).floor() as usize;
        Some(i.min(self.resolution - 1))
    }

    /// `(i, j, k)` of the cell containing `p`.
    pub fn cell_of(&self, p: &Point3) -> Option<(usize, usize, usize)> {
        Some((
            self.axis_index(p.x, self.origin.x)?,
            self.axis_index(p.y, self.origin.y)?,
            self.axis_index(p.z, self.origin.z)?,
        ))
    }
}

/// Dense `resolution^3` occupancy volume, row-major with `k` (z) fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    spec: GridSpec,
    occupancy: Vec<u8>,
    occupied_count: usize,
    dropped: usize,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            occupancy: vec![0; spec.cells()],
            occupied_count: 0,
            dropped: 0,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn occupancy(&self) -> &[u8] {
        &self.occupancy
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied_count
    }

    /// Points discarded for lying outside the grid region.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let r = self.spec.resolution;
        (i * r + j) * r + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupancy[self.index(i, j, k)] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize) {
        let idx = self.index(i, j, k);
        if self.occupancy[idx] == 0 {
            self.occupancy[idx] = 1;
            self.occupied_count += 1;
        }
    }

    /// Number of cells where the two grids disagree.
    pub fn hamming(&self, other: &VoxelGrid) -> Result<usize> {
        if self.spec.resolution != other.spec.resolution {
            return Err(Error::Shape(format!(
                "grid resolutions differ: {} vs {}",
                self.spec.resolution, other.spec.resolution
            )));
        }
        Ok(self
            .occupancy
            .iter()
            .zip(&other.occupancy)
            .filter(|(a, b)| a != b)
            .count())
    }

    /// Writes the `VXG1` encoding: `"VXG1 D H W\n"` then one byte per cell.
    pub fn to_vxg1(&self) -> Vec<u8> {
        let r = self.spec.resolution;
        let mut out = format!("VXG1 {r} {r} {r}\n").into_bytes();
        out.extend_from_slice(&self.occupancy);
        out
    }

    /// Parses a `VXG1` file into a grid over the default unit region.
    pub fn from_vxg1(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::GridFormat("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::GridFormat("header is not ASCII".into()))?;
        let mut toks = header.split(' ');
        if toks.next() != Some("VXG1") {
            return Err(Error::GridFormat("missing VXG1 magic".into()));
        }
        let dims: Vec<usize> = toks
            .map(|t| t.parse().map_err(|_| Error::GridFormat(format!("bad dimension {t:?}"))))
            .collect::<Result<_>>()?;
        let [d, h, w] = dims[..] else {
            return Err(Error::GridFormat("expected three dimensions".into()));
        };
        if d != h || h != w || d == 0 {
            return Err(Error::GridFormat(format!("only non-empty cubic grids are supported, got {d}x{h}x{w}")));
        }
        let body = &bytes[nl + 1..];
        if body.len() != d * h * w {
            return Err(Error::GridFormat(format!(
                "expected {} cell bytes, found {}",
                d * h * w,
                body.len()
            )));
        }
        if let Some(bad) = body.iter().find(|&&b| b > 1) {
            return Err(Error::GridFormat(format!("cell byte {bad:#04x} is not 0 or 1")));
        }
        let mut grid = VoxelGrid::empty(GridSpec::with_resolution(d))?;
        grid.occupancy.copy_from_slice(body);
        grid.occupied_count = body.iter().filter(|&&b| b == 1).count();
        Ok(grid)
    }

    /// Reconstructs a grid by thresholding a `[1, D, H, W]` tensor at 0.5.
    pub fn from_tensor(tensor: &Tensor, spec: GridSpec) -> Result<Self> {
        let r = spec.resolution;
        if tensor.shape() != [1, r, r, r] {
            return Err(Error::Shape(format!(
                "expected [1,{r},{r},{r}], got {:?}",
                tensor.shape()
            )));
        }
        let mut grid = VoxelGrid::empty(spec)?;
        for (cell, &v) in grid.occupancy.iter_mut().zip(tensor.data()) {
            *cell = u8::from(v >= 0.5);
        }
        grid.occupied_count = grid.occupancy.iter().filter(|&&b| b == 1).count();
        Ok(grid)
    }
}

/// Marks every cell that contains at least one point.
pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> Result<VoxelGrid> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut grid = VoxelGrid::empty(*spec)?;
    for p in &cloud.points {
        match spec.cell_of(p) {
            Some((i, j, k)) => grid.set(i, j, k),
            None => grid.dropped += 1,
        }
    }
    if grid.occupied_count == 0 {
        return Err(Error::EmptyGrid {
            dropped: grid.dropped,
        });
    }
    Ok(grid)
}

/// `[1, D, H, W]` tensor of 0.0 / 1.0 values.
pub fn grid_to_tensor(grid: &VoxelGrid) -> Tensor {
    let r = grid.resolution();
    let data = grid.occupancy.iter().map(|&b| f64::from(b)).collect();
    Tensor::from_vec([1, r, r, r], data).expect("grid holds resolution^3 cells")
}
