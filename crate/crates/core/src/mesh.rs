//! Cell-centered finite-volume meshes and boundary data.
//!
//! A [`Mesh`] only stores face lists, so structured and unstructured
//! discretizations share the same residual assembly.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcKind {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    West,
    East,
    South,
    North,
}

/// Face shared by two cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteriorFace<T> {
    pub cells: [usize; 2],
    /// Face length divided by the distance between the two cell centers.
    pub transmissibility: T,
}

/// Face on the domain boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFace<T> {
    pub cell: usize,
    pub length: T,
    /// Distance from the owning cell center to the face.
    pub distance: T,
    pub kind: BcKind,
    pub side: Side,
    /// Position of this face among the faces of the same kind; indexes
    /// [`BoundaryConditions`] value arrays.
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh<T> {
    pub cell_centers: Vec<[T; 2]>,
    pub cell_areas: Vec<T>,
    pub interior_faces: Vec<InteriorFace<T>>,
    pub boundary_faces: Vec<BoundaryFace<T>>,
}

/// Which condition applies on each side of a rectangular domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideKinds {
    pub west: BcKind,
    pub east: BcKind,
    pub south: BcKind,
    pub north: BcKind,
}

impl Default for SideKinds {
    fn default() -> Self {
        Self {
            west: BcKind::Dirichlet,
            east: BcKind::Dirichlet,
            south: BcKind::Neumann,
            north: BcKind::Neumann,
        }
    }
}

impl SideKinds {
    pub fn uniform(kind: BcKind) -> Self {
        Self {
            west: kind,
            east: kind,
            south: kind,
            north: kind,
        }
    }

    fn get(&self, side: Side) -> BcKind {
        match side {
            Side::West => self.west,
            Side::East => self.east,
            Side::South => self.south,
            Side::North => self.north,
        }
    }
}

/// One boundary value per side: prescribed head on Dirichlet sides, normal
/// flux on Neumann sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideValues<T> {
    pub west: T,
    pub east: T,
    pub south: T,
    pub north: T,
}

impl<T: Copy> SideValues<T> {
    fn get(&self, side: Side) -> T {
        match side {
            Side::West => self.west,
            Side::East => self.east,
            Side::South => self.south,
            Side::North => self.north,
        }
    }
}

/// Prescribed boundary data, one value per tagged face in slot order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions<T> {
    pub dirichlet_values: Vec<T>,
    pub neumann_fluxes: Vec<T>,
}

impl<T: Real> BoundaryConditions<T> {
    pub fn from_side_values(mesh: &Mesh<T>, values: &SideValues<T>) -> Self {
        let mut dirichlet_values = vec![T::zero(); mesh.n_dirichlet()];
        let mut neumann_fluxes = vec![T::zero(); mesh.n_neumann()];
        for face in &mesh.boundary_faces {
            let v = values.get(face.side);
            match face.kind {
                BcKind::Dirichlet => dirichlet_values[face.slot] = v,
                BcKind::Neumann => neumann_fluxes[face.slot] = v,
            }
        }
        Self {
            dirichlet_values,
            neumann_fluxes,
        }
    }

    pub fn validate(&self, mesh: &Mesh<T>) -> Result<()> {
        if self.dirichlet_values.len() != mesh.n_dirichlet() {
            return Err(Error::DimensionMismatch {
                what: "dirichlet values",
                expected: mesh.n_dirichlet(),
                actual: self.dirichlet_values.len(),
            });
        }
        if self.neumann_fluxes.len() != mesh.n_neumann() {
            return Err(Error::DimensionMismatch {
                what: "neumann fluxes",
                expected: mesh.n_neumann(),
                actual: self.neumann_fluxes.len(),
            });
        }
        if self
            .dirichlet_values
            .iter()
            .chain(&self.neumann_fluxes)
            .any(|v| !v.is_finite_value())
        {
            return Err(Error::NonFinite("boundary conditions"));
        }
        Ok(())
    }
}

impl<T: Real> Mesh<T> {
    /// Assembles a mesh from face lists, checking the structural invariants.
    pub fn new(
        cell_centers: Vec<[T; 2]>,
        cell_areas: Vec<T>,
        interior_faces: Vec<InteriorFace<T>>,
        boundary_faces: Vec<BoundaryFace<T>>,
    ) -> Result<Self> {
        let mesh = Self {
            cell_centers,
            cell_areas,
            interior_faces,
            boundary_faces,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_cells();
        if n == 0 {
            return Err(Error::invalid("mesh has no cells"));
        }
        if self.cell_areas.len() != n {
            return Err(Error::DimensionMismatch {
                what: "cell areas",
                expected: n,
                actual: self.cell_areas.len(),
            });
        }
        let mut touched = vec![false; n];
        for f in &self.interior_faces {
            let [i, j] = f.cells;
            if i >= n || j >= n || i == j {
                return Err(Error::invalid(format!("bad interior face {i}-{j}")));
            }
            if !(f.transmissibility > T::zero()) {
                return Err(Error::invalid(format!(
                    "non-positive transmissibility on face {i}-{j}"
                )));
            }
            touched[i] = true;
            touched[j] = true;
        }
        let (mut nd, mut nn) = (0usize, 0usize);
        for f in &self.boundary_faces {
            if f.cell >= n {
                return Err(Error::invalid(format!("boundary face on missing cell {}", f.cell)));
            }
            if !(f.length > T::zero() && f.distance > T::zero()) {
                return Err(Error::invalid("boundary face with non-positive geometry"));
            }
            let counter = match f.kind {
                BcKind::Dirichlet => &mut nd,
                BcKind::Neumann => &mut nn,
            };
            if f.slot != *counter {
                return Err(Error::invalid("boundary slots must be consecutive per kind"));
            }
            *counter += 1;
            touched[f.cell] = true;
        }
        if let Some(orphan) = touched.iter().position(|t| !t) {
            return Err(Error::invalid(format!("cell {orphan} has no faces")));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.cell_centers.len()
    }

    pub fn n_dirichlet(&self) -> usize {
        self.boundary_faces
            .iter()
            .filter(|f| f.kind == BcKind::Dirichlet)
            .count()
    }

    pub fn n_neumann(&self) -> usize {
        self.boundary_faces
            .iter()
            .filter(|f| f.kind == BcKind::Neumann)
            .count()
    }

    /// Face-adjacent neighbors of every cell, in face order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_cells()];
        for f in &self.interior_faces {
            let [i, j] = f.cells;
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Smallest distance between adjacent cell centers.
    pub fn min_spacing(&self) -> T {
        self.interior_faces
            .iter()
            .map(|f| {
                let [i, j] = f.cells;
                distance(&self.cell_centers[i], &self.cell_centers[j])
            })
            .fold(T::max_value().unwrap(), |a, b| a.min(b))
    }

    /// Diagonal of the bounding box of the cell centers and boundary faces.
    pub fn extent_diagonal(&self) -> T {
        let mut lo = [T::max_value().unwrap(); 2];
        let mut hi = [T::min_value().unwrap(); 2];
        for c in &self.cell_centers {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        // Pad by half a cell so a single row of cells still has an extent.
        let pad = self
            .boundary_faces
            .iter()
            .map(|f| f.distance)
            .fold(T::zero(), |a, b| a.max(b));
        let dx = hi[0] - lo[0] + pad * T::lit(2.0);
        let dy = hi[1] - lo[1] + pad * T::lit(2.0);
        (dx * dx + dy * dy).sqrt()
    }

    /// Checks that a field has one finite value per cell.
    pub fn check_field(&self, field: &DVector<T>, what: &'static str) -> Result<()> {
        if field.len() != self.n_cells() {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.n_cells(),
                actual: field.len(),
            });
        }
        if field.iter().any(|v| !v.is_finite_value()) {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }
}

pub fn distance<T: Real>(a: &[T; 2], b: &[T; 2]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Parameters of a uniform rectangular grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuredMeshSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    #[serde(default)]
    pub sides: SideKinds,
}

/// Uniform `nx × ny` quadrilateral grid on `[0, lx] × [0, ly]`.
///
/// Cells are numbered row-major with `x` varying fastest, so the system
/// matrix has bandwidth `nx`.
pub fn build_structured_mesh<T: Real>(
    nx: usize,
    ny: usize,
    lx: T,
    ly: T,
    sides: SideKinds,
) -> Result<Mesh<T>> {
    if nx < 1 || ny < 1 || nx * ny < 2 {
        return Err(Error::invalid(format!("grid {nx}x{ny} is too small")));
    }
    if !(lx > T::zero() && ly > T::zero()) || !lx.is_finite_value() || !ly.is_finite_value() {
        return Err(Error::invalid("domain lengths must be positive and finite"));
    }
    let dx = lx / T::from_count(nx);
    let dy = ly / T::from_count(ny);
    let half = T::lit(0.5);
    let idx = |i: usize, j: usize| i + nx * j;

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            centers.push([
                (T::from_count(i) + half) * dx,
                (T::from_count(j) + half) * dy,
            ]);
        }
    }
    let areas = vec![dx * dy; nx * ny];

    let mut interior = Vec::with_capacity(nx * (ny - 1) + ny * (nx - 1));
    for j in 0..ny {
        for i in 0..nx.saturating_sub(1) {
            interior.push(InteriorFace {
                cells: [idx(i, j), idx(i + 1, j)],
                transmissibility: dy / dx,
            });
        }
    }
    for j in 0..ny.saturating_sub(1) {
        for i in 0..nx {
            interior.push(InteriorFace {
                cells: [idx(i, j), idx(i, j + 1)],
                transmissibility: dx / dy,
            });
        }
    }

    let mut boundary = Vec::with_capacity(2 * (nx + ny));
    let (mut nd, mut nn) = (0usize, 0usize);
    let mut push = |cell: usize, length: T, distance: T, side: Side| {
        let kind = sides.get(side);
        let counter = match kind {
            BcKind::Dirichlet => &mut nd,
            BcKind::Neumann => &mut nn,
        };
        boundary.push(BoundaryFace {
            cell,
            length,
            distance,
            kind,
            side,
            slot: *counter,
        });
        *counter += 1;
    };
    for j in 0..ny {
        push(idx(0, j), dy, dx * half, Side::West);
    }
    for j in 0..ny {
        push(idx(nx - 1, j), dy, dx * half, Side::East);
    }
    for i in 0..nx {
        push(idx(i, 0), dx, dy * half, Side::South);
    }
    for i in 0..nx {
        push(idx(i, ny - 1), dx, dy * half, Side::North);
    }

    Mesh::new(centers, areas, interior, boundary)
}

impl StructuredMeshSpec {
    pub fn build<T: Real>(&self) -> Result<Mesh<T>> {
        build_structured_mesh(self.nx, self.ny, T::lit(self.lx), T::lit(self.ly), self.sides)
    }
}
