//! Exact periodic geometry: coordinate conversions, minimum-image
//! displacements, unit-cell transformations and supercells.
//!
//! The lattice matrix `L` stores the three lattice vectors as *columns*,
//! so Cartesian positions are `r = L * f` for fractional coordinates `f`
//! and periodic images live at `r + L * n` for integer shifts `n`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Determinant magnitude below which a cell is treated as degenerate.
pub const MIN_CELL_DET: f64 = 1e-8;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LatticeError {
    #[error("singular lattice: |det| = {det:.3e} <= {MIN_CELL_DET:.0e}")]
    SingularLattice { det: f64 },
    #[error("non-finite component in input vector")]
    NonFinite,
    #[error("transform is not unimodular: det = {det}")]
    NotUnimodular { det: i64 },
    #[error("atomic number {z} outside [1, 118]")]
    UnknownElement { z: i64 },
    #[error("structure must contain at least one site")]
    EmptyStructure,
}

/// Integer lattice image index. The zero vector denotes the home cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShiftVector(pub [i32; 3]);

impl ShiftVector {
    pub const ZERO: ShiftVector = ShiftVector([0, 0, 0]);

    pub fn new(n1: i32, n2: i32, n3: i32) -> Self {
        ShiftVector([n1, n2, n3])
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.0[0] as f64, self.0[1] as f64, self.0[2] as f64)
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0, 0, 0]
    }
}

impl std::ops::Neg for ShiftVector {
    type Output = ShiftVector;
    fn neg(self) -> ShiftVector {
        ShiftVector([-self.0[0], -self.0[1], -self.0[2]])
    }
}

/// Unit-cell matrix with lattice vectors as columns, plus its cached inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeMatrix {
    matrix: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl LatticeMatrix {
    /// Builds a lattice from three column vectors. Rejects degenerate cells.
    pub fn from_columns(
        l1: Vector3<f64>,
        l2: Vector3<f64>,
        l3: Vector3<f64>,
    ) -> Result<Self, LatticeError> {
        let matrix = Matrix3::from_columns(&[l1, l2, l3]);
        Self::new(matrix)
    }

    pub fn new(matrix: Matrix3<f64>) -> Result<Self, LatticeError> {
        if !matrix.iter().all(|x| x.is_finite()) {
            return Err(LatticeError::NonFinite);
        }
        let det = matrix.determinant();
        if det.abs() <= MIN_CELL_DET {
            return Err(LatticeError::SingularLattice { det });
        }
        let inverse = matrix
            .try_inverse()
            .ok_or(LatticeError::SingularLattice { det })?;
        Ok(LatticeMatrix { matrix, inverse })
    }

    /// Cubic cell with edge length `a`.
    pub fn cubic(a: f64) -> Result<Self, LatticeError> {
        Self::new(Matrix3::identity() * a)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.inverse
    }

    pub fn column(&self, j: usize) -> Vector3<f64> {
        self.matrix.column(j).into()
    }

    pub fn determinant(&self) -> f64 {
        self.matrix.determinant()
    }

    /// Cartesian image translation `L * n`.
    pub fn shift_translation(&self, shift: ShiftVector) -> Vector3<f64> {
        self.matrix * shift.as_vector()
    }
}

/// Converts fractional coordinates to Cartesian: `r = L * f`.
pub fn frac_to_cart(lattice: &LatticeMatrix, f: &Vector3<f64>) -> Vector3<f64> {
    lattice.matrix * f
}

/// Converts Cartesian coordinates to fractional: `f = L^-1 * r`.
pub fn cart_to_frac(lattice: &LatticeMatrix, r: &Vector3<f64>) -> Vector3<f64> {
    lattice.inverse * r
}

/// Wraps fractional coordinates into `[0, 1)` component-wise.
pub fn wrap_to_cell(f: &Vector3<f64>) -> Result<Vector3<f64>, LatticeError> {
    if !f.iter().all(|x| x.is_finite()) {
        return Err(LatticeError::NonFinite);
    }
    let mut out = Vector3::zeros();
    for k in 0..3 {
        let mut w = f[k] - f[k].floor();
        // f - floor(f) can round up to exactly 1.0 for tiny negative inputs.
        if w >= 1.0 {
            w -= 1.0;
        }
        out[k] = w;
    }
    Ok(out)
}

/// One atomic site: wrapped fractional coordinate plus atomic number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSite {
    frac: Vector3<f64>,
    atomic_number: u8,
}

impl AtomSite {
    pub fn new(frac: Vector3<f64>, atomic_number: i64) -> Result<Self, LatticeError> {
        if !(1..=118).contains(&atomic_number) {
            return Err(LatticeError::UnknownElement { z: atomic_number });
        }
        let frac = wrap_to_cell(&frac)?;
        Ok(AtomSite {
            frac,
            atomic_number: atomic_number as u8,
        })
    }

    pub fn frac(&self) -> &Vector3<f64> {
        &self.frac
    }

    pub fn atomic_number(&self) -> u8 {
        self.atomic_number
    }
}

/// A crystal: lattice, ordered sites, identifier and optional target value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalStructure {
    pub lattice: LatticeMatrix,
    pub sites: Vec<AtomSite>,
    pub id: String,
    pub target: Option<f64>,
}

impl CrystalStructure {
    pub fn new(
        lattice: LatticeMatrix,
        sites: Vec<AtomSite>,
        id: impl Into<String>,
        target: Option<f64>,
    ) -> Result<Self, LatticeError> {
        if sites.is_empty() {
            return Err(LatticeError::EmptyStructure);
        }
        Ok(CrystalStructure {
            lattice,
            sites,
            id: id.into(),
            target,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.sites.len()
    }

    pub fn atomic_numbers(&self) -> Vec<u8> {
        self.sites.iter().map(|s| s.atomic_number()).collect()
    }

    /// Cartesian position of site `i`.
    pub fn position(&self, i: usize) -> Vector3<f64> {
        frac_to_cart(&self.lattice, self.sites[i].frac())
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        (0..self.sites.len()).map(|i| self.position(i)).collect()
    }
}

/// Integer 3x3 matrix with determinant +-1; relabels lattice vectors
/// without changing the underlying infinite crystal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnimodularTransform {
    m: [[i64; 3]; 3],
}

fn det3_i64(m: &[[i64; 3]; 3]) -> i64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl UnimodularTransform {
    pub fn new(m: [[i64; 3]; 3]) -> Result<Self, LatticeError> {
        let det = det3_i64(&m);
        if det.abs() != 1 {
            return Err(LatticeError::NotUnimodular { det });
        }
        Ok(UnimodularTransform { m })
    }

    pub fn identity() -> Self {
        UnimodularTransform {
            m: [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        }
    }

    pub fn entries(&self) -> &[[i64; 3]; 3] {
        &self.m
    }

    pub fn determinant(&self) -> i64 {
        det3_i64(&self.m)
    }

    pub fn as_f64(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.m[i][j] as f64)
    }

    /// Exact integer inverse via the adjugate; stays integer because det = +-1.
    pub fn inverse(&self) -> UnimodularTransform {
        let m = &self.m;
        let det = det3_i64(m);
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0i64; 3]; 3];
        for (i, row) in adj.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                inv[i][j] = v * det;
            }
        }
        UnimodularTransform { m: inv }
    }
}

/// Minimum-image displacement `d = r_i - r_j + L * n` with the minimizing
/// shift `n`, searched around the floor-rounded fractional candidate.
///
/// Equal-norm ties pick the lexicographically smallest shift of the
/// canonically oriented pair, and the swapped orientation returns the exact
/// negation, so `min_image_displacement(i, j) == -min_image_displacement(j, i)`
/// holds bit-for-bit even at ties.
pub fn min_image_displacement(
    lattice: &LatticeMatrix,
    r_i: &Vector3<f64>,
    r_j: &Vector3<f64>,
) -> (Vector3<f64>, ShiftVector) {
    if lex_le(r_i, r_j) {
        min_image_oriented(lattice, r_i, r_j)
    } else {
        let (d, n) = min_image_oriented(lattice, r_j, r_i);
        (-d, -n)
    }
}

fn lex_le(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    for k in 0..3 {
        if a[k] < b[k] {
            return true;
        }
        if a[k] > b[k] {
            return false;
        }
    }
    true
}

fn min_image_oriented(
    lattice: &LatticeMatrix,
    r_i: &Vector3<f64>,
    r_j: &Vector3<f64>,
) -> (Vector3<f64>, ShiftVector) {
    let d_frac = lattice.inverse * (r_i - r_j);
    // Floor-rounding candidate: maps each fractional component into [-0.5, 0.5].
    let base = [
        -(d_frac[0] + 0.5).floor() as i32,
        -(d_frac[1] + 0.5).floor() as i32,
        -(d_frac[2] + 0.5).floor() as i32,
    ];
    let delta = r_i - r_j;
    let d0 = delta
        + lattice.shift_translation(ShiftVector::new(base[0], base[1], base[2]));
    // Any image beating the candidate satisfies, per axis k,
    // |d_frac_k + n_k| <= ||d0|| * ||row_k(L^-1)||, and the candidate's
    // fractional components already lie in [-0.5, 0.5]. For near-cubic
    // cells this collapses to the +-1 block; skewed or anisotropic cells
    // widen it as far as provably necessary.
    let d0_norm = d0.norm();
    let mut radius = [1i32; 3];
    for k in 0..3 {
        let row_norm = lattice.inverse.row(k).norm();
        radius[k] = ((d0_norm * row_norm + 0.5 + 1e-9).floor() as i32).max(1);
    }
    let mut best: Option<(f64, ShiftVector, Vector3<f64>)> = None;
    for da in -radius[0]..=radius[0] {
        for db in -radius[1]..=radius[1] {
            for dc in -radius[2]..=radius[2] {
                let n = ShiftVector::new(base[0] + da, base[1] + db, base[2] + dc);
                let d = delta + lattice.shift_translation(n);
                let norm2 = d.norm_squared();
                let better = match &best {
                    None => true,
                    Some((b_norm2, b_n, _)) => {
                        norm2 < *b_norm2 || (norm2 == *b_norm2 && n < *b_n)
                    }
                };
                if better {
                    best = Some((norm2, n, d));
                }
            }
        }
    }
    let (_, n, d) = best.unwrap();
    (d, n)
}

/// Re-expresses a structure in an equivalent unit cell: `L' = L * M`,
/// `f' = wrap(M^-1 * f)`. The Cartesian point set modulo lattice
/// translations is unchanged.
pub fn apply_cell_transform(
    s: &CrystalStructure,
    m: &UnimodularTransform,
) -> Result<CrystalStructure, LatticeError> {
    let new_matrix = s.lattice.matrix() * m.as_f64();
    let lattice = LatticeMatrix::new(new_matrix)?;
    let m_inv = m.inverse().as_f64();
    let sites = s
        .sites
        .iter()
        .map(|site| AtomSite::new(m_inv * site.frac(), site.atomic_number() as i64))
        .collect::<Result<Vec<_>, _>>()?;
    CrystalStructure::new(lattice, sites, s.id.clone(), s.target)
}

/// Tiles the cell `reps` times along each lattice vector.
pub fn build_supercell(s: &CrystalStructure, reps: (u32, u32, u32)) -> CrystalStructure {
    let (ra, rb, rc) = reps;
    assert!(ra >= 1 && rb >= 1 && rc >= 1, "reps must be >= 1");
    let scale = Vector3::new(ra as f64, rb as f64, rc as f64);
    let cols = [
        s.lattice.column(0) * scale[0],
        s.lattice.column(1) * scale[1],
        s.lattice.column(2) * scale[2],
    ];
    let lattice = LatticeMatrix::from_columns(cols[0], cols[1], cols[2])
        .expect("scaling by positive integers preserves invertibility");
    let mut sites = Vec::with_capacity(s.sites.len() * (ra * rb * rc) as usize);
    for a in 0..ra {
        for b in 0..rb {
            for c in 0..rc {
                let offset = Vector3::new(a as f64, b as f64, c as f64);
                for site in &s.sites {
                    let f = (site.frac() + offset).component_div(&scale);
                    sites.push(
                        AtomSite::new(f, site.atomic_number() as i64)
                            .expect("supercell coordinates stay finite"),
                    );
                }
            }
        }
    }
    CrystalStructure {
        lattice,
        sites,
        id: format!("{}-super{}x{}x{}", s.id, ra, rb, rc),
        target: s.target,
    }
}

/// Random unimodular matrix built from `steps` elementary integer row
/// operations (row swap, or add +-1 times one row to another).
pub fn random_unimodular(seed: u64, steps: u32) -> UnimodularTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = [[0i64; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1;
    }
    for _ in 0..steps {
        let a = rng.random_range(0..3usize);
        let mut b = rng.random_range(0..3usize);
        while b == a {
            b = rng.random_range(0..3usize);
        }
        if rng.random_range(0..4u32) == 0 {
            m.swap(a, b);
        } else {
            let sign: i64 = if rng.random_range(0..2u32) == 0 { 1 } else { -1 };
            for j in 0..3 {
                m[a][j] += sign * m[b][j];
            }
        }
    }
    UnimodularTransform::new(m).expect("elementary row operations preserve |det| = 1")
}
