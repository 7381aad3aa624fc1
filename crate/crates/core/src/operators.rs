//! P1 finite-element operators on tetrahedral meshes.
//!
//! All operators share one sparsity pattern (vertex adjacency plus diagonal),
//! so linear combinations like the shifted Helmholtz matrix are elementwise.
//! Element contributions are accumulated after sorting by (row, col, value
//! bits), which makes assembly independent of the cell iteration order and
//! exactly equivariant under the mesh reflection `x -> -x`: permuting cells
//! or mirroring the mesh changes no entry by even one ulp. Element frames are
//! canonicalized by a reflection-invariant vertex order for the same reason.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::util::{cross, dist3, dot3, sub, Point};

/// Nodal values of a P1 function, one scalar per mesh vertex (au).
pub type NodalField = Vec<f64>;

/// Regularized two-center attractive potential.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NuclearPotentialSpec {
    /// Half internuclear distance R (nuclei at `±R e1`), au.
    pub r_half: f64,
    /// Regularization constant added to the distance in the denominator, au.
    pub delta: f64,
}

impl NuclearPotentialSpec {
    pub fn new(r_half: f64, delta: f64) -> Result<Self> {
        if !(r_half > 0.0) {
            return Err(Error::Config("nuclear spec requires R > 0".into()));
        }
        if !(delta > 0.0) {
            return Err(Error::Config("nuclear spec requires delta > 0".into()));
        }
        Ok(Self { r_half, delta })
    }

    pub fn evaluate(&self, x: Point) -> f64 {
        let a = [self.r_half, 0.0, 0.0];
        let b = [-self.r_half, 0.0, 0.0];
        -1.0 / (dist3(x, a) + self.delta) - 1.0 / (dist3(x, b) + self.delta)
    }
}

/// Shared CSR sparsity over mesh vertices.
#[derive(Debug)]
pub struct Pattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<u32>,
}

impl Pattern {
    pub fn from_mesh(mesh: &Mesh) -> Arc<Pattern> {
        let n = mesh.vertex_count();
        let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(16 * mesh.cell_count() + n);
        for i in 0..n as u32 {
            pairs.push((i, i));
        }
        for cell in &mesh.cells {
            for &a in cell {
                for &b in cell {
                    if a != b {
                        pairs.push((a, b));
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0usize; n + 1];
        for &(r, _) in &pairs {
            row_ptr[r as usize + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col = pairs.into_iter().map(|(_, c)| c).collect();
        Arc::new(Pattern { n, row_ptr, col })
    }

    #[inline]
    pub fn index_of(&self, row: u32, col: u32) -> Option<usize> {
        let lo = self.row_ptr[row as usize];
        let hi = self.row_ptr[row as usize + 1];
        self.col[lo..hi].binary_search(&col).ok().map(|k| lo + k)
    }
}

/// Symmetric sparse operator in CSR layout over a shared pattern.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    pub pattern: Arc<Pattern>,
    pub values: Vec<f64>,
}

impl SparseOperator {
    pub fn zeros(pattern: Arc<Pattern>) -> Self {
        let nnz = pattern.col.len();
        Self {
            pattern,
            values: vec![0.0; nnz],
        }
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pattern;
        for i in 0..p.n {
            let mut acc = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                acc += self.values[k] * x[p.col[k] as usize];
            }
            y[i] = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.matvec(x, &mut y);
        y
    }

    pub fn diag(&self) -> Vec<f64> {
        let p = &self.pattern;
        (0..p.n as u32)
            .map(|i| p.index_of(i, i).map(|k| self.values[k]).unwrap_or(0.0))
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let p = &self.pattern;
        (0..p.n)
            .map(|i| self.values[p.row_ptr[i]..p.row_ptr[i + 1]].iter().sum())
            .collect()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `self + s * other`; both operators must share a pattern.
    pub fn add_scaled(&self, other: &SparseOperator, s: f64) -> SparseOperator {
        assert!(
            Arc::ptr_eq(&self.pattern, &other.pattern)
                || (self.pattern.row_ptr == other.pattern.row_ptr
                    && self.pattern.col == other.pattern.col),
            "operators must share a sparsity pattern"
        );
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + s * b)
            .collect();
        SparseOperator {
            pattern: self.pattern.clone(),
            values,
        }
    }

    pub fn scaled(&self, s: f64) -> SparseOperator {
        SparseOperator {
            pattern: self.pattern.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Dirichlet elimination: zeroes constrained rows and columns and puts 1
    /// on the constrained diagonal, keeping the operator symmetric.
    pub fn constrained(&self, is_constrained: &[bool]) -> SparseOperator {
        let p = &self.pattern;
        let mut values = self.values.clone();
        for i in 0..p.n {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                let j = p.col[k] as usize;
                if is_constrained[i] || is_constrained[j] {
                    values[k] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        SparseOperator {
            pattern: self.pattern.clone(),
            values,
        }
    }

    pub fn max_symmetry_defect(&self) -> f64 {
        let p = &self.pattern;
        let mut worst: f64 = 0.0;
        for i in 0..p.n {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                let j = p.col[k];
                if (j as usize) < i {
                    continue;
                }
                let ji = p
                    .index_of(j, i as u32)
                    .map(|m| self.values[m])
                    .unwrap_or(0.0);
                worst = worst.max((self.values[k] - ji).abs());
            }
        }
        worst
    }

    /// Matrix Market coordinate text, symmetric storage (lower triangle).
    pub fn to_matrix_market(&self) -> String {
        use std::fmt::Write;
        let p = &self.pattern;
        let mut entries = Vec::new();
        for i in 0..p.n {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                let j = p.col[k] as usize;
                if j <= i && self.values[k] != 0.0 {
                    entries.push((i + 1, j + 1, self.values[k]));
                }
            }
        }
        let mut s = String::new();
        writeln!(s, "%%MatrixMarket matrix coordinate real symmetric").unwrap();
        writeln!(s, "{} {} {}", p.n, p.n, entries.len()).unwrap();
        for (i, j, v) in entries {
            writeln!(s, "{i} {j} {v:?}").unwrap();
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

struct Assembler {
    pattern: Arc<Pattern>,
    triplets: Vec<(u32, u32, f64)>,
}

impl Assembler {
    fn new(pattern: Arc<Pattern>, cells: usize) -> Self {
        Self {
            pattern,
            triplets: Vec::with_capacity(16 * cells),
        }
    }

    #[inline]
    fn add(&mut self, r: u32, c: u32, v: f64) {
        self.triplets.push((r, c, v));
    }

    /// Sorting by (row, col, value bits) makes the summation order a
    /// function of the values alone, never of cell order.
    fn finalize(mut self) -> SparseOperator {
        self.triplets
            .sort_unstable_by_key(|&(r, c, v)| (r, c, v.to_bits()));
        let mut op = SparseOperator::zeros(self.pattern);
        for (r, c, v) in self.triplets {
            let k = op
                .pattern
                .index_of(r, c)
                .expect("triplet outside pattern");
            op.values[k] += v;
        }
        op
    }
}

/// Reflection-invariant vertex order within a cell, so element arithmetic is
/// bitwise identical for mirrored cells.
fn canonical_cell_order(mesh: &Mesh, cell: [u32; 4]) -> [u32; 4] {
    let key = |v: u32| {
        let p = mesh.vertices[v as usize];
        [
            p[0].abs().to_bits(),
            p[1].abs().to_bits(),
            p[2].abs().to_bits(),
        ]
    };
    let mut c = cell;
    c.sort_unstable_by_key(|&v| (key(v), v));
    c
}

fn element_geometry(p: &[Point; 4]) -> (f64, [[f64; 3]; 4]) {
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let e3 = sub(p[3], p[0]);
    let det = dot3(e1, cross(e2, e3));
    let inv = 1.0 / det;
    let g1 = cross(e2, e3);
    let g2 = cross(e3, e1);
    let g3 = cross(e1, e2);
    let grads = [
        [
            -(g1[0] + g2[0] + g3[0]) * inv,
            -(g1[1] + g2[1] + g3[1]) * inv,
            -(g1[2] + g2[2] + g3[2]) * inv,
        ],
        [g1[0] * inv, g1[1] * inv, g1[2] * inv],
        [g2[0] * inv, g2[1] * inv, g2[2] * inv],
        [g3[0] * inv, g3[1] * inv, g3[2] * inv],
    ];
    (det.abs() / 6.0, grads)
}

fn check_not_degenerate(mesh: &Mesh, c: usize, vol: f64) -> Result<()> {
    let diam = mesh.cell_diameter(c);
    if !(vol > 1e-12 * diam * diam * diam) {
        return Err(Error::DegenerateCell {
            cell: c,
            reason: format!("volume {vol:.3e} below floor for diameter {diam:.3e}"),
        });
    }
    Ok(())
}

fn cell_points_ordered(mesh: &Mesh, cell: [u32; 4]) -> [Point; 4] {
    [
        mesh.vertices[cell[0] as usize],
        mesh.vertices[cell[1] as usize],
        mesh.vertices[cell[2] as usize],
        mesh.vertices[cell[3] as usize],
    ]
}

/// Stiffness with the kinetic prefactor: `T_mn = 1/2 Σ_cells ∫ ∇η_m·∇η_n`.
/// Positive semidefinite with constants in the kernel (before constraints).
pub fn assemble_stiffness(mesh: &Mesh) -> Result<SparseOperator> {
    assemble_stiffness_on(mesh, Pattern::from_mesh(mesh))
}

pub fn assemble_stiffness_on(mesh: &Mesh, pattern: Arc<Pattern>) -> Result<SparseOperator> {
    let mut asm = Assembler::new(pattern, mesh.cell_count());
    for ci in 0..mesh.cell_count() {
        let cell = canonical_cell_order(mesh, mesh.cells[ci]);
        let (vol, g) = element_geometry(&cell_points_ordered(mesh, cell));
        check_not_degenerate(mesh, ci, vol)?;
        for i in 0..4 {
            for j in 0..4 {
                let v = 0.5 * vol * dot3(g[i], g[j]);
                asm.add(cell[i], cell[j], v);
            }
        }
    }
    Ok(asm.finalize())
}

/// Mass matrix `S_mn = ∫ η_m η_n`; per element `vol (1 + δ_mn) / 20`.
pub fn assemble_mass(mesh: &Mesh) -> Result<SparseOperator> {
    assemble_mass_on(mesh, Pattern::from_mesh(mesh))
}

pub fn assemble_mass_on(mesh: &Mesh, pattern: Arc<Pattern>) -> Result<SparseOperator> {
    let mut asm = Assembler::new(pattern, mesh.cell_count());
    for ci in 0..mesh.cell_count() {
        let cell = canonical_cell_order(mesh, mesh.cells[ci]);
        let (vol, _) = element_geometry(&cell_points_ordered(mesh, cell));
        check_not_degenerate(mesh, ci, vol)?;
        for i in 0..4 {
            for j in 0..4 {
                let v = if i == j { vol / 10.0 } else { vol / 20.0 };
                asm.add(cell[i], cell[j], v);
            }
        }
    }
    Ok(asm.finalize())
}

/// Potential-weighted mass `∫ η_m w_h η_n` with `w_h` the P1 interpolant of
/// the nodal weight. The triple products of barycentric factors are
/// integrated exactly: `∫ λ_a λ_b λ_c = vol/120` for distinct indices,
/// `vol/60` for one repeated index, `vol/20` for a triple.
pub fn assemble_weighted_mass(mesh: &Mesh, w: &NodalField) -> Result<SparseOperator> {
    assemble_weighted_mass_on(mesh, Pattern::from_mesh(mesh), w)
}

pub fn assemble_weighted_mass_on(
    mesh: &Mesh,
    pattern: Arc<Pattern>,
    w: &NodalField,
) -> Result<SparseOperator> {
    if w.len() != mesh.vertex_count() {
        return Err(Error::Invalid(format!(
            "weight field length {} does not match vertex count {}",
            w.len(),
            mesh.vertex_count()
        )));
    }
    if w.iter().any(|v| v.is_nan()) {
        return Err(Error::Invalid("NaN in weight field".into()));
    }
    let mut asm = Assembler::new(pattern, mesh.cell_count());
    for ci in 0..mesh.cell_count() {
        let cell = canonical_cell_order(mesh, mesh.cells[ci]);
        let (vol, _) = element_geometry(&cell_points_ordered(mesh, cell));
        check_not_degenerate(mesh, ci, vol)?;
        let wl = [
            w[cell[0] as usize],
            w[cell[1] as usize],
            w[cell[2] as usize],
            w[cell[3] as usize],
        ];
        let wsum = wl[0] + wl[1] + wl[2] + wl[3];
        for i in 0..4 {
            for j in 0..4 {
                let v = if i == j {
                    vol * (wl[i] / 20.0 + (wsum - wl[i]) / 60.0)
                } else {
                    let wij = wl[i] + wl[j];
                    vol * (wij / 60.0 + (wsum - wij) / 120.0)
                };
                asm.add(cell[i], cell[j], v);
            }
        }
    }
    Ok(asm.finalize())
}

/// Vertex values of the regularized two-center potential.
pub fn nuclear_field(mesh: &Mesh, spec: &NuclearPotentialSpec) -> NodalField {
    mesh.vertices.iter().map(|&p| spec.evaluate(p)).collect()
}

/// Pointwise vertex interpolation of an arbitrary function.
pub fn interpolate<F: Fn(Point) -> f64>(mesh: &Mesh, f: F) -> NodalField {
    mesh.vertices.iter().map(|&p| f(p)).collect()
}

/// Lumped mass vector `(S·1)_m = ∫ η_m`.
pub fn lumped_mass(mass: &SparseOperator) -> Vec<f64> {
    mass.row_sums()
}
