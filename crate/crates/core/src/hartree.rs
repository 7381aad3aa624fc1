//! Hartree potential: Poisson solves with free-space boundary values.
//!
//! The discrete problem is `2T v = 4π S ρ` with Dirichlet data on the box
//! faces taken from a multipole expansion of the vertex-lumped charges
//! `q = S ρ`. Order 0 uses a monopole about the charge centroid; order 1
//! (the default) uses monopole plus dipole about the domain origin, which is
//! linear in the density. The module also exposes the exact adjoint of the
//! density-to-potential map, so the Hartree contribution to energy gradients
//! and Hessians accounts for the boundary data instead of treating the solve
//! as if it were self-adjoint.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsolve::{cg_solve, Multigrid, PrecondKind, Preconditioner, SolveReport, SolverConfig};
use crate::mesh::{Mesh, MeshHierarchy};
use crate::operators::{
    assemble_mass_on, assemble_stiffness, assemble_stiffness_on, NodalField, Pattern,
    SparseOperator,
};
use crate::util::{dist3, dot, Point};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;
/// Total charges below this threshold produce zero boundary data.
const CHARGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryOrder {
    /// Monopole about the charge centroid.
    Monopole,
    /// Monopole plus dipole about the domain origin; linear in the density.
    Dipole,
}

impl BoundaryOrder {
    pub fn from_order(order: u8) -> Result<Self> {
        match order {
            0 => Ok(BoundaryOrder::Monopole),
            1 => Ok(BoundaryOrder::Dipole),
            other => Err(Error::Config(format!("boundary order {other} not supported"))),
        }
    }

    pub fn as_order(&self) -> u8 {
        match self {
            BoundaryOrder::Monopole => 0,
            BoundaryOrder::Dipole => 1,
        }
    }
}

/// Lumped-charge summary of a density field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChargeSummary {
    pub total_charge: f64,
    pub centroid: Point,
}

pub fn charge_summary(mesh: &Mesh, mass: &SparseOperator, rho: &NodalField) -> ChargeSummary {
    let q = mass.apply(rho);
    let total: f64 = q.iter().sum();
    let mut centroid = [0.0; 3];
    if total.abs() > CHARGE_FLOOR {
        for (qi, p) in q.iter().zip(&mesh.vertices) {
            for a in 0..3 {
                centroid[a] += qi * p[a];
            }
        }
        for c in centroid.iter_mut() {
            *c /= total;
        }
    }
    ChargeSummary {
        total_charge: total,
        centroid,
    }
}

/// Dirichlet values on `mesh.boundary_vertices` (in that order) for the given
/// density.
pub fn boundary_values(
    mesh: &Mesh,
    mass: &SparseOperator,
    rho: &NodalField,
    order: BoundaryOrder,
) -> Result<Vec<f64>> {
    let q = mass.apply(rho);
    let total: f64 = q.iter().sum();
    if total.abs() <= CHARGE_FLOOR {
        return Ok(vec![0.0; mesh.boundary_vertices.len()]);
    }
    match order {
        BoundaryOrder::Monopole => {
            let summary = charge_summary(mesh, mass, rho);
            let c = summary.centroid;
            let margin = 1e-9 * mesh.half_extent.max(1.0);
            if c.iter().any(|x| x.abs() >= mesh.half_extent - margin) {
                return Err(Error::Invalid(format!(
                    "charge centroid {c:?} lies on the domain boundary"
                )));
            }
            Ok(mesh
                .boundary_vertices
                .iter()
                .map(|&b| total / dist3(mesh.vertices[b as usize], c))
                .collect())
        }
        BoundaryOrder::Dipole => {
            let mut p = [0.0; 3];
            for (qi, x) in q.iter().zip(&mesh.vertices) {
                for a in 0..3 {
                    p[a] += qi * x[a];
                }
            }
            Ok(mesh
                .boundary_vertices
                .iter()
                .map(|&b| {
                    let xb = mesh.vertices[b as usize];
                    let r = crate::util::norm3(xb);
                    total / r + crate::util::dot3(p, xb) / (r * r * r)
                })
                .collect())
        }
    }
}

/// Everything needed to turn densities into Hartree potentials on one mesh.
pub struct HartreeContext {
    pub mesh: Arc<Mesh>,
    mass: SparseOperator,
    a_raw: SparseOperator,
    a_constrained: SparseOperator,
    precond: Preconditioner,
    solver: SolverConfig,
    pub order: BoundaryOrder,
}

impl HartreeContext {
    pub fn new(
        hierarchy: &MeshHierarchy,
        pattern: Arc<Pattern>,
        mass: SparseOperator,
        solver: SolverConfig,
        order: BoundaryOrder,
    ) -> Result<Self> {
        let mesh = hierarchy.finest().clone();
        let a_raw = assemble_stiffness_on(&mesh, pattern)?.scaled(2.0);
        let a_constrained = a_raw.constrained(&mesh.is_boundary);
        let precond = match solver.preconditioner {
            PrecondKind::None => Preconditioner::Identity,
            PrecondKind::Diagonal => Preconditioner::diagonal(&a_constrained),
            PrecondKind::Multigrid => {
                let ops = hierarchy
                    .levels
                    .iter()
                    .map(|m| {
                        Ok(assemble_stiffness(m)?
                            .scaled(2.0)
                            .constrained(&m.is_boundary))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Preconditioner::Multigrid(Box::new(Multigrid::new(&hierarchy.levels, ops)?))
            }
        };
        Ok(Self {
            mesh,
            mass,
            a_raw,
            a_constrained,
            precond,
            solver,
            order,
        })
    }

    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    fn solve_with_data(&self, load: &[f64], g: &[f64]) -> Result<(NodalField, SolveReport)> {
        let n = self.mesh.vertex_count();
        let mut v_ext = vec![0.0; n];
        for (k, &b) in self.mesh.boundary_vertices.iter().enumerate() {
            v_ext[b as usize] = g[k];
        }
        let lifted = self.a_raw.apply(&v_ext);
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[i] = if self.mesh.is_boundary[i] {
                v_ext[i]
            } else {
                load[i] - lifted[i]
            };
        }
        let (v, report) = cg_solve(&self.a_constrained, &rhs, &v_ext, &self.precond, &self.solver)?;
        if !report.converged {
            return Err(Error::Solver {
                reason: "Poisson solve did not converge".into(),
                iterations: report.iterations,
                residual: report.relative_residual,
            });
        }
        Ok((v, report))
    }

    fn boundary_from_charges(&self, q: &[f64]) -> Result<Vec<f64>> {
        let total: f64 = q.iter().sum();
        if total.abs() <= CHARGE_FLOOR {
            return Ok(vec![0.0; self.mesh.boundary_vertices.len()]);
        }
        match self.order {
            BoundaryOrder::Monopole => {
                let mut c = [0.0; 3];
                for (qi, p) in q.iter().zip(&self.mesh.vertices) {
                    for a in 0..3 {
                        c[a] += qi * p[a];
                    }
                }
                for x in c.iter_mut() {
                    *x /= total;
                }
                let margin = 1e-9 * self.mesh.half_extent.max(1.0);
                if c.iter().any(|x| x.abs() >= self.mesh.half_extent - margin) {
                    return Err(Error::Invalid(format!(
                        "charge centroid {c:?} lies on the domain boundary"
                    )));
                }
                Ok(self
                    .mesh
                    .boundary_vertices
                    .iter()
                    .map(|&b| total / dist3(self.mesh.vertices[b as usize], c))
                    .collect())
            }
            BoundaryOrder::Dipole => {
                let mut p = [0.0; 3];
                for (qi, x) in q.iter().zip(&self.mesh.vertices) {
                    for a in 0..3 {
                        p[a] += qi * x[a];
                    }
                }
                Ok(self
                    .mesh
                    .boundary_vertices
                    .iter()
                    .map(|&b| {
                        let xb = self.mesh.vertices[b as usize];
                        let r = crate::util::norm3(xb);
                        total / r + crate::util::dot3(p, xb) / (r * r * r)
                    })
                    .collect())
            }
        }
    }

    /// Potential of a lumped charge vector `q_m = ∫ η_m ρ`: solves the
    /// constrained system with load `4π q` and multipole boundary data.
    pub fn solve_load(&self, q: &[f64]) -> Result<(NodalField, SolveReport)> {
        if q.len() != self.mesh.vertex_count() {
            return Err(Error::Invalid("charge vector length mismatch".into()));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("charge vector must be finite".into()));
        }
        let load: Vec<f64> = q.iter().map(|qi| FOUR_PI * qi).collect();
        let g = self.boundary_from_charges(q)?;
        self.solve_with_data(&load, &g)
    }

    /// Hartree potential of a nodal density (charges `q = S ρ`).
    pub fn solve(&self, rho: &NodalField) -> Result<(NodalField, SolveReport)> {
        if rho.len() != self.mesh.vertex_count() {
            return Err(Error::Invalid("density length mismatch".into()));
        }
        self.solve_load(&self.mass.apply(rho))
    }

    /// `E_H = 1/2 ρᵀ S v`; the same expression the total energy uses.
    pub fn energy(&self, rho: &NodalField, v: &NodalField) -> f64 {
        0.5 * dot(rho, &self.mass.apply(v))
    }

    /// Sensitivity of the boundary map: the derivative of the value at `x_b`
    /// with respect to the lumped charge at `x` is
    /// `1/|x_b - c| + (x_b - c)·(x - c)/|x_b - c|^3`, with `c` the centroid
    /// (order 0, second term tracks centroid motion) or the origin (order 1,
    /// second term is the dipole kernel).
    fn boundary_gamma(&self, center: Point, x: Point, xb: Point) -> f64 {
        let d = [xb[0] - center[0], xb[1] - center[1], xb[2] - center[2]];
        let r = crate::util::norm3(d);
        let e = [x[0] - center[0], x[1] - center[1], x[2] - center[2]];
        1.0 / r + crate::util::dot3(d, e) / (r * r * r)
    }

    fn charge_center(&self, q0: &[f64]) -> Option<Point> {
        match self.order {
            BoundaryOrder::Dipole => Some([0.0; 3]),
            BoundaryOrder::Monopole => {
                let total: f64 = q0.iter().sum();
                if total.abs() <= CHARGE_FLOOR {
                    return None;
                }
                let mut c = [0.0; 3];
                for (qi, p) in q0.iter().zip(&self.mesh.vertices) {
                    for a in 0..3 {
                        c[a] += qi * p[a];
                    }
                }
                for x in c.iter_mut() {
                    *x /= total;
                }
                Some(c)
            }
        }
    }

    /// Directional derivative of the charge-to-potential map at `q0` applied
    /// to `u`. For order 1 the map is linear and `q0` is unused.
    pub fn linearized_solve(&self, q0: &[f64], u: &[f64]) -> Result<NodalField> {
        let load: Vec<f64> = u.iter().map(|x| FOUR_PI * x).collect();
        let g: Vec<f64> = match self.charge_center(q0) {
            None => vec![0.0; self.mesh.boundary_vertices.len()],
            Some(center) => self
                .mesh
                .boundary_vertices
                .iter()
                .map(|&b| {
                    let xb = self.mesh.vertices[b as usize];
                    u.iter()
                        .zip(&self.mesh.vertices)
                        .map(|(ui, &x)| ui * self.boundary_gamma(center, x, xb))
                        .sum()
                })
                .collect(),
        };
        Ok(self.solve_with_data(&load, &g)?.0)
    }

    /// Exact transpose of [`HartreeContext::linearized_solve`]:
    /// `Kᵀ w = 4π Z w + Gᵀ[(w - A Z w)|boundary]`.
    pub fn adjoint_solve(&self, q0: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let n = self.mesh.vertex_count();
        let mut w_masked = w.to_vec();
        for &b in &self.mesh.boundary_vertices {
            w_masked[b as usize] = 0.0;
        }
        let (z, report) = cg_solve(
            &self.a_constrained,
            &w_masked,
            &vec![0.0; n],
            &self.precond,
            &self.solver,
        )?;
        if !report.converged {
            return Err(Error::Solver {
                reason: "adjoint Poisson solve did not converge".into(),
                iterations: report.iterations,
                residual: report.relative_residual,
            });
        }
        let az = self.a_raw.apply(&z);
        let h: Vec<f64> = self
            .mesh
            .boundary_vertices
            .iter()
            .map(|&b| w[b as usize] - az[b as usize])
            .collect();
        let mut out: Vec<f64> = match self.charge_center(q0) {
            None => vec![0.0; n],
            Some(center) => self
                .mesh
                .vertices
                .iter()
                .map(|&x| {
                    h.iter()
                        .zip(&self.mesh.boundary_vertices)
                        .map(|(hb, &b)| {
                            hb * self.boundary_gamma(center, x, self.mesh.vertices[b as usize])
                        })
                        .sum::<f64>()
                })
                .collect(),
        };
        for i in 0..n {
            out[i] += FOUR_PI * z[i];
        }
        Ok(out)
    }

    /// Potential and boundary-symmetrized potential of a charge vector:
    /// `v = K q`, `v̂ = 1/2 (K + Kᵀ) q`. The symmetrized form is what makes
    /// the Hartree energy `1/2 qᵀ v̂` exactly differentiable.
    pub fn sym_potential(&self, q: &[f64]) -> Result<(NodalField, NodalField)> {
        let (v, _) = self.solve_load(q)?;
        let v_adj = self.adjoint_solve(q, q)?;
        let v_hat = v
            .iter()
            .zip(&v_adj)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        Ok((v, v_hat))
    }

    /// Symmetrized kernel application `K̂ u = 1/2 (K u + Kᵀ u)` linearized at
    /// `q0`; the Hessian's Coulomb coupling. Exact second derivative of the
    /// Hartree energy for order 1.
    pub fn sym_kernel_apply(&self, q0: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let ku = self.linearized_solve(q0, u)?;
        let kt = self.adjoint_solve(q0, u)?;
        Ok(ku.iter().zip(&kt).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    /// Hartree energy of a charge vector given its symmetrized potential.
    pub fn energy_from_load(&self, q: &[f64], v_hat: &[f64]) -> f64 {
        0.5 * dot(q, v_hat)
    }
}

/// Builds a Hartree context directly from a hierarchy (owns fresh operators).
pub fn hartree_context(
    hierarchy: &MeshHierarchy,
    solver: SolverConfig,
    order: BoundaryOrder,
) -> Result<HartreeContext> {
    let mesh = hierarchy.finest();
    let pattern = Pattern::from_mesh(mesh);
    let mass = assemble_mass_on(mesh, pattern.clone())?;
    HartreeContext::new(hierarchy, pattern, mass, solver, order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_hierarchy, MeshConfig, MeshHierarchy};
    use crate::operators::interpolate;
    use crate::util::{dot3, SplitMix64};

    fn hier(local: usize, global: usize) -> MeshHierarchy {
        build_hierarchy(&MeshConfig {
            initial_cells_per_axis: 2,
            local_refine_rounds: local,
            global_refine_rounds: global,
            nucleus_positions: vec![[0.0, 0.0, 0.0]],
            ..MeshConfig::default()
        })
        .unwrap()
    }

    fn ctx(h: &MeshHierarchy, order: BoundaryOrder) -> HartreeContext {
        hartree_context(h, SolverConfig::default(), order).unwrap()
    }

    /// Radial quadrature of the potential of a spherical charge:
    /// `V(r) = 4π/r ∫_0^r ρ s² ds + 4π ∫_r^∞ ρ s ds`.
    fn radial_potential_oracle(zeta: f64, r: f64) -> f64 {
        let norm = (2.0 * zeta / std::f64::consts::PI).powf(1.5); // ∫ρ = 1
        let rho = |s: f64| norm * (-2.0 * zeta * s * s).exp();
        let n = 4000;
        let rmax = 60.0;
        let h = rmax / n as f64;
        let mut inner = 0.0;
        let mut outer = 0.0;
        for k in 0..n {
            let a = k as f64 * h;
            let b = a + h;
            let mid = 0.5 * (a + b);
            if b <= r {
                inner += h / 6.0 * (rho(a) * a * a + 4.0 * rho(mid) * mid * mid + rho(b) * b * b);
            } else if a >= r {
                outer += h / 6.0 * (rho(a) * a + 4.0 * rho(mid) * mid + rho(b) * b);
            } else {
                let h1 = r - a;
                let m1 = 0.5 * (a + r);
                inner += h1 / 6.0 * (rho(a) * a * a + 4.0 * rho(m1) * m1 * m1 + rho(r) * r * r);
                let h2 = b - r;
                let m2 = 0.5 * (r + b);
                outer += h2 / 6.0 * (rho(r) * r + 4.0 * rho(m2) * m2 + rho(b) * b);
            }
        }
        if r < 1e-12 {
            FOUR_PI * outer
        } else {
            FOUR_PI * inner / r + FOUR_PI * outer
        }
    }

    #[test]
    fn zero_density_gives_zero_potential() {
        let h = hier(1, 0);
        let c = ctx(&h, BoundaryOrder::Dipole);
        let rho = vec![0.0; h.finest().vertex_count()];
        let (v, _) = c.solve(&rho).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gaussian_potential_matches_radial_oracle() {
        let h = hier(6, 2);
        let mesh = h.finest();
        let c = ctx(&h, BoundaryOrder::Dipole);
        let zeta = 0.5;
        let norm = (2.0 * zeta / std::f64::consts::PI).powf(1.5);
        let rho = interpolate(mesh, |p| norm * (-2.0 * zeta * dot3(p, p)).exp());
        let (v, _) = c.solve(&rho).unwrap();
        let exact: Vec<f64> = mesh
            .vertices
            .iter()
            .map(|p| radial_potential_oracle(zeta, crate::util::norm3(*p)))
            .collect();
        // Relative L2 (mass-weighted) error below 2%.
        let diff: Vec<f64> = v.iter().zip(&exact).map(|(a, b)| a - b).collect();
        let num = dot(&diff, &c.mass.apply(&diff)).sqrt();
        let den = dot(&exact, &c.mass.apply(&exact)).sqrt();
        assert!(num / den < 0.02, "relative L2 error {}", num / den);
        // Positivity up to tolerance.
        assert!(v.iter().all(|&x| x >= -1e-8));
    }

    #[test]
    fn potential_is_mirror_equivariant() {
        let h = build_hierarchy(&MeshConfig {
            initial_cells_per_axis: 2,
            local_refine_rounds: 2,
            global_refine_rounds: 0,
            nucleus_positions: vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
            ..MeshConfig::default()
        })
        .unwrap();
        let mesh = h.finest();
        let mirror = mesh.mirror.clone().unwrap();
        let c = ctx(&h, BoundaryOrder::Dipole);
        // Asymmetric density and its mirror image.
        let rho = interpolate(mesh, |p| {
            (-0.8 * (dot3(p, p) - 1.6 * p[0] + 0.64)).exp()
        });
        let rho_m: Vec<f64> = (0..rho.len()).map(|i| rho[mirror[i] as usize]).collect();
        let (v, _) = c.solve(&rho).unwrap();
        let (vm, _) = c.solve(&rho_m).unwrap();
        let scale = v.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        for i in 0..v.len() {
            assert!(
                (v[i] - vm[mirror[i] as usize]).abs() <= 1e-10 * scale.max(1.0),
                "vertex {i}: {} vs {}",
                v[i],
                vm[mirror[i] as usize]
            );
        }
    }

    #[test]
    fn dipole_order_is_linear() {
        let h = hier(2, 0);
        let mesh = h.finest();
        let c = ctx(&h, BoundaryOrder::Dipole);
        let rho1 = interpolate(mesh, |p| (-0.7 * dot3(p, p)).exp());
        let rho2 = interpolate(mesh, |p| {
            (-0.5 * ((p[0] - 1.0).powi(2) + p[1] * p[1] + p[2] * p[2])).exp()
        });
        let sum: Vec<f64> = rho1.iter().zip(&rho2).map(|(a, b)| a + b).collect();
        let (v1, _) = c.solve(&rho1).unwrap();
        let (v2, _) = c.solve(&rho2).unwrap();
        let (vs, _) = c.solve(&sum).unwrap();
        let scale = vs.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        for i in 0..vs.len() {
            assert!(
                (v1[i] + v2[i] - vs[i]).abs() < 1e-6 * scale.max(1.0),
                "linearity defect at {i}"
            );
        }
    }

    #[test]
    fn monopole_boundary_of_point_charge() {
        let h = hier(2, 0);
        let mesh = h.finest();
        let mass = crate::operators::assemble_mass(mesh).unwrap();
        // Unit point-like charge: load exactly one interior vertex at the
        // origin, scaled so the total lumped charge is 1.
        let origin = mesh
            .vertices
            .iter()
            .position(|p| crate::util::norm3(*p) < 1e-12)
            .expect("origin vertex");
        let lumped = crate::operators::lumped_mass(&mass);
        let mut rho = vec![0.0; mesh.vertex_count()];
        rho[origin] = 1.0 / lumped[origin];
        let g = boundary_values(mesh, &mass, &rho, BoundaryOrder::Monopole).unwrap();
        for (k, &b) in mesh.boundary_vertices.iter().enumerate() {
            let r = crate::util::norm3(mesh.vertices[b as usize]);
            assert!((g[k] - 1.0 / r).abs() < 1e-12);
        }
        // Zero density gives zero data.
        let g0 = boundary_values(mesh, &mass, &vec![0.0; rho.len()], BoundaryOrder::Monopole)
            .unwrap();
        assert!(g0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn monopole_matches_direct_sum_for_two_lumps() {
        let h = build_hierarchy(&MeshConfig {
            initial_cells_per_axis: 2,
            local_refine_rounds: 3,
            global_refine_rounds: 0,
            nucleus_positions: vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
            ..MeshConfig::default()
        })
        .unwrap();
        let mesh = h.finest();
        let mass = crate::operators::assemble_mass(mesh).unwrap();
        let mirror = mesh.mirror.clone().unwrap();
        // Two unit lumps at mirrored vertices near ±R e1.
        let vplus = mesh
            .vertices
            .iter()
            .enumerate()
            .filter(|(i, _)| !mesh.is_boundary[*i])
            .min_by(|(_, a), (_, b)| {
                dist3(**a, [1.0, 0.0, 0.0])
                    .partial_cmp(&dist3(**b, [1.0, 0.0, 0.0]))
                    .unwrap()
            })
            .unwrap()
            .0;
        let vminus = mirror[vplus] as usize;
        let lumped = crate::operators::lumped_mass(&mass);
        let mut rho = vec![0.0; mesh.vertex_count()];
        rho[vplus] = 1.0 / lumped[vplus];
        rho[vminus] = 1.0 / lumped[vminus];
        let g = boundary_values(mesh, &mass, &rho, BoundaryOrder::Monopole).unwrap();

        // Direct summation oracle over the lumped charges.
        let q = mass.apply(&rho);
        let support_radius = q
            .iter()
            .zip(&mesh.vertices)
            .filter(|(qi, _)| qi.abs() > 1e-14)
            .map(|(_, p)| crate::util::norm3(*p))
            .fold(0.0f64, f64::max);
        let l = mesh.half_extent;
        let tol = 2.0 * (support_radius / l).powi(2);
        for (k, &b) in mesh.boundary_vertices.iter().enumerate() {
            let xb = mesh.vertices[b as usize];
            let direct: f64 = q
                .iter()
                .zip(&mesh.vertices)
                .filter(|(qi, _)| qi.abs() > 1e-14)
                .map(|(qi, p)| qi / dist3(xb, *p))
                .sum();
            assert!(
                (g[k] - direct).abs() / direct.abs() <= tol,
                "boundary vertex {b}: monopole {} vs direct {direct}",
                g[k]
            );
        }
    }

    #[test]
    fn hartree_energy_gradient_matches_finite_differences() {
        // E(q) = 1/2 qᵀ K q has exact gradient v̂ = 1/2 (K + Kᵀ) q; checks
        // that the boundary-map adjoint is the true transpose.
        for order in [BoundaryOrder::Monopole, BoundaryOrder::Dipole] {
            let h = hier(2, 0);
            let mesh = h.finest();
            let c = ctx(&h, order);
            let rho = interpolate(mesh, |p| (-0.6 * dot3(p, p)).exp());
            let q = c.mass().apply(&rho);
            let (_, v_hat) = c.sym_potential(&q).unwrap();
            let mut rng = SplitMix64::new(77);
            let mut delta = vec![0.0; q.len()];
            rng.fill(&mut delta);
            for (i, d) in delta.iter_mut().enumerate() {
                if mesh.is_boundary[i] {
                    *d = 0.0;
                }
            }
            let t = 1e-5;
            let e_at = |qq: &Vec<f64>| -> f64 {
                let (vv, _) = c.solve_load(qq).unwrap();
                0.5 * dot(qq, &vv)
            };
            let qp: Vec<f64> = q.iter().zip(&delta).map(|(x, d)| x + t * d).collect();
            let qm: Vec<f64> = q.iter().zip(&delta).map(|(x, d)| x - t * d).collect();
            let fd = (e_at(&qp) - e_at(&qm)) / (2.0 * t);
            let an = dot(&v_hat, &delta);
            assert!(
                (fd - an).abs() <= 1e-6 * an.abs().max(1e-3),
                "{order:?}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn symmetrized_kernel_is_symmetric() {
        let h = hier(2, 0);
        let mesh = h.finest();
        let c = hartree_context(
            &h,
            SolverConfig {
                rtol: 1e-12,
                ..SolverConfig::default()
            },
            BoundaryOrder::Dipole,
        )
        .unwrap();
        let rho0 = interpolate(mesh, |p| (-0.6 * dot3(p, p)).exp());
        let q0 = c.mass().apply(&rho0);
        let mut rng = SplitMix64::new(5);
        let n = mesh.vertex_count();
        let mut u = vec![0.0; n];
        let mut w = vec![0.0; n];
        rng.fill(&mut u);
        rng.fill(&mut w);
        let su = c.sym_kernel_apply(&q0, &u).unwrap();
        let sw = c.sym_kernel_apply(&q0, &w).unwrap();
        let a = dot(&w, &su);
        let b = dot(&u, &sw);
        assert!((a - b).abs() <= 1e-9 * (a.abs() + b.abs()).max(1.0));
    }

    #[test]
    fn hartree_energy_uses_the_shared_expression() {
        let h = hier(1, 0);
        let mesh = h.finest();
        let c = ctx(&h, BoundaryOrder::Dipole);
        let rho = interpolate(mesh, |p| (-0.5 * dot3(p, p)).exp());
        let (v, _) = c.solve(&rho).unwrap();
        let direct = 0.5 * dot(&rho, &c.mass.apply(&v));
        assert_eq!(c.energy(&rho, &v), direct);
    }
}
