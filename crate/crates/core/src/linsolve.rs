//! Conjugate-gradient solves for the constrained SPD systems, with an
//! optional geometric multigrid preconditioner.
//!
//! The V-cycle is built on the mesh refinement hierarchy: one forward
//! Gauss-Seidel sweep down, an exact (dense Cholesky) solve on the coarsest
//! level, one backward sweep up, with P1 interpolation transfers taken
//! straight from the vertex lineage. Pre/post sweeps are adjoints of each
//! other and restriction is the transpose of prolongation, so the cycle is a
//! symmetric positive definite preconditioner and CG theory applies.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::operators::SparseOperator;
use crate::util::{axpy, dot, norm2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecondKind {
    None,
    Diagonal,
    Multigrid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative residual target.
    pub rtol: f64,
    pub max_iterations: usize,
    pub preconditioner: PrecondKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            max_iterations: 10_000,
            preconditioner: PrecondKind::Multigrid,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.rtol < 1.0) {
            return Err(Error::Config("solver rtol must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Outcome of one linear solve. The reported residual is always recomputed
/// from the final iterate, never taken from the CG recurrence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub breakdown: bool,
    pub converged: bool,
}

pub enum Preconditioner {
    Identity,
    Diagonal(Vec<f64>),
    Multigrid(Box<Multigrid>),
}

impl Preconditioner {
    pub fn diagonal(a: &SparseOperator) -> Preconditioner {
        let inv = a
            .diag()
            .into_iter()
            .map(|d| if d != 0.0 { 1.0 / d } else { 0.0 })
            .collect();
        Preconditioner::Diagonal(inv)
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        match self {
            Preconditioner::Identity => r.to_vec(),
            Preconditioner::Diagonal(inv) => r.iter().zip(inv).map(|(x, d)| x * d).collect(),
            Preconditioner::Multigrid(mg) => mg.apply(r),
        }
    }
}

/// Preconditioned conjugate gradients on an SPD operator with constrained
/// boundary rows. Non-SPD behavior (`p·Ap <= 0`) aborts with a diagnostic;
/// hitting the iteration cap returns the best iterate flagged unconverged.
pub fn cg_solve(
    a: &SparseOperator,
    b: &[f64],
    x0: &[f64],
    pc: &Preconditioner,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    cfg.validate()?;
    let n = a.dim();
    if b.len() != n || x0.len() != n {
        return Err(Error::Invalid("cg_solve dimension mismatch".into()));
    }
    if b.iter().chain(x0.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("cg_solve inputs must be finite".into()));
    }
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveReport {
                iterations: 0,
                relative_residual: 0.0,
                breakdown: false,
                converged: true,
            },
        ));
    }

    let mut x = x0.to_vec();
    let mut r = b.to_vec();
    let mut ax = vec![0.0; n];
    a.matvec(&x, &mut ax);
    for (ri, ai) in r.iter_mut().zip(&ax) {
        *ri -= ai;
    }
    let mut z = pc.apply(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    let true_residual = |x: &[f64], ap: &mut Vec<f64>| -> f64 {
        a.matvec(x, ap);
        let mut s = 0.0;
        for i in 0..n {
            let d = b[i] - ap[i];
            s += d * d;
        }
        s.sqrt() / bnorm
    };

    for iter in 0..cfg.max_iterations {
        if norm2(&r) <= cfg.rtol * bnorm {
            // The recurrence residual drifts from the true one; recompute
            // before declaring victory.
            let res = true_residual(&x, &mut ap);
            if res <= cfg.rtol {
                return Ok((
                    x,
                    SolveReport {
                        iterations: iter,
                        relative_residual: res,
                        breakdown: false,
                        converged: true,
                    },
                ));
            }
            a.matvec(&x, &mut ap);
            for i in 0..n {
                r[i] = b[i] - ap[i];
            }
            z = pc.apply(&r);
            p = z.clone();
            rz = dot(&r, &z);
        }
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Solver {
                reason: format!("non-SPD system detected: p·Ap = {pap:.3e} at iteration {iter}"),
                iterations: iter,
                residual: true_residual(&x, &mut ap),
            });
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        z = pc.apply(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    let res = true_residual(&x, &mut ap);
    Ok((
        x,
        SolveReport {
            iterations: cfg.max_iterations,
            relative_residual: res,
            breakdown: false,
            converged: res <= cfg.rtol,
        },
    ))
}

// ---------------------------------------------------------------------------
// Geometric multigrid
// ---------------------------------------------------------------------------

struct MgLevel {
    a: SparseOperator,
    /// Vertex lineage to the previous (coarser) level; empty on level 0.
    parents: Vec<Option<(u32, u32)>>,
    coarse_n: usize,
    boundary: Vec<bool>,
}

pub struct Multigrid {
    levels: Vec<MgLevel>,
    coarse: Cholesky<f64, Dyn>,
}

impl Multigrid {
    /// Builds the V-cycle from per-level constrained operators. Meshes must
    /// form a nested refinement chain (each level's inherited vertices are a
    /// prefix matching the previous level).
    pub fn new(meshes: &[Arc<Mesh>], ops: Vec<SparseOperator>) -> Result<Multigrid> {
        if meshes.is_empty() || meshes.len() != ops.len() {
            return Err(Error::Invalid(
                "multigrid needs one operator per hierarchy level".into(),
            ));
        }
        for (l, mesh) in meshes.iter().enumerate() {
            if ops[l].dim() != mesh.vertex_count() {
                return Err(Error::Invalid(format!(
                    "level {l} operator dimension {} does not match mesh ({} vertices)",
                    ops[l].dim(),
                    mesh.vertex_count()
                )));
            }
            if l > 0 {
                let coarse_n = meshes[l - 1].vertex_count();
                if mesh.vertex_count() < coarse_n {
                    return Err(Error::Invalid("hierarchy is not nested".into()));
                }
                for i in 0..mesh.vertex_count() {
                    let ok = if i < coarse_n {
                        mesh.vertex_parents[i].is_none()
                            && mesh.vertices[i] == meshes[l - 1].vertices[i]
                    } else {
                        matches!(mesh.vertex_parents[i], Some((a, b)) if (a as usize) < i && (b as usize) < i)
                    };
                    if !ok {
                        return Err(Error::Invalid(format!(
                            "hierarchy is not nested at level {l}, vertex {i}"
                        )));
                    }
                }
            }
        }

        let n0 = ops[0].dim();
        let mut dense = DMatrix::zeros(n0, n0);
        let p0 = ops[0].pattern.clone();
        for i in 0..n0 {
            for k in p0.row_ptr[i]..p0.row_ptr[i + 1] {
                dense[(i, p0.col[k] as usize)] = ops[0].values[k];
            }
        }
        let coarse = Cholesky::new(dense).ok_or_else(|| Error::Solver {
            reason: "coarse level is not SPD".into(),
            iterations: 0,
            residual: f64::NAN,
        })?;

        let levels = meshes
            .iter()
            .zip(ops)
            .enumerate()
            .map(|(l, (mesh, a))| MgLevel {
                a,
                parents: if l > 0 {
                    mesh.vertex_parents.clone()
                } else {
                    Vec::new()
                },
                coarse_n: if l > 0 {
                    meshes[l - 1].vertex_count()
                } else {
                    0
                },
                boundary: mesh.is_boundary.clone(),
            })
            .collect();
        Ok(Multigrid { levels, coarse })
    }

    /// One V(1,1) cycle applied to a residual; linear and symmetric.
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        self.vcycle(self.levels.len() - 1, r)
    }

    fn vcycle(&self, l: usize, r: &[f64]) -> Vec<f64> {
        if l == 0 {
            let sol = self.coarse.solve(&DVector::from_column_slice(r));
            return sol.as_slice().to_vec();
        }
        let level = &self.levels[l];
        let n = level.a.dim();
        let mut x = vec![0.0; n];
        gauss_seidel_sweep(&level.a, r, &mut x, true);

        let mut res = vec![0.0; n];
        level.a.matvec(&x, &mut res);
        for i in 0..n {
            res[i] = r[i] - res[i];
        }
        let mut rc = restrict(&res, &level.parents, level.coarse_n);
        for (i, v) in rc.iter_mut().enumerate() {
            if self.levels[l - 1].boundary[i] {
                *v = 0.0;
            }
        }
        let xc = self.vcycle(l - 1, &rc);
        let correction = prolong(&xc, &level.parents, n);
        for i in 0..n {
            if !level.boundary[i] {
                x[i] += correction[i];
            }
        }
        gauss_seidel_sweep(&level.a, r, &mut x, false);
        x
    }
}

fn gauss_seidel_sweep(a: &SparseOperator, b: &[f64], x: &mut [f64], forward: bool) {
    let p = &a.pattern;
    let n = p.n;
    let order: Box<dyn Iterator<Item = usize>> = if forward {
        Box::new(0..n)
    } else {
        Box::new((0..n).rev())
    };
    for i in order {
        let mut sum = b[i];
        let mut diag = 0.0;
        for k in p.row_ptr[i]..p.row_ptr[i + 1] {
            let j = p.col[k] as usize;
            if j == i {
                diag = a.values[k];
            } else {
                sum -= a.values[k] * x[j];
            }
        }
        if diag != 0.0 {
            x[i] = sum / diag;
        }
    }
}

fn prolong(coarse: &[f64], parents: &[Option<(u32, u32)>], fine_n: usize) -> Vec<f64> {
    let mut out = vec![0.0; fine_n];
    out[..coarse.len()].copy_from_slice(coarse);
    for i in coarse.len()..fine_n {
        let (a, b) = parents[i].expect("fine vertex has parents");
        out[i] = 0.5 * (out[a as usize] + out[b as usize]);
    }
    out
}

fn restrict(fine: &[f64], parents: &[Option<(u32, u32)>], coarse_n: usize) -> Vec<f64> {
    let mut work = fine.to_vec();
    for i in (coarse_n..fine.len()).rev() {
        let (a, b) = parents[i].expect("fine vertex has parents");
        let w = 0.5 * work[i];
        work[a as usize] += w;
        work[b as usize] += w;
    }
    work.truncate(coarse_n);
    work
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_hierarchy, MeshConfig, MeshHierarchy};
    use crate::operators::{assemble_mass, assemble_stiffness, SparseOperator};
    use crate::util::SplitMix64;

    fn hierarchy(local: usize, global: usize) -> MeshHierarchy {
        build_hierarchy(&MeshConfig {
            initial_cells_per_axis: 2,
            local_refine_rounds: local,
            global_refine_rounds: global,
            ..MeshConfig::default()
        })
        .unwrap()
    }

    fn poisson_ops(h: &MeshHierarchy) -> Vec<SparseOperator> {
        h.levels
            .iter()
            .map(|m| {
                assemble_stiffness(m)
                    .unwrap()
                    .scaled(2.0)
                    .constrained(&m.is_boundary)
            })
            .collect()
    }

    #[test]
    fn cg_recovers_known_solution() {
        let h = hierarchy(1, 0);
        let mesh = h.finest();
        let s = assemble_mass(mesh).unwrap();
        let ones = vec![1.0; mesh.vertex_count()];
        let b = s.apply(&ones);
        let cfg = SolverConfig {
            rtol: 1e-10,
            preconditioner: PrecondKind::Diagonal,
            ..SolverConfig::default()
        };
        let (x, rep) = cg_solve(&s, &b, &vec![0.0; b.len()], &Preconditioner::diagonal(&s), &cfg)
            .unwrap();
        assert!(rep.converged);
        for v in &x {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cg_contract_residual_is_recomputed() {
        let h = hierarchy(2, 0);
        let mesh = h.finest();
        let t = assemble_stiffness(mesh).unwrap();
        let s = assemble_mass(mesh).unwrap();
        let a = t.add_scaled(&s, 1.0).constrained(&mesh.is_boundary);
        let mut rng = SplitMix64::new(5);
        let mut b = vec![0.0; mesh.vertex_count()];
        rng.fill(&mut b);
        let cfg = SolverConfig {
            rtol: 1e-10,
            preconditioner: PrecondKind::Diagonal,
            ..SolverConfig::default()
        };
        let (x, rep) =
            cg_solve(&a, &b, &vec![0.0; b.len()], &Preconditioner::diagonal(&a), &cfg).unwrap();
        assert!(rep.converged);
        let r = {
            let ax = a.apply(&x);
            let mut s2 = 0.0;
            for i in 0..b.len() {
                s2 += (b[i] - ax[i]).powi(2);
            }
            s2.sqrt() / norm2(&b)
        };
        assert!(r <= 1e-10, "true residual {r}");
        assert!((r - rep.relative_residual).abs() < 1e-12);
    }

    #[test]
    fn cg_detects_non_spd() {
        let h = hierarchy(0, 0);
        let mesh = h.finest();
        let t = assemble_stiffness(mesh).unwrap();
        let s = assemble_mass(mesh).unwrap();
        // T - 5 S is indefinite without constraints.
        let a = t.add_scaled(&s, -5.0);
        let mut rng = SplitMix64::new(9);
        let mut b = vec![0.0; mesh.vertex_count()];
        rng.fill(&mut b);
        let cfg = SolverConfig {
            preconditioner: PrecondKind::None,
            ..SolverConfig::default()
        };
        match cg_solve(&a, &b, &vec![0.0; b.len()], &Preconditioner::Identity, &cfg) {
            Err(Error::Solver { .. }) => {}
            other => panic!("expected non-SPD detection, got {other:?}"),
        }
    }

    #[test]
    fn diagonal_preconditioner_beats_identity_on_helmholtz() {
        let h = hierarchy(4, 0);
        let mesh = h.finest();
        let t = assemble_stiffness(mesh).unwrap();
        let s = assemble_mass(mesh).unwrap();
        // Helmholtz system (T - eps S) with eps = -0.5.
        let a = t.add_scaled(&s, 0.5).constrained(&mesh.is_boundary);
        let mut rng = SplitMix64::new(13);
        let mut b = vec![0.0; mesh.vertex_count()];
        rng.fill(&mut b);
        let cfg = SolverConfig {
            rtol: 1e-8,
            preconditioner: PrecondKind::None,
            ..SolverConfig::default()
        };
        let (_, plain) =
            cg_solve(&a, &b, &vec![0.0; b.len()], &Preconditioner::Identity, &cfg).unwrap();
        let (_, diag) =
            cg_solve(&a, &b, &vec![0.0; b.len()], &Preconditioner::diagonal(&a), &cfg).unwrap();
        assert!(plain.converged && diag.converged);
        assert!(
            plain.iterations >= 2 * diag.iterations,
            "identity {} vs diagonal {}",
            plain.iterations,
            diag.iterations
        );
    }

    #[test]
    fn one_level_multigrid_is_direct_solve() {
        let h = hierarchy(0, 0);
        let ops = poisson_ops(&h);
        let a = ops[0].clone();
        let mg = Multigrid::new(&h.levels[..1], ops).unwrap();
        let mut rng = SplitMix64::new(21);
        let mut r = vec![0.0; a.dim()];
        rng.fill(&mut r);
        let z = mg.apply(&r);
        let az = a.apply(&z);
        for i in 0..r.len() {
            assert!((az[i] - r[i]).abs() < 1e-9, "direct solve defect at {i}");
        }
    }

    #[test]
    fn multigrid_application_is_symmetric() {
        let h = hierarchy(2, 1);
        let ops = poisson_ops(&h);
        let mg = Multigrid::new(&h.levels, ops).unwrap();
        let n = h.finest().vertex_count();
        let mut rng = SplitMix64::new(33);
        for _ in 0..5 {
            let mut u = vec![0.0; n];
            let mut v = vec![0.0; n];
            rng.fill(&mut u);
            rng.fill(&mut v);
            let mu = mg.apply(&u);
            let mv = mg.apply(&v);
            let a = dot(&u, &mv);
            let b = dot(&mu, &v);
            assert!(
                (a - b).abs() <= 1e-10 * (a.abs() + b.abs()).max(1.0),
                "asymmetry {a} vs {b}"
            );
        }
    }

    #[test]
    fn multigrid_cg_iterations_are_mesh_independent() {
        let mut counts = Vec::new();
        for global in [1usize, 2] {
            let h = hierarchy(2, global);
            let ops = poisson_ops(&h);
            let a = ops.last().unwrap().clone();
            let mg = Multigrid::new(&h.levels, ops).unwrap();
            let mesh = h.finest();
            let mut b = vec![0.0; mesh.vertex_count()];
            // Smooth interior load.
            for (i, p) in mesh.vertices.iter().enumerate() {
                if !mesh.is_boundary[i] {
                    b[i] = (-0.05 * crate::util::dot3(*p, *p)).exp();
                }
            }
            let cfg = SolverConfig {
                rtol: 1e-8,
                preconditioner: PrecondKind::Multigrid,
                ..SolverConfig::default()
            };
            let (_, rep) = cg_solve(
                &a,
                &b,
                &vec![0.0; b.len()],
                &Preconditioner::Multigrid(Box::new(mg)),
                &cfg,
            )
            .unwrap();
            assert!(rep.converged);
            counts.push(rep.iterations as f64);
        }
        assert!(
            counts[1] < 1.5 * counts[0],
            "V-cycle CG grew too fast: {counts:?}"
        );
    }

    #[test]
    fn multigrid_rejects_non_nested_hierarchy() {
        let h1 = hierarchy(1, 0);
        let h2 = hierarchy(2, 0);
        // Mismatched chain: coarse level from one ladder, fine from another.
        let meshes = vec![h2.levels[1].clone(), h1.levels[1].clone()];
        let ops = meshes
            .iter()
            .map(|m| {
                assemble_stiffness(m)
                    .unwrap()
                    .scaled(2.0)
                    .constrained(&m.is_boundary)
            })
            .collect();
        assert!(Multigrid::new(&meshes, ops).is_err());
    }
}
