use xlda::hartree::BoundaryOrder;
use xlda::linsolve::SolverConfig;
use xlda::mesh::MeshConfig;
use xlda::scf::*;

#[test]
fn probe() {
    let local = 8usize;
    let h_min = 25.0 * 3.0f64.sqrt() / 2.0f64.powi(local as i32);
    let sys = System::new(
        &MeshConfig {
            initial_cells_per_axis: 2,
            local_refine_rounds: local,
            global_refine_rounds: 0,
            ..MeshConfig::default()
        },
        1.0,
        Some(0.5 * h_min),
        SolverConfig::default(),
        BoundaryOrder::Dipole,
    )
    .unwrap();
    let st = initial_guess(&sys, InitKind::Antiferro, 1.0, 0.6, 0.0).unwrap();
    let rho = density(&st);
    let (v, _) = sys.hartree.solve(&rho).unwrap();
    let kappa = sys.hartree.density_gradient(&rho, &v).unwrap();
    // Effective nodal potential estimate: kappa / lumped vs v, and V_nuc.
    let mesh = sys.mesh();
    let c = &st.c_plus;
    let mut f = sys.m_vnuc.apply(c);
    for i in 0..f.len() {
        f[i] = -(f[i] + c[i] * kappa[i]);
    }
    for &b in &mesh.boundary_vertices {
        f[b as usize] = 0.0;
    }
    let (pt, _) = helmholtz_update(&sys, -0.6, &f, c).unwrap();
    // top |pt| vertices
    let mut idx: Vec<usize> = (0..pt.len()).collect();
    idx.sort_by(|&a, &b| pt[b].abs().partial_cmp(&pt[a].abs()).unwrap());
    for &i in idx.iter().take(8) {
        let p = mesh.vertices[i];
        eprintln!(
            "phi~[{i}] = {:+.4} at ({:+.3},{:+.3},{:+.3})  Vnuc {:+.3} vH {:+.3} kappa/lump {:+.3} c {:+.4} f {:+.3e} lump {:.3e}",
            pt[i], p[0], p[1], p[2], sys.v_nuc[i], v[i], kappa[i] / sys.lumped[i], c[i], f[i], sys.lumped[i]
        );
    }
    // where is f largest?
    idx.sort_by(|&a, &b| f[b].abs().partial_cmp(&f[a].abs()).unwrap());
    eprintln!("--- top |f| ---");
    for &i in idx.iter().take(8) {
        let p = mesh.vertices[i];
        eprintln!(
            "f[{i}] = {:+.3e} at ({:+.3},{:+.3},{:+.3}) c {:+.4} Vnuc {:+.3} kappa/lump {:+.3}",
            f[i], p[0], p[1], p[2], c[i], sys.v_nuc[i], kappa[i] / sys.lumped[i]
        );
    }
}
