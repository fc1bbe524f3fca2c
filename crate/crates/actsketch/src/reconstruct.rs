//! Activation reconstruction from EMA sketches.
//!
//! Reconstruction runs in two stages. Thin QR factorizations
//! `Y_s = Q_Y R_Y` and `X_s = Q_X R_X` expose the sketched output and input
//! feature bases; the interaction sketch is then resolved against them:
//!
//! ```text
//! C_inter = argmin‖Q_Y C − Z_s‖_F            (= Q_Yᵀ Z_s)
//! Xᵀ_s    = P_X R'_X                         (thin QR, P_X square for d ≥ k)
//! C       = argmin‖P_X C − C_interᵀ‖_F       (= P_Xᵀ C_interᵀ)
//! G̃       = Q_Y C Q_Xᵀ                       (d × d feature structure)
//! ```
//!
//! and the batch-space activations are `Ã = Ω Y_s† G̃`. The closed forms
//! above are exactly the stated least-squares optima because `Q_Y` and
//! `P_X` have orthonormal columns.
//!
//! [`reconstruct_fused`] evaluates `((Ω Y_s†) Q_Y) C Q_Xᵀ` left to right,
//! which never materializes the `d × d` matrix `G̃` — at width 512 that is
//! the difference between kilobyte-scale intermediates and a 2 MB buffer
//! per layer per step.

use nalgebra::DMatrix;

use crate::control::{ensure_finite, pinv};
use crate::ema::{LayerSketchState, NnProjectionSet};
use crate::error::{Error, Result};

/// Reconstructed batch activations plus the least-squares residuals of the
/// two stages.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    /// `N_b × d` reconstructed batch activations.
    pub a_tilde: DMatrix<f64>,
    /// `‖Q_Y C_inter − Z_s‖_F`.
    pub residual_stage1: f64,
    /// `‖P_X C − C_interᵀ‖_F`.
    pub residual_stage2: f64,
}

/// Feature-space structure recovered from one layer's sketches.
#[derive(Debug, Clone)]
pub struct FeatureStructure {
    /// `d × d` feature structure `Q_Y C Q_Xᵀ`.
    pub g_tilde: DMatrix<f64>,
    /// Core coefficient matrix.
    pub c: DMatrix<f64>,
    /// Orthonormal output-side basis.
    pub q_y: DMatrix<f64>,
    /// Orthonormal input-side basis.
    pub q_x: DMatrix<f64>,
    pub residual_stage1: f64,
    pub residual_stage2: f64,
}

fn check_state(state: &LayerSketchState) -> Result<()> {
    if state.n_updates == 0 {
        return Err(Error::ZeroSketch(
            "reconstruction from a never-updated sketch state; warmup must use exact activations".into(),
        ));
    }
    if state.z_s.ncols() != state.x_s.ncols() {
        return Err(Error::Config(format!(
            "reconstruction requires k = s, got k={} s={}",
            state.x_s.ncols(),
            state.z_s.ncols()
        )));
    }
    ensure_finite("X_s", &state.x_s)?;
    ensure_finite("Y_s", &state.y_s)?;
    ensure_finite("Z_s", &state.z_s)?;
    Ok(())
}

/// Pieces shared by the naive and fused paths: everything except `G̃`.
fn stages(state: &LayerSketchState) -> Result<FeatureStructurePieces> {
    check_state(state)?;
    let q_y = state.y_s.clone().qr().q(); // d × min(d, k)
    let q_x = state.x_s.clone().qr().q(); // d × min(d, k)
    let c_inter = q_y.transpose() * &state.z_s; // min(d,k) × s
    let residual_stage1 = (&q_y * &c_inter - &state.z_s).norm();
    let p_x = state.x_s.transpose().qr().q(); // k × min(k, d)
    let c = p_x.transpose() * c_inter.transpose(); // min(k,d) × min(d,k)
    let residual_stage2 = (&p_x * &c - c_inter.transpose()).norm();
    Ok(FeatureStructurePieces { q_y, q_x, c, residual_stage1, residual_stage2 })
}

struct FeatureStructurePieces {
    q_y: DMatrix<f64>,
    q_x: DMatrix<f64>,
    c: DMatrix<f64>,
    residual_stage1: f64,
    residual_stage2: f64,
}

/// Recovers the `d × d` feature structure `G̃` from a layer's sketches.
///
/// Requires at least one EMA update; zero sketches have no invertible
/// structure and must be handled by the caller's warmup path.
pub fn reconstruct_feature_structure(state: &LayerSketchState) -> Result<FeatureStructure> {
    let p = stages(state)?;
    let g_tilde = &p.q_y * &p.c * p.q_x.transpose();
    Ok(FeatureStructure {
        g_tilde,
        c: p.c,
        q_y: p.q_y,
        q_x: p.q_x,
        residual_stage1: p.residual_stage1,
        residual_stage2: p.residual_stage2,
    })
}

/// Projects a recovered feature structure to batch space:
/// `Ã = Ω Y_s† G̃`.
pub fn project_to_batch(
    state: &LayerSketchState,
    proj: &NnProjectionSet,
    structure: &FeatureStructure,
) -> Result<ReconstructionResult> {
    check_state(state)?;
    let y_pinv = pinv(&state.y_s, None)?; // k × d
    let a_tilde = &proj.omega * &y_pinv * &structure.g_tilde; // N_b × d
    Ok(ReconstructionResult {
        a_tilde,
        residual_stage1: structure.residual_stage1,
        residual_stage2: structure.residual_stage2,
    })
}

/// Fused reconstruction `((Ω Y_s†) Q_Y) C Q_Xᵀ` that never forms `G̃`.
///
/// Agrees with the naive [`reconstruct_feature_structure`] +
/// [`project_to_batch`] path to 1e-10 max-abs; only the association order
/// differs.
pub fn reconstruct_fused(state: &LayerSketchState, proj: &NnProjectionSet) -> Result<ReconstructionResult> {
    let p = stages(state)?;
    let y_pinv = pinv(&state.y_s, None)?; // k × d
    let lift = &proj.omega * &y_pinv; // N_b × d
    let a_tilde = ((lift * &p.q_y) * &p.c) * p.q_x.transpose(); // N_b × d
    Ok(ReconstructionResult {
        a_tilde,
        residual_stage1: p.residual_stage1,
        residual_stage2: p.residual_stage2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ema::{ema_update, init_layer_sketch, make_nn_projections, SketchConfig};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::control::gaussian_matrix(&mut rng, rows, cols)
    }

    fn warm_state(seed: u64, d: usize, cfg: &SketchConfig, proj: &crate::ema::NnProjectionSet, steps: usize) -> LayerSketchState {
        let mut st = init_layer_sketch(cfg, d).unwrap();
        for i in 0..steps {
            let a_prev = random_matrix(seed + 2 * i as u64, cfg.batch_size, d);
            let a_curr = random_matrix(seed + 2 * i as u64 + 1, cfg.batch_size, d);
            ema_update(&mut st, proj, 1, &a_prev, &a_curr, cfg.beta).unwrap();
        }
        st
    }

    #[test]
    fn zero_state_rejected() {
        let cfg = SketchConfig::new(2, 0.9, 1, 8).unwrap();
        let st = init_layer_sketch(&cfg, 10).unwrap();
        assert!(matches!(
            reconstruct_feature_structure(&st),
            Err(Error::ZeroSketch(_))
        ));
    }

    #[test]
    fn stage1_exact_when_z_in_span() {
        // Z_s constructed inside the column span of Q_Y -> stage-1 residual ~ 0.
        let cfg = SketchConfig::new(2, 0.9, 1, 8).unwrap();
        let proj = make_nn_projections(5, &cfg, 1);
        let mut st = warm_state(10, 12, &cfg, &proj, 6);
        let q_y = st.y_s.clone().qr().q();
        st.z_s = &q_y * random_matrix(99, q_y.ncols(), cfg.s);
        let fs = reconstruct_feature_structure(&st).unwrap();
        assert!(fs.residual_stage1 <= 1e-10, "residual {}", fs.residual_stage1);
    }

    #[test]
    fn stage1_closed_form_matches_normal_equations_oracle() {
        // Oracle: solve (Q^T Q) C = Q^T Z explicitly.
        let cfg = SketchConfig::new(3, 0.8, 1, 10).unwrap();
        let proj = make_nn_projections(6, &cfg, 1);
        let st = warm_state(20, 16, &cfg, &proj, 5);
        let q_y = st.y_s.clone().qr().q();
        let gram = q_y.transpose() * &q_y;
        let rhs = q_y.transpose() * &st.z_s;
        let oracle = gram.lu().solve(&rhs).unwrap();
        let closed = q_y.transpose() * &st.z_s;
        assert!((closed - oracle).abs().max() <= 1e-10);
    }

    #[test]
    fn stage1_residual_equals_projection_theorem() {
        let cfg = SketchConfig::new(2, 0.9, 1, 8).unwrap();
        let proj = make_nn_projections(7, &cfg, 1);
        let st = warm_state(30, 14, &cfg, &proj, 4);
        let fs = reconstruct_feature_structure(&st).unwrap();
        let qqt = &fs.q_y * fs.q_y.transpose();
        let eye = DMatrix::<f64>::identity(14, 14);
        let expected = ((eye - qqt) * &st.z_s).norm();
        assert!((fs.residual_stage1 - expected).abs() <= 1e-10);
    }

    #[test]
    fn g_tilde_rank_bounded_by_k() {
        let cfg = SketchConfig::new(2, 0.9, 1, 8).unwrap();
        let proj = make_nn_projections(8, &cfg, 1);
        let st = warm_state(40, 20, &cfg, &proj, 5);
        let fs = reconstruct_feature_structure(&st).unwrap();
        let sv = fs.g_tilde.svd(false, false).singular_values;
        let smax = sv.max();
        let numerical_rank = sv.iter().filter(|s| **s > 1e-10 * smax).count();
        assert!(numerical_rank <= cfg.k);
    }

    #[test]
    fn orthonormal_factors() {
        let cfg = SketchConfig::new(3, 0.9, 1, 10).unwrap();
        let proj = make_nn_projections(9, &cfg, 1);
        let st = warm_state(50, 24, &cfg, &proj, 5);
        let fs = reconstruct_feature_structure(&st).unwrap();
        let k = cfg.k;
        let eye = DMatrix::<f64>::identity(k, k);
        assert!((fs.q_y.transpose() * &fs.q_y - &eye).abs().max() <= 1e-10);
        assert!((fs.q_x.transpose() * &fs.q_x - &eye).abs().max() <= 1e-10);
        let p_x = st.x_s.transpose().qr().q();
        assert!((p_x.transpose() * &p_x - &eye).abs().max() <= 1e-10);
    }

    #[test]
    fn zero_omega_gives_zero_batch_projection() {
        let cfg = SketchConfig::new(2, 0.9, 1, 8).unwrap();
        let mut proj = make_nn_projections(11, &cfg, 1);
        let st = warm_state(60, 12, &cfg, &proj, 4);
        let fs = reconstruct_feature_structure(&st).unwrap();
        proj.omega = DMatrix::zeros(cfg.batch_size, cfg.k);
        let res = project_to_batch(&st, &proj, &fs).unwrap();
        assert_eq!(res.a_tilde.abs().max(), 0.0);
    }

    #[test]
    fn fused_matches_naive_across_widths() {
        for &d in &[8usize, 64, 512] {
            let cfg = SketchConfig::new(2, 0.9, 1, 16).unwrap();
            let proj = make_nn_projections(70 + d as u64, &cfg, 1);
            let st = warm_state(70 + d as u64, d, &cfg, &proj, 4);
            let fs = reconstruct_feature_structure(&st).unwrap();
            let naive = project_to_batch(&st, &proj, &fs).unwrap();
            let fused = reconstruct_fused(&st, &proj).unwrap();
            let diff = (&naive.a_tilde - &fused.a_tilde).abs().max();
            assert!(diff <= 1e-10, "d={d} diff={diff}");
            assert_eq!(fused.a_tilde.shape(), (16, d));
        }
    }

    #[test]
    fn degenerate_width_one_layer() {
        // d=1 with k=3: wide QR shapes collapse but both paths stay finite
        // and equal.
        let cfg = SketchConfig::new(1, 0.9, 1, 8).unwrap();
        let proj = make_nn_projections(81, &cfg, 1);
        let st = warm_state(82, 1, &cfg, &proj, 4);
        let fs = reconstruct_feature_structure(&st).unwrap();
        let naive = project_to_batch(&st, &proj, &fs).unwrap();
        let fused = reconstruct_fused(&st, &proj).unwrap();
        assert!(naive.a_tilde.iter().all(|v| v.is_finite()));
        assert!((&naive.a_tilde - &fused.a_tilde).abs().max() <= 1e-10);
    }

    #[test]
    fn uniform_sketch_scaling_leaves_a_tilde_invariant() {
        // Scaling X_s, Y_s, Z_s by c > 0 cancels exactly: Q factors are
        // scale-free, pinv(cY) = (1/c) pinv(Y), and C scales by c, so
        // A_tilde is unchanged.
        let cfg = SketchConfig::new(2, 0.9, 1, 12).unwrap();
        let proj = make_nn_projections(91, &cfg, 1);
        let st = warm_state(92, 32, &cfg, &proj, 5);
        let base = reconstruct_fused(&st, &proj).unwrap();
        let c = 3.75;
        let mut scaled = st.clone();
        scaled.x_s *= c;
        scaled.y_s *= c;
        scaled.z_s *= c;
        let res = reconstruct_fused(&scaled, &proj).unwrap();
        let rel = (&res.a_tilde - &base.a_tilde).norm() / base.a_tilde.norm();
        assert!(rel <= 1e-9, "relative change {rel}");
    }

    #[test]
    fn output_shape_matches_batch_config() {
        let cfg = SketchConfig::new(2, 0.95, 1, 128).unwrap();
        let proj = make_nn_projections(101, &cfg, 1);
        let st = warm_state(102, 512, &cfg, &proj, 3);
        let res = reconstruct_fused(&st, &proj).unwrap();
        assert_eq!(res.a_tilde.shape(), (128, 512));
    }
}
