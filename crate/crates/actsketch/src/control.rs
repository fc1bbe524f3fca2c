//! Three-sketch framework for a static or streamed matrix.
//!
//! A matrix `U` with `n_s` rows (state dimension) and `n_t` columns
//! (snapshots) is compressed into three complementary random projections:
//!
//! ```text
//! X = Υ U          (k  × n_t, co-range sketch)
//! Y = U Ωᵀ         (n_s × k,  range sketch)
//! Z = Φ U Ψᵀ       (s  × s,   core sketch)
//! ```
//!
//! with `k = 2r + 1` and `s = 2k + 1` for target rank `r`. The sketches are
//! linear in `U`, so they can be accumulated one column at a time without
//! ever materializing `U`. Reconstruction runs a numerically stable
//! two-stage least-squares procedure (thin QR of `Xᵀ` and `Y`, then a core
//! solve through pseudo-inverses) and satisfies, in expectation over the
//! projections,
//!
//! ```text
//! E‖U − Ũ‖_F ≤ √6 · τ_{r+1}(U)
//! ```
//!
//! where `τ_{r+1}` is the tail energy beyond rank `r`. All arithmetic is
//! real `f64`; conjugate transposition is plain transposition.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sketch dimensions for the static framework: `k = 2r + 1`, `s = 2k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlDims {
    /// Target rank.
    pub r: usize,
    /// Range/co-range sketch size, `2r + 1`.
    pub k: usize,
    /// Core sketch size, `2k + 1`.
    pub s: usize,
    /// Row (state) dimension of the sketched matrix.
    pub n_s: usize,
    /// Column (snapshot) dimension of the sketched matrix.
    pub n_t: usize,
}

impl ControlDims {
    /// Builds dimensions for target rank `r` and an `n_s × n_t` matrix.
    pub fn new(r: usize, n_s: usize, n_t: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::Config("target rank r must be >= 1".into()));
        }
        if n_s == 0 || n_t == 0 {
            return Err(Error::Config("matrix dimensions must be >= 1".into()));
        }
        if r > n_s.min(n_t) {
            return Err(Error::Config(format!(
                "target rank r={r} exceeds min(n_s, n_t)={}",
                n_s.min(n_t)
            )));
        }
        let k = 2 * r + 1;
        let s = 2 * k + 1;
        Ok(ControlDims { r, k, s, n_s, n_t })
    }
}

/// The four Gaussian projection matrices of the framework.
///
/// Entries are i.i.d. standard normal, generated by ChaCha8 from `seed`.
/// The generator and the fill order (row-major, matrices in the order
/// Υ, Ω, Φ, Ψ) are part of the format: the same `(seed, dims)` always
/// reproduces bit-identical matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlProjections {
    /// Co-range projection, `k × n_s`.
    pub upsilon: DMatrix<f64>,
    /// Range projection, `k × n_t`.
    pub omega: DMatrix<f64>,
    /// Core row projection, `s × n_s`.
    pub phi: DMatrix<f64>,
    /// Core column projection, `s × n_t`.
    pub psi: DMatrix<f64>,
    /// Seed the matrices were generated from.
    pub seed: u64,
}

/// Fills an `rows × cols` matrix with standard normal draws in row-major
/// order from `rng`.
pub(crate) fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)))
}

/// Generates the projection set for `dims`, deterministically in `(seed, dims)`.
pub fn make_control_projections(seed: u64, dims: &ControlDims) -> ControlProjections {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upsilon = gaussian_matrix(&mut rng, dims.k, dims.n_s);
    let omega = gaussian_matrix(&mut rng, dims.k, dims.n_t);
    let phi = gaussian_matrix(&mut rng, dims.s, dims.n_s);
    let psi = gaussian_matrix(&mut rng, dims.s, dims.n_t);
    ControlProjections { upsilon, omega, phi, psi, seed }
}

/// The (X, Y, Z) sketch triplet of one matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlSketch {
    /// Co-range sketch `Υ U`, `k × n_t`.
    pub x: DMatrix<f64>,
    /// Range sketch `U Ωᵀ`, `n_s × k`.
    pub y: DMatrix<f64>,
    /// Core sketch `Φ U Ψᵀ`, `s × s`.
    pub z: DMatrix<f64>,
    pub dims: ControlDims,
}

impl ControlSketch {
    /// All-zero sketch, the starting point for streaming accumulation.
    pub fn zeros(dims: &ControlDims) -> Self {
        ControlSketch {
            x: DMatrix::zeros(dims.k, dims.n_t),
            y: DMatrix::zeros(dims.n_s, dims.k),
            z: DMatrix::zeros(dims.s, dims.s),
            dims: *dims,
        }
    }

    /// Rank-one streaming update with column `i` (0-based) of the matrix:
    /// `X += (Υu)eᵢᵀ`, `Y += u(Ωeᵢ)ᵀ`, `Z += (Φu)(Ψeᵢ)ᵀ`.
    ///
    /// Streaming every column of `U` into a zero sketch reproduces
    /// [`sketch_static`] up to floating-point accumulation order.
    pub fn stream_update(&mut self, proj: &ControlProjections, u: &DVector<f64>, i: usize) -> Result<()> {
        let d = &self.dims;
        if i >= d.n_t {
            return Err(Error::IndexOutOfRange {
                what: "snapshot column".into(),
                index: i,
                len: d.n_t,
            });
        }
        if u.len() != d.n_s {
            return Err(Error::shape(
                "stream_update column",
                format!("{}", d.n_s),
                format!("{}", u.len()),
            ));
        }
        let xu = &proj.upsilon * u; // k
        let pu = &proj.phi * u; // s
        for row in 0..d.k {
            self.x[(row, i)] += xu[row];
        }
        // y += u * omega_col_i^T
        for col in 0..d.k {
            let w = proj.omega[(col, i)];
            for row in 0..d.n_s {
                self.y[(row, col)] += u[row] * w;
            }
        }
        // z += (phi u) (psi e_i)^T
        for col in 0..d.s {
            let w = proj.psi[(col, i)];
            for row in 0..d.s {
                self.z[(row, col)] += pu[row] * w;
            }
        }
        Ok(())
    }
}

/// Sketches a fully materialized matrix in one shot.
pub fn sketch_static(u: &DMatrix<f64>, proj: &ControlProjections, dims: &ControlDims) -> Result<ControlSketch> {
    if u.nrows() != dims.n_s || u.ncols() != dims.n_t {
        return Err(Error::shape(
            "sketch_static input",
            format!("{}x{}", dims.n_s, dims.n_t),
            format!("{}x{}", u.nrows(), u.ncols()),
        ));
    }
    Ok(ControlSketch {
        x: &proj.upsilon * u,
        y: u * proj.omega.transpose(),
        z: &proj.phi * u * proj.psi.transpose(),
        dims: *dims,
    })
}

/// Skinny factor pair `(Q, W)` with `Ũ = Q W`; `Q` has orthonormal columns.
///
/// `W := C Pᵀ` here is the `k × n_t` coefficient factor of the compact
/// representation, unrelated to network weight matrices.
#[derive(Debug, Clone)]
pub struct CompactFactors {
    /// `n_s × k`, orthonormal columns.
    pub q: DMatrix<f64>,
    /// `k × n_t` coefficient factor.
    pub w: DMatrix<f64>,
}

/// Two-stage least-squares reconstruction.
///
/// Thin QR gives `Xᵀ = P R₁` and `Y = Q R₂`; the core solve is
/// `C = (ΦQ)† Z ((ΨP)†)ᵀ` and the reconstruction `Ũ = Q C Pᵀ`. Returns the
/// dense `Ũ` together with the compact factors `(Q, C Pᵀ)`.
pub fn reconstruct(sketch: &ControlSketch, proj: &ControlProjections) -> Result<(DMatrix<f64>, CompactFactors)> {
    ensure_finite("sketch.x", &sketch.x)?;
    ensure_finite("sketch.y", &sketch.y)?;
    ensure_finite("sketch.z", &sketch.z)?;

    let p = sketch.x.transpose().qr().q(); // n_t × k
    let q = sketch.y.clone().qr().q(); // n_s × k

    let phi_q = &proj.phi * &q; // s × k
    let psi_p = &proj.psi * &p; // s × k
    let c = pinv(&phi_q, None)? * &sketch.z * pinv(&psi_p, None)?.transpose(); // k × k

    let w = &c * p.transpose(); // k × n_t
    let u_tilde = &q * &w;
    Ok((u_tilde, CompactFactors { q, w }))
}

/// Tail energy `τ_{r+1}(U) = (Σ_{i ≥ r+1} σ_i²)^{1/2}` via full SVD.
pub fn tail_energy(u: &DMatrix<f64>, r: usize) -> Result<f64> {
    let m = u.nrows().min(u.ncols());
    if r >= m {
        return Err(Error::IndexOutOfRange {
            what: "tail rank".into(),
            index: r,
            len: m,
        });
    }
    ensure_finite("tail_energy input", u)?;
    let mut sv: Vec<f64> = u.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sv[r..].iter().map(|s| s * s).sum::<f64>().sqrt())
}

/// Moore–Penrose pseudo-inverse via SVD.
///
/// Singular values below `rel_tol · σ_max` are truncated to zero;
/// `rel_tol` defaults to `max(rows, cols) · ε`.
pub fn pinv(m: &DMatrix<f64>, rel_tol: Option<f64>) -> Result<DMatrix<f64>> {
    ensure_finite("pinv input", m)?;
    let rel_tol = match rel_tol {
        Some(t) if t < 0.0 => return Err(Error::Config("pinv rel_tol must be >= 0".into())),
        Some(t) => t,
        None => m.nrows().max(m.ncols()) as f64 * f64::EPSILON,
    };
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD did not produce U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD did not produce Vt".into()))?;
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cut = rel_tol * smax;
    let inv = DMatrix::from_fn(v_t.nrows(), u.ncols(), |i, j| {
        if i == j && svd.singular_values[i] > cut {
            1.0 / svd.singular_values[i]
        } else {
            0.0
        }
    });
    Ok(v_t.transpose() * inv * u.transpose())
}

pub(crate) fn ensure_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.into()))
    }
}
