//! The four modulus computations on a marked quadrilateral: interior,
//! conjugate (corners shifted by one), exterior through inversion to a
//! bounded domain, and exterior on a truncated unbounded domain.
//!
//! The interior modulus is the Dirichlet energy of the potential with u = 0
//! on side 0, u = 1 on side 2 and natural conditions on sides 1 and 3. The
//! exterior modulus joins sides 3 and 1 through the complementary domain:
//! inversion reverses the boundary orientation, so the bounded image (whose
//! sides are the inverted sides 3, 0, 1, 2 in that order) is solved with the
//! standard interior plate assignment, while the truncated mesh keeps the
//! original side tags and swaps the plates to sides 3 and 1 directly. The
//! far-field potential is the limit of the exterior potential at infinity:
//! the value at the inversion center in the bounded image, or the value at
//! the marked vertex of the truncation circle.

use crate::fem::{solve, FemError, PlateSides, Solution};
use crate::geometry::{invert_quadrilateral, GeometryError, Point2, QuadrilateralSpec};
use crate::mesh::{
    assign_degrees, interior_mesh, truncated_exterior_mesh, DegreeMode, Mesh, MeshError,
    MeshOptions,
};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModulusError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
}

/// Per-element polynomial degree assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegreeKind {
    /// Every element carries the full degree.
    Constant,
    /// Degrees grow with the layer distance from the corners.
    Graded,
}

/// Discretization parameters shared by every modulus computation.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Geometric grading factor of the corner patches, in (0, 1).
    pub alpha: f64,
    /// Refinement levels toward each corner.
    pub nu: u32,
    /// Largest polynomial degree.
    pub p_max: u32,
    /// How degrees are distributed over the elements.
    pub degree: DegreeKind,
    /// Relative flatness tolerance when sampling curved boundary pieces.
    pub flatten_tol: f64,
    /// Radius of the artificial outer circle in truncated exterior solves.
    pub truncation_radius: f64,
}

impl SolveOptions {
    /// Defaults for a given maximum degree: alpha 0.15, graded degrees and
    /// nu = min(16, p_max) refinement levels.
    pub fn with_p_max(p_max: u32) -> SolveOptions {
        SolveOptions {
            alpha: 0.15,
            nu: p_max.min(16),
            p_max,
            degree: DegreeKind::Graded,
            flatten_tol: 0.03,
            truncation_radius: 1e6,
        }
    }

    fn mesh_options(&self) -> MeshOptions {
        MeshOptions {
            alpha: self.alpha,
            nu: self.nu,
            flatten_tol: self.flatten_tol,
        }
    }

    fn degree_mode(&self) -> DegreeMode {
        match self.degree {
            DegreeKind::Constant => DegreeMode::Constant(self.p_max),
            DegreeKind::Graded => DegreeMode::Graded { p_max: self.p_max },
        }
    }
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions::with_p_max(12)
    }
}

/// Wall-clock seconds spent in each phase of a modulus computation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTimings {
    pub mesh: f64,
    pub integrate: f64,
    pub assemble: f64,
    pub solve: f64,
    pub total: f64,
}

/// Outcome of one modulus computation.
#[derive(Debug, Clone)]
pub struct ModulusResult {
    /// The conformal modulus (Dirichlet energy of the potential).
    pub modulus: f64,
    /// Potential at infinity; present for the exterior computations.
    pub far_field: Option<f64>,
    /// Free unknowns in the linear system.
    pub unknowns: usize,
    /// Elements in the mesh.
    pub elements: usize,
    /// Minimum and maximum of the potential over the quadrature points.
    pub solution_range: (f64, f64),
    /// Relative residual of the solved linear system.
    pub relative_residual: f64,
    pub timings: PhaseTimings,
}

fn package(
    mesh: &Mesh,
    sol: &Solution,
    far_field: Option<f64>,
    mesh_seconds: f64,
    started: Instant,
) -> ModulusResult {
    ModulusResult {
        modulus: sol.energy,
        far_field,
        unknowns: sol.free_dofs,
        elements: mesh.elements.len(),
        solution_range: sol.range,
        relative_residual: sol.relative_residual,
        timings: PhaseTimings {
            mesh: mesh_seconds,
            integrate: sol.integrate_seconds,
            assemble: sol.assemble_seconds,
            solve: sol.solve_seconds,
            total: started.elapsed().as_secs_f64(),
        },
    }
}

fn run_interior(
    quad: &QuadrilateralSpec,
    opts: &SolveOptions,
    probe: Option<Point2>,
) -> Result<ModulusResult, ModulusError> {
    let started = Instant::now();
    let mesh = interior_mesh(quad, &opts.mesh_options())?;
    let degrees = assign_degrees(&mesh, opts.degree_mode());
    let mesh_seconds = started.elapsed().as_secs_f64();
    let sol = solve(&mesh, &degrees, PlateSides::default())?;
    let far_field = match probe {
        Some(p) => Some(sol.evaluate(&mesh, p)?),
        None => None,
    };
    Ok(package(&mesh, &sol, far_field, mesh_seconds, started))
}

/// Modulus of the quadrilateral: Dirichlet energy of the interior potential
/// with plates on sides 0 and 2.
pub fn interior_modulus(
    quad: &QuadrilateralSpec,
    opts: &SolveOptions,
) -> Result<ModulusResult, ModulusError> {
    run_interior(quad, opts, None)
}

/// Modulus of the conjugate quadrilateral (corners shifted by one).
pub fn conjugate_modulus(
    quad: &QuadrilateralSpec,
    opts: &SolveOptions,
) -> Result<ModulusResult, ModulusError> {
    run_interior(&quad.rotated(1), opts, None)
}

/// The reciprocal error r(Q) = |M(Q) M(Q~) - 1|, an a-posteriori accuracy
/// estimate driven by the identity M(Q) M(Q~) = 1.
pub fn reciprocal_error(
    quad: &QuadrilateralSpec,
    opts: &SolveOptions,
) -> Result<f64, ModulusError> {
    let m = interior_modulus(quad, opts)?.modulus;
    let conj = conjugate_modulus(quad, opts)?.modulus;
    Ok((m * conj - 1.0).abs())
}

/// Exterior modulus through inversion about an interior point: the unbounded
/// problem becomes an interior one on the bounded image, and the far-field
/// potential is the value at the image of infinity, which is the center
/// itself. The default center is the corner centroid, or the origin when the
/// boundary carries parametric pieces (those invert exactly only there).
pub fn exterior_modulus_inversion(
    quad: &QuadrilateralSpec,
    center: Option<Point2>,
    opts: &SolveOptions,
) -> Result<ModulusResult, ModulusError> {
    let center = center.unwrap_or_else(|| default_inversion_center(quad));
    let image = invert_quadrilateral(quad, center)?;
    run_interior(&image, opts, Some(center))
}

fn default_inversion_center(quad: &QuadrilateralSpec) -> Point2 {
    let parametric = quad
        .pieces()
        .any(|p| matches!(p, crate::geometry::BoundaryPiece::ParametricArc { .. }));
    if parametric {
        Point2::new(0.0, 0.0)
    } else {
        quad.corner_centroid()
    }
}

/// Exterior modulus on the truncated unbounded domain: the region between
/// the quadrilateral and a far circle carrying natural (zero Neumann)
/// conditions, with plates on sides 3 and 1. The far-field potential is
/// read at the marked vertex of the truncation circle.
pub fn exterior_modulus_truncated(
    quad: &QuadrilateralSpec,
    opts: &SolveOptions,
) -> Result<ModulusResult, ModulusError> {
    let started = Instant::now();
    let mesh = truncated_exterior_mesh(quad, &opts.mesh_options(), opts.truncation_radius)?;
    let degrees = assign_degrees(&mesh, opts.degree_mode());
    let mesh_seconds = started.elapsed().as_secs_f64();
    let sol = solve(&mesh, &degrees, PlateSides { zero: 3, one: 1 })?;
    let far_field = mesh.far_vertex.map(|v| sol.coeffs[v]);
    Ok(package(&mesh, &sol, far_field, mesh_seconds, started))
}

/// Conjugate interior and exterior (via inversion) moduli of the flower
/// quadrilateral with the given number of petals. With all four corners at
/// extremal points of the boundary radius the two values agree.
pub fn flower_capacity_invariance(
    petals: u32,
    opts: &SolveOptions,
) -> Result<(f64, f64), ModulusError> {
    let quad = crate::geometry::flower_quad(petals)?;
    let interior = conjugate_modulus(&quad, opts)?.modulus;
    let exterior = exterior_modulus_inversion(&quad, None, opts)?.modulus;
    Ok((interior, exterior))
}
