//! High-order conforming finite elements on the triangular meshes: a
//! hierarchic basis (vertex, edge, and interior modes), Duffy quadrature,
//! transfinite blending for curved boundary edges, assembly under the
//! minimum rule for shared-edge degrees, and a sparse Cholesky solve of the
//! mixed Dirichlet-Neumann Laplace problem.
//!
//! The Dirichlet data is eliminated: vertex coefficients on the two plates
//! take the plate values, higher modes on plate edges vanish, and the free
//! coefficients solve the reduced positive definite system. The Dirichlet
//! energy of the solution, which is the quantity of interest, is the full
//! quadratic form evaluated on the assembled stiffness matrix.

use crate::geometry::{BoundaryPiece, Point2};
use crate::mesh::{BoundarySource, Mesh};
use faer::prelude::*;
use faer::sparse::SparseColMat;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;
use thiserror::Error;

/// Local edge `m` of an element connects these local vertices; the first
/// entry of each pair is the canonical low end.
const EDGE_VERTICES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// Relative bound accepted for the iterative-refinement residual.
const RESIDUAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FemError {
    #[error("geometry map is degenerate: {0}")]
    BadElement(String),
    #[error("boundary conditions are inconsistent: {0}")]
    BadBoundary(String),
    #[error("linear solve failed: {0}")]
    Solve(String),
    #[error("point ({0}, {1}) not found in the mesh")]
    PointNotFound(f64, f64),
}

/// Which quadrilateral sides carry the two Dirichlet plates; the remaining
/// sides (and any truncation circle) are natural Neumann boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateSides {
    /// Side index with u = 0.
    pub zero: usize,
    /// Side index with u = 1.
    pub one: usize,
}

impl Default for PlateSides {
    fn default() -> Self {
        PlateSides { zero: 0, one: 2 }
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (4.0 * i as f64 + 3.0) / (4.0 * n as f64 + 2.0)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_single(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_single(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_single(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    let mut d0 = 0.0;
    let mut d1 = 1.0;
    if n == 0 {
        return (p0, d0);
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        let d2 = ((2.0 * kf + 1.0) * (p1 + x * d1) - kf * d0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
        d0 = d1;
        d1 = d2;
    }
    (p1, d1)
}

/// Values and derivatives of Legendre polynomials P_0..P_max at x.
fn legendre_pairs(max: usize, x: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(max + 1);
    out.push((1.0, 0.0));
    if max == 0 {
        return out;
    }
    out.push((x, 1.0));
    for k in 1..max {
        let kf = k as f64;
        let (p1, d1) = out[k];
        let (p0, d0) = out[k - 1];
        out.push((
            ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0),
            ((2.0 * kf + 1.0) * (p1 + x * d1) - kf * d0) / (kf + 1.0),
        ));
    }
    out
}

/// Values and derivatives of the edge-mode kernels K_0..K_max at x, where
/// the integrated Legendre polynomial of degree k factors as
/// (1 - x^2)/4 * K_{k-2}(x). The kernels are scaled Jacobi polynomials
/// with unit weights at both ends.
fn kernel_pairs(max: usize, x: f64) -> Vec<(f64, f64)> {
    let mut jac = Vec::with_capacity(max + 1);
    jac.push((1.0, 0.0));
    if max >= 1 {
        jac.push((2.0 * x, 2.0));
    }
    for n in 2..=max {
        let nf = n as f64;
        let c1 = (2.0 * nf + 1.0) * (2.0 * nf + 2.0);
        let c2 = 2.0 * nf * (nf + 1.0);
        let c3 = 2.0 * nf * (nf + 2.0);
        let (p1, d1) = jac[n - 1];
        let (p0, d0) = jac[n - 2];
        jac.push((
            (c1 * x * p1 - c2 * p0) / c3,
            (c1 * (p1 + x * d1) - c2 * d0) / c3,
        ));
    }
    jac.iter()
        .enumerate()
        .map(|(m, &(p, d))| {
            let scale = -2.0 / (m as f64 + 1.0);
            (scale * p, scale * d)
        })
        .collect()
}

/// One basis function evaluated at a reference point: value and gradient
/// with respect to (xi, eta).
#[derive(Debug, Clone, Copy, Default)]
struct Shape {
    v: f64,
    gx: f64,
    gy: f64,
}

fn shape_count(p: u32) -> usize {
    ((p + 1) * (p + 2) / 2) as usize
}

fn bubble_count(p: u32) -> usize {
    if p < 3 {
        0
    } else {
        ((p - 1) * (p - 2) / 2) as usize
    }
}

/// All basis functions of degree p at the reference point, in canonical
/// order: three vertex modes, then p-1 modes per local edge (edge 0, 1, 2),
/// then the interior bubbles ordered by total degree.
fn reference_shapes(p: u32, xi: f64, eta: f64) -> Vec<Shape> {
    let lam = [1.0 - xi - eta, xi, eta];
    let dlam = [(-1.0, -1.0), (1.0, 0.0), (0.0, 1.0)];
    let mut shapes = Vec::with_capacity(shape_count(p));
    for i in 0..3 {
        shapes.push(Shape {
            v: lam[i],
            gx: dlam[i].0,
            gy: dlam[i].1,
        });
    }
    if p >= 2 {
        for &(a, b) in &EDGE_VERTICES {
            let x = lam[b] - lam[a];
            let kernels = kernel_pairs((p - 2) as usize, x);
            let prod = lam[a] * lam[b];
            let dprod = (
                dlam[a].0 * lam[b] + lam[a] * dlam[b].0,
                dlam[a].1 * lam[b] + lam[a] * dlam[b].1,
            );
            let dx = (dlam[b].0 - dlam[a].0, dlam[b].1 - dlam[a].1);
            for k in 2..=p {
                let (kv, kd) = kernels[(k - 2) as usize];
                shapes.push(Shape {
                    v: prod * kv,
                    gx: dprod.0 * kv + prod * kd * dx.0,
                    gy: dprod.1 * kv + prod * kd * dx.1,
                });
            }
        }
    } else {
        return shapes;
    }
    if p >= 3 {
        let tri = lam[0] * lam[1] * lam[2];
        let dtri = (
            dlam[0].0 * lam[1] * lam[2] + lam[0] * dlam[1].0 * lam[2] + lam[0] * lam[1] * dlam[2].0,
            dlam[0].1 * lam[1] * lam[2] + lam[0] * dlam[1].1 * lam[2] + lam[0] * lam[1] * dlam[2].1,
        );
        let max_deg = (p - 3) as usize;
        let px = legendre_pairs(max_deg, lam[1] - lam[0]);
        let py = legendre_pairs(max_deg, 2.0 * lam[2] - 1.0);
        let dargx = (dlam[1].0 - dlam[0].0, dlam[1].1 - dlam[0].1);
        let dargy = (2.0 * dlam[2].0, 2.0 * dlam[2].1);
        for total in 0..=max_deg {
            for m in 0..=total {
                let n = total - m;
                let (pm, dm) = px[m];
                let (pn, dn) = py[n];
                shapes.push(Shape {
                    v: tri * pm * pn,
                    gx: dtri.0 * pm * pn
                        + tri * (dm * dargx.0 * pn + pm * dn * dargy.0),
                    gy: dtri.1 * pm * pn
                        + tri * (dm * dargx.1 * pn + pm * dn * dargy.1),
                });
            }
        }
    }
    shapes
}

#[derive(Debug, Clone, Copy)]
struct QuadPoint {
    xi: f64,
    eta: f64,
    w: f64,
}

/// Duffy-transformed tensor Gauss rule on the reference triangle, with the
/// collapsed square edge at vertex `collapse`. Blended maps are singular in
/// the edge parameter at the vertex opposite their curved edge; collapsing
/// there makes the pulled-back integrand smooth, restoring exponential
/// quadrature convergence on curved elements.
fn duffy_points(n1d: usize, collapse: usize) -> Vec<QuadPoint> {
    let (nodes, weights) = gauss_legendre(n1d);
    let mut out = Vec::with_capacity(n1d * n1d);
    for (ia, &a) in nodes.iter().enumerate() {
        for (ib, &b) in nodes.iter().enumerate() {
            let mut lam = [0.0; 3];
            lam[collapse] = (1.0 + b) / 2.0;
            lam[(collapse + 1) % 3] = (1.0 + a) * (1.0 - b) / 4.0;
            lam[(collapse + 2) % 3] = 1.0 - lam[collapse] - lam[(collapse + 1) % 3];
            out.push(QuadPoint {
                xi: lam[1],
                eta: lam[2],
                w: weights[ia] * weights[ib] * (1.0 - b) / 8.0,
            });
        }
    }
    out
}

struct BasisTable {
    quad: Vec<QuadPoint>,
    /// shapes[q][f] for quadrature point q and canonical function f.
    shapes: Vec<Vec<Shape>>,
}

fn basis_table(p: u32, n1d: usize, collapse: usize) -> Arc<BasisTable> {
    static TABLES: OnceLock<Mutex<HashMap<(u32, usize, usize), Arc<BasisTable>>>> =
        OnceLock::new();
    let tables = TABLES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = tables.lock().expect("basis table cache poisoned");
    guard
        .entry((p, n1d, collapse))
        .or_insert_with(|| {
            let quad = duffy_points(n1d, collapse);
            let shapes = quad
                .iter()
                .map(|q| reference_shapes(p, q.xi, q.eta))
                .collect();
            Arc::new(BasisTable { quad, shapes })
        })
        .clone()
}

/// Collapse vertex for an element's quadrature: opposite the curved edge
/// when there is one.
fn collapse_vertex(curved: &[(usize, BoundaryPiece)]) -> usize {
    curved.first().map_or(2, |(k, _)| (k + 2) % 3)
}

/// Geometry map of one element: affine in the straight vertices plus, per
/// curved edge, a blend that reproduces the curve exactly, keeps the other
/// two edges straight, and stays analytic across the whole triangle.
struct ElementMap<'a> {
    v: [Point2; 3],
    curved: &'a [(usize, BoundaryPiece)],
}

/// The curved-edge defect gamma(t) - chord(t) divided by t(1-t), with its
/// t-derivative. The quotient extends analytically to the endpoints, where
/// its limit is the defect slope; near them the limit value is used.
fn edge_blend(piece: &BoundaryPiece, start: Point2, chord: Point2, t: f64) -> (Point2, Point2) {
    const ENDPOINT_TOL: f64 = 1e-5;
    if t < ENDPOINT_TOL {
        return (piece.derivative(0.0) - chord, Point2::new(0.0, 0.0));
    }
    if t > 1.0 - ENDPOINT_TOL {
        return (chord - piece.derivative(1.0), Point2::new(0.0, 0.0));
    }
    let q = t * (1.0 - t);
    let h = (piece.point(t) - (start + chord * t)) * (1.0 / q);
    let dh = ((piece.derivative(t) - chord) - h * (1.0 - 2.0 * t)) * (1.0 / q);
    (h, dh)
}

impl<'a> ElementMap<'a> {
    fn new(mesh: &'a Mesh, elem: usize) -> Self {
        let e = &mesh.elements[elem];
        ElementMap {
            v: [
                mesh.vertices[e.v[0]],
                mesh.vertices[e.v[1]],
                mesh.vertices[e.v[2]],
            ],
            curved: &e.curved,
        }
    }

    fn is_curved(&self) -> bool {
        !self.curved.is_empty()
    }

    /// Physical point and Jacobian [[dx/dxi, dx/deta], [dy/dxi, dy/deta]].
    fn point_and_jacobian(&self, xi: f64, eta: f64) -> (Point2, [[f64; 2]; 2]) {
        let lam = [1.0 - xi - eta, xi, eta];
        let dlam = [(-1.0, -1.0), (1.0, 0.0), (0.0, 1.0)];
        let mut x = self.v[0] + (self.v[1] - self.v[0]) * xi + (self.v[2] - self.v[0]) * eta;
        let mut jac = [
            [(self.v[1] - self.v[0]).x, (self.v[2] - self.v[0]).x],
            [(self.v[1] - self.v[0]).y, (self.v[2] - self.v[0]).y],
        ];
        for (m, piece) in self.curved {
            let (i, j, o) = (*m, (*m + 1) % 3, (*m + 2) % 3);
            let t = lam[j] + 0.5 * lam[o];
            let dt = (
                dlam[j].0 + 0.5 * dlam[o].0,
                dlam[j].1 + 0.5 * dlam[o].1,
            );
            let phi = lam[i] * lam[j];
            let dphi = (
                dlam[i].0 * lam[j] + lam[i] * dlam[j].0,
                dlam[i].1 * lam[j] + lam[i] * dlam[j].1,
            );
            let chord = self.v[j] - self.v[i];
            let (h, dh) = edge_blend(piece, self.v[i], chord, t);
            x = x + h * phi;
            jac[0][0] += dphi.0 * h.x + phi * dh.x * dt.0;
            jac[0][1] += dphi.1 * h.x + phi * dh.x * dt.1;
            jac[1][0] += dphi.0 * h.y + phi * dh.y * dt.0;
            jac[1][1] += dphi.1 * h.y + phi * dh.y * dt.1;
        }
        (x, jac)
    }
}

fn det2(j: &[[f64; 2]; 2]) -> f64 {
    j[0][0] * j[1][1] - j[0][1] * j[1][0]
}

/// Maps a reference gradient to the physical gradient through J^{-T}.
fn physical_gradient(j: &[[f64; 2]; 2], det: f64, g: (f64, f64)) -> (f64, f64) {
    (
        (j[1][1] * g.0 - j[1][0] * g.1) / det,
        (-j[0][1] * g.0 + j[0][0] * g.1) / det,
    )
}

#[derive(Debug)]
struct EdgeDofs {
    start: usize,
    degree: u32,
}

#[derive(Debug)]
struct DofLayout {
    edges: HashMap<(usize, usize), EdgeDofs>,
    bubble_start: Vec<usize>,
    total: usize,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Numbers the degrees of freedom: vertices, then edges in sorted key
/// order with the minimum-rule degree, then element bubbles.
fn build_layout(mesh: &Mesh, degrees: &[u32]) -> DofLayout {
    let mut edge_degree: HashMap<(usize, usize), u32> = HashMap::new();
    for (ei, elem) in mesh.elements.iter().enumerate() {
        for &(a, b) in &EDGE_VERTICES {
            let key = edge_key(elem.v[a], elem.v[b]);
            edge_degree
                .entry(key)
                .and_modify(|d| *d = (*d).min(degrees[ei]))
                .or_insert(degrees[ei]);
        }
    }
    let mut keys: Vec<(usize, usize)> = edge_degree.keys().copied().collect();
    keys.sort_unstable();
    let mut next = mesh.vertices.len();
    let mut edges = HashMap::with_capacity(keys.len());
    for key in keys {
        let degree = edge_degree[&key];
        edges.insert(key, EdgeDofs { start: next, degree });
        next += degree.saturating_sub(1) as usize;
    }
    let mut bubble_start = Vec::with_capacity(mesh.elements.len());
    for (ei, _) in mesh.elements.iter().enumerate() {
        bubble_start.push(next);
        next += bubble_count(degrees[ei]);
    }
    DofLayout {
        edges,
        bubble_start,
        total: next,
    }
}

/// One active basis function of an element: canonical shape index within
/// the element's full table, the global degree of freedom it scatters to,
/// and the orientation sign.
#[derive(Debug, Clone, Copy)]
struct DofRef {
    shape: usize,
    global: usize,
    sign: f64,
}

fn element_dofs(mesh: &Mesh, layout: &DofLayout, degrees: &[u32], ei: usize) -> Vec<DofRef> {
    let elem = &mesh.elements[ei];
    let p = degrees[ei];
    let mut out = Vec::with_capacity(shape_count(p));
    for i in 0..3 {
        out.push(DofRef {
            shape: i,
            global: elem.v[i],
            sign: 1.0,
        });
    }
    for (m, &(a, b)) in EDGE_VERTICES.iter().enumerate() {
        let (ga, gb) = (elem.v[a], elem.v[b]);
        let info = &layout.edges[&edge_key(ga, gb)];
        let ascending = ga < gb;
        for k in 2..=info.degree {
            let sign = if ascending {
                1.0
            } else if k % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            out.push(DofRef {
                shape: 3 + m * (p as usize - 1) + (k - 2) as usize,
                global: info.start + (k - 2) as usize,
                sign,
            });
        }
    }
    let bubbles = bubble_count(p);
    let base = 3 + 3 * (p as usize).saturating_sub(1);
    for i in 0..bubbles {
        out.push(DofRef {
            shape: base + i,
            global: layout.bubble_start[ei] + i,
            sign: 1.0,
        });
    }
    out
}

/// Result of a Laplace solve: full coefficient vector, Dirichlet energy,
/// and diagnostics. `evaluate` reconstructs the potential at points of the
/// domain.
#[derive(Debug)]
pub struct Solution {
    pub coeffs: Vec<f64>,
    pub energy: f64,
    pub total_dofs: usize,
    pub free_dofs: usize,
    /// Minimum and maximum of the potential over all quadrature points.
    pub range: (f64, f64),
    pub relative_residual: f64,
    pub integrate_seconds: f64,
    pub assemble_seconds: f64,
    pub solve_seconds: f64,
    layout: DofLayout,
    degrees: Vec<u32>,
}

fn quadrature_order(p: u32, curved: bool) -> usize {
    (p as usize + 2) + if curved { 2 } else { 0 }
}

/// Solves the Laplace problem with u = 0 and u = 1 on the plate sides and
/// natural boundary conditions elsewhere.
pub fn solve(mesh: &Mesh, degrees: &[u32], plates: PlateSides) -> Result<Solution, FemError> {
    assert_eq!(degrees.len(), mesh.elements.len());
    if plates.zero == plates.one || plates.zero >= 4 || plates.one >= 4 {
        return Err(FemError::BadBoundary(format!(
            "plate sides {} and {} are not distinct quadrilateral sides",
            plates.zero, plates.one
        )));
    }
    let t0 = Instant::now();
    let layout = build_layout(mesh, degrees);

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut dof_cache: Vec<Vec<DofRef>> = Vec::with_capacity(mesh.elements.len());
    for ei in 0..mesh.elements.len() {
        let dofs = element_dofs(mesh, &layout, degrees, ei);
        let map = ElementMap::new(mesh, ei);
        let table = basis_table(
            degrees[ei],
            quadrature_order(degrees[ei], map.is_curved()),
            collapse_vertex(map.curved),
        );
        let nf = dofs.len();
        let mut local = vec![0.0; nf * nf];
        let mut grads = vec![(0.0, 0.0); nf];
        for (q, point) in table.quad.iter().enumerate() {
            let (_, jac) = map.point_and_jacobian(point.xi, point.eta);
            let det = det2(&jac);
            if det <= 0.0 {
                return Err(FemError::BadElement(format!(
                    "non-positive Jacobian in element {ei}"
                )));
            }
            let shapes = &table.shapes[q];
            for (i, d) in dofs.iter().enumerate() {
                let s = shapes[d.shape];
                grads[i] = physical_gradient(&jac, det, (s.gx * d.sign, s.gy * d.sign));
            }
            let scale = point.w * det;
            for i in 0..nf {
                let gi = grads[i];
                let row = i * nf;
                for j in 0..=i {
                    local[row + j] += scale * (gi.0 * grads[j].0 + gi.1 * grads[j].1);
                }
            }
        }
        for i in 0..nf {
            for j in 0..=i {
                let v = local[i * nf + j];
                triplets.push((dofs[i].global, dofs[j].global, v));
                if i != j {
                    triplets.push((dofs[j].global, dofs[i].global, v));
                }
            }
        }
        dof_cache.push(dofs);
    }
    let integrate_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut dirichlet_edge: HashMap<(usize, usize), f64> = HashMap::new();
    for info in &mesh.boundary_edges {
        let value = match info.source {
            BoundarySource::Side(j) if j == plates.zero => 0.0,
            BoundarySource::Side(j) if j == plates.one => 1.0,
            _ => continue,
        };
        dirichlet_edge.insert(edge_key(info.a, info.b), value);
    }
    if dirichlet_edge.is_empty() {
        return Err(FemError::BadBoundary("no plate edges in the mesh".into()));
    }
    let mut constrained: Vec<Option<f64>> = vec![None; layout.total];
    for (key, &value) in &dirichlet_edge {
        for &v in &[key.0, key.1] {
            match constrained[v] {
                None => constrained[v] = Some(value),
                Some(prev) if prev == value => {}
                Some(_) => {
                    return Err(FemError::BadBoundary(
                        "the two plates meet at a vertex".into(),
                    ))
                }
            }
        }
        let info = &layout.edges[key];
        for k in 0..info.degree.saturating_sub(1) as usize {
            constrained[info.start + k] = Some(0.0);
        }
    }

    let mut free_index: Vec<usize> = vec![usize::MAX; layout.total];
    let mut free: Vec<usize> = Vec::new();
    for (g, c) in constrained.iter().enumerate() {
        if c.is_none() {
            free_index[g] = free.len();
            free.push(g);
        }
    }
    let nf = free.len();
    let mut u = vec![0.0; layout.total];
    for (g, c) in constrained.iter().enumerate() {
        if let Some(v) = c {
            u[g] = *v;
        }
    }

    let mut reduced: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
    let mut rhs = vec![0.0; nf];
    for &(r, c, v) in &triplets {
        let (fr, fc) = (free_index[r], free_index[c]);
        if fr != usize::MAX {
            if fc != usize::MAX {
                reduced.push((fr, fc, v));
            } else {
                rhs[fr] -= v * u[c];
            }
        }
    }
    let assemble_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let mut relative_residual = 0.0;
    if nf > 0 {
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(nf, nf, &reduced)
            .map_err(|e| FemError::Solve(format!("building the sparse matrix: {e:?}")))?;
        let chol = a
            .sp_cholesky(faer::Side::Lower)
            .map_err(|e| FemError::Solve(format!("Cholesky factorization: {e:?}")))?;
        let b = faer::Mat::from_fn(nf, 1, |i, _| rhs[i]);
        let mut x = chol.solve(&b);
        let matvec = |xv: &faer::Mat<f64>| -> Vec<f64> {
            let mut y = vec![0.0; nf];
            for &(r, c, v) in &reduced {
                y[r] += v * xv[(c, 0)];
            }
            y
        };
        let ax = matvec(&x);
        let res = faer::Mat::from_fn(nf, 1, |i, _| rhs[i] - ax[i]);
        let dx = chol.solve(&res);
        for i in 0..nf {
            x[(i, 0)] += dx[(i, 0)];
        }
        let ax = matvec(&x);
        let norm_b = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_r = rhs
            .iter()
            .zip(&ax)
            .map(|(b, a)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        relative_residual = if norm_b > 0.0 { norm_r / norm_b } else { norm_r };
        if !relative_residual.is_finite() || relative_residual > RESIDUAL_TOL {
            return Err(FemError::Solve(format!(
                "relative residual {relative_residual:.3e} exceeds {RESIDUAL_TOL:.0e}"
            )));
        }
        for (i, &g) in free.iter().enumerate() {
            u[g] = x[(i, 0)];
        }
    }

    let energy = triplets
        .iter()
        .map(|&(r, c, v)| v * u[r] * u[c])
        .sum::<f64>();

    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for ei in 0..mesh.elements.len() {
        let map = ElementMap::new(mesh, ei);
        let table = basis_table(
            degrees[ei],
            quadrature_order(degrees[ei], map.is_curved()),
            collapse_vertex(map.curved),
        );
        for shapes in &table.shapes {
            let mut val = 0.0;
            for d in &dof_cache[ei] {
                val += u[d.global] * d.sign * shapes[d.shape].v;
            }
            range.0 = range.0.min(val);
            range.1 = range.1.max(val);
        }
    }
    let solve_seconds = t2.elapsed().as_secs_f64();

    Ok(Solution {
        coeffs: u,
        energy,
        total_dofs: layout.total,
        free_dofs: nf,
        range,
        relative_residual,
        integrate_seconds,
        assemble_seconds,
        solve_seconds,
        layout,
        degrees: degrees.to_vec(),
    })
}

impl Solution {
    /// Potential at a point of the computational domain.
    pub fn evaluate(&self, mesh: &Mesh, point: Point2) -> Result<f64, FemError> {
        let (ei, xi, eta) = locate(mesh, point)?;
        let shapes = reference_shapes(self.degrees[ei], xi, eta);
        let dofs = element_dofs(mesh, &self.layout, &self.degrees, ei);
        Ok(dofs
            .iter()
            .map(|d| self.coeffs[d.global] * d.sign * shapes[d.shape].v)
            .sum())
    }
}

/// Finds the element containing `point` and its reference coordinates,
/// inverting the blended map by Newton iteration on curved elements.
fn locate(mesh: &Mesh, point: Point2) -> Result<(usize, f64, f64), FemError> {
    let mut candidates: Vec<(f64, usize, f64, f64)> = Vec::new();
    for (ei, elem) in mesh.elements.iter().enumerate() {
        let (a, b, c) = (
            mesh.vertices[elem.v[0]],
            mesh.vertices[elem.v[1]],
            mesh.vertices[elem.v[2]],
        );
        let det = (b - a).cross(c - a);
        let xi = (point - a).cross(c - a) / det;
        let eta = (b - a).cross(point - a) / det;
        let violation = xi.min(eta).min(1.0 - xi - eta);
        if violation > -1e-6 {
            candidates.push((violation, ei, xi, eta));
        }
    }
    candidates.sort_by(|p, q| q.0.total_cmp(&p.0));
    let scale = {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &mesh.vertices {
            lo = Point2::new(lo.x.min(v.x), lo.y.min(v.y));
            hi = Point2::new(hi.x.max(v.x), hi.y.max(v.y));
        }
        (hi - lo).norm()
    };
    for &(violation, ei, xi0, eta0) in candidates.iter().take(64) {
        let map = ElementMap::new(mesh, ei);
        if !map.is_curved() {
            if violation >= -1e-12 {
                return Ok((ei, xi0, eta0));
            }
            continue;
        }
        let (mut xi, mut eta) = (xi0.clamp(0.0, 1.0), eta0.clamp(0.0, 1.0));
        let mut converged = false;
        for _ in 0..50 {
            let (x, jac) = map.point_and_jacobian(xi, eta);
            let r = x - point;
            if r.norm() <= 1e-13 * scale {
                converged = true;
                break;
            }
            let det = det2(&jac);
            if det.abs() < f64::MIN_POSITIVE {
                break;
            }
            xi -= (jac[1][1] * r.x - jac[0][1] * r.y) / det;
            eta -= (-jac[1][0] * r.x + jac[0][0] * r.y) / det;
        }
        if converged && xi.min(eta).min(1.0 - xi - eta) >= -1e-9 {
            return Ok((ei, xi, eta));
        }
    }
    Err(FemError::PointNotFound(point.x, point.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{circle_quad, QuadrilateralSpec};
    use crate::mesh::{assign_degrees, interior_mesh, DegreeMode, MeshOptions};

    fn unit_square() -> QuadrilateralSpec {
        QuadrilateralSpec::polygon([
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn gauss_rule_is_exact_and_normalized() {
        for n in 1..=16 {
            let (nodes, weights) = gauss_legendre(n);
            let total: f64 = weights.iter().sum();
            assert!((total - 2.0).abs() < 1e-14, "n = {n}");
            for w in &weights {
                assert!(*w > 0.0);
            }
            for pair in nodes.windows(2) {
                assert!(pair[0] > pair[1], "nodes must be strictly decreasing");
            }
            // Exact for degree 2n-1.
            let deg = 2 * n - 1;
            let value: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * x.powi(deg as i32))
                .sum();
            assert!(value.abs() < 1e-13, "odd power integrates to zero");
            let deg = 2 * n - 2;
            let value: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * x.powi(deg as i32))
                .sum();
            let exact = 2.0 / (deg as f64 + 1.0);
            assert!((value - exact).abs() < 1e-13, "n = {n}");
        }
    }

    #[test]
    fn duffy_rule_integrates_over_the_reference_triangle() {
        let quad = duffy_points(6, 2);
        let total: f64 = quad.iter().map(|q| q.w).sum();
        assert!((total - 0.5).abs() < 1e-14);
        // Exact moments: int xi^a eta^b = a! b! / (a + b + 2)!.
        let moment = |a: i32, b: i32| -> f64 {
            quad.iter()
                .map(|q| q.w * q.xi.powi(a) * q.eta.powi(b))
                .sum()
        };
        assert!((moment(1, 0) - 1.0 / 6.0).abs() < 1e-15);
        assert!((moment(2, 1) - 2.0 / 120.0).abs() < 1e-15);
        assert!((moment(3, 2) - 12.0 / 5040.0).abs() < 1e-15);
        for q in &quad {
            assert!(q.xi > 0.0 && q.eta > 0.0 && q.xi + q.eta < 1.0);
        }
    }

    #[test]
    fn shape_counts_and_partition_of_unity() {
        for p in 1..=8u32 {
            let shapes = reference_shapes(p, 0.31, 0.17);
            assert_eq!(shapes.len(), shape_count(p));
            let vertex_sum: f64 = shapes[..3].iter().map(|s| s.v).sum();
            assert!((vertex_sum - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn edge_modes_restrict_to_integrated_legendre() {
        let p = 7u32;
        for i in 0..9 {
            let t = (i as f64 + 0.5) / 9.0;
            // Edge 0 runs along eta = 0 with xi = t.
            let shapes = reference_shapes(p, t, 0.0);
            let x = 2.0 * t - 1.0;
            let leg = legendre_pairs(p as usize, x);
            for k in 2..=p as usize {
                let expected = (leg[k].0 - leg[k - 2].0) / (2.0 * k as f64 - 1.0);
                let actual = shapes[3 + (k - 2)].v;
                assert!(
                    (actual - expected).abs() < 1e-14,
                    "k = {k}, t = {t}: {actual} vs {expected}"
                );
            }
            // Edge-0 modes vanish on the other two edges.
            let on_edge1 = reference_shapes(p, 1.0 - t, t);
            let on_edge2 = reference_shapes(p, 0.0, t);
            for k in 0..(p as usize - 1) {
                assert!(on_edge1[3 + k].v.abs() < 1e-14);
                assert!(on_edge2[3 + k].v.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bubbles_vanish_on_the_boundary() {
        let p = 6u32;
        let base = 3 + 3 * (p as usize - 1);
        for i in 0..7 {
            let t = i as f64 / 6.0;
            for shapes in [
                reference_shapes(p, t, 0.0),
                reference_shapes(p, 0.0, t),
                reference_shapes(p, t, 1.0 - t),
            ] {
                for f in base..shapes.len() {
                    assert!(shapes[f].v.abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn shape_gradients_match_finite_differences() {
        let p = 6u32;
        let h = 1e-7;
        let (xi, eta) = (0.23, 0.41);
        let center = reference_shapes(p, xi, eta);
        let dx = reference_shapes(p, xi + h, eta);
        let dx2 = reference_shapes(p, xi - h, eta);
        let dy = reference_shapes(p, xi, eta + h);
        let dy2 = reference_shapes(p, xi, eta - h);
        for f in 0..center.len() {
            let gx = (dx[f].v - dx2[f].v) / (2.0 * h);
            let gy = (dy[f].v - dy2[f].v) / (2.0 * h);
            assert!((gx - center[f].gx).abs() < 1e-6, "f = {f}");
            assert!((gy - center[f].gy).abs() < 1e-6, "f = {f}");
        }
    }

    #[test]
    fn square_energy_is_exactly_one() {
        let mesh = interior_mesh(
            &unit_square(),
            &MeshOptions {
                nu: 2,
                ..MeshOptions::default()
            },
        )
        .unwrap();
        for mode in [
            DegreeMode::Constant(1),
            DegreeMode::Constant(3),
            DegreeMode::Graded { p_max: 4 },
        ] {
            let degrees = assign_degrees(&mesh, mode);
            let sol = solve(&mesh, &degrees, PlateSides::default()).unwrap();
            assert!(
                (sol.energy - 1.0).abs() < 1e-12,
                "{mode:?}: energy {}",
                sol.energy
            );
            assert!(sol.range.0 > -1e-10 && sol.range.1 < 1.0 + 1e-10);
            assert!(sol.relative_residual <= RESIDUAL_TOL);
        }
    }

    #[test]
    fn rectangle_energy_matches_aspect_ratio() {
        let rect = QuadrilateralSpec::polygon([
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(2.0, 1.0),
            Point2::new(0.0, 1.0),
        ])
        .unwrap();
        let opts = MeshOptions {
            nu: 3,
            ..MeshOptions::default()
        };
        let mesh = interior_mesh(&rect, &opts).unwrap();
        let degrees = assign_degrees(&mesh, DegreeMode::Constant(2));
        let sol = solve(&mesh, &degrees, PlateSides::default()).unwrap();
        assert!((sol.energy - 2.0).abs() < 1e-12, "energy {}", sol.energy);

        let conjugate = rect.rotated(1);
        let mesh = interior_mesh(&conjugate, &opts).unwrap();
        let degrees = assign_degrees(&mesh, DegreeMode::Constant(2));
        let sol = solve(&mesh, &degrees, PlateSides::default()).unwrap();
        assert!((sol.energy - 0.5).abs() < 1e-12, "energy {}", sol.energy);
    }

    #[test]
    fn solution_evaluates_to_plate_values_and_midline() {
        let mesh = interior_mesh(
            &unit_square(),
            &MeshOptions {
                nu: 4,
                ..MeshOptions::default()
            },
        )
        .unwrap();
        let degrees = assign_degrees(&mesh, DegreeMode::Graded { p_max: 4 });
        let sol = solve(&mesh, &degrees, PlateSides::default()).unwrap();
        for (point, expected) in [
            (Point2::new(0.4, 0.0), 0.0),
            (Point2::new(0.6, 1.0), 1.0),
            (Point2::new(0.5, 0.5), 0.5),
            (Point2::new(0.25, 0.75), 0.75),
        ] {
            let value = sol.evaluate(&mesh, point).unwrap();
            assert!(
                (value - expected).abs() < 1e-10,
                "u({}, {}) = {value}, expected {expected}",
                point.x,
                point.y
            );
        }
        assert!(sol
            .evaluate(&mesh, Point2::new(3.0, 3.0))
            .is_err());
    }

    #[test]
    fn disk_with_symmetric_marks_has_unit_energy() {
        let mesh = interior_mesh(
            &circle_quad(),
            &MeshOptions {
                nu: 12,
                ..MeshOptions::default()
            },
        )
        .unwrap();
        let degrees = assign_degrees(&mesh, DegreeMode::Graded { p_max: 12 });
        let sol = solve(&mesh, &degrees, PlateSides::default()).unwrap();
        assert!(
            (sol.energy - 1.0).abs() < 1e-9,
            "disk energy {}",
            sol.energy
        );
        let center = sol.evaluate(&mesh, Point2::new(0.0, 0.0)).unwrap();
        assert!((center - 0.5).abs() < 1e-8, "center value {center}");
    }

    #[test]
    #[ignore]
    fn probe_flower_jacobian() {
        use crate::geometry::{flower_quad, invert_quadrilateral};
        let quad = flower_quad(4).unwrap();
        let quad = invert_quadrilateral(&quad, Point2::new(0.0, 0.0)).unwrap();
        for alpha in [0.15, 0.12, 0.10] {
            let opts = MeshOptions {
                alpha,
                nu: 12,
                ..MeshOptions::default()
            };
            let mesh = interior_mesh(&quad, &opts).unwrap();
            let mut worst = (f64::INFINITY, usize::MAX);
            for ei in 0..mesh.elements.len() {
                if mesh.elements[ei].curved.is_empty() {
                    continue;
                }
                let e = &mesh.elements[ei];
                let (a, b, c) = (
                    mesh.vertices[e.v[0]],
                    mesh.vertices[e.v[1]],
                    mesh.vertices[e.v[2]],
                );
                let twice_area =
                    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                let map = ElementMap::new(&mesh, ei);
                for i in 0..=20 {
                    for j in 0..=(20 - i) {
                        let (xi, eta) = (i as f64 / 20.0, j as f64 / 20.0);
                        let (_, jac) = map.point_and_jacobian(xi, eta);
                        let d = det2(&jac) / twice_area;
                        if d < worst.0 {
                            worst = (d, ei);
                        }
                    }
                }
            }
            let e = &mesh.elements[worst.1];
            let vs: Vec<Point2> = e.v.iter().map(|&v| mesh.vertices[v]).collect();
            println!(
                "alpha {alpha:.2}: {} elems, min det ratio {:.3e} at elem {} layer {:?} curved {} v {:?}",
                mesh.elements.len(),
                worst.0,
                worst.1,
                e.layer,
                e.curved.len(),
                vs
            );
        }
    }

    #[test]
    #[ignore]
    fn probe_disk_convergence() {
        for nu in [6, 8, 10, 12] {
            let mesh = interior_mesh(
                &circle_quad(),
                &MeshOptions {
                    nu,
                    ..MeshOptions::default()
                },
            )
            .unwrap();
            for p_max in [8, 10, 12] {
                let degrees = assign_degrees(&mesh, DegreeMode::Graded { p_max });
                let sol = solve(&mesh, &degrees, PlateSides::default()).unwrap();
                println!(
                    "nu {nu:2} p_max {p_max:2} elems {:4} dofs {:6} |E-1| {:.3e}",
                    mesh.elements.len(),
                    sol.total_dofs,
                    (sol.energy - 1.0).abs()
                );
            }
        }
    }

    #[test]
    fn plate_assignment_is_validated() {
        let mesh = interior_mesh(&unit_square(), &MeshOptions::default()).unwrap();
        let degrees = assign_degrees(&mesh, DegreeMode::Constant(1));
        assert!(solve(&mesh, &degrees, PlateSides { zero: 1, one: 1 }).is_err());
        assert!(solve(&mesh, &degrees, PlateSides { zero: 0, one: 4 }).is_err());
    }
}
