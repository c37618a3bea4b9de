//! Triangular meshes for the quadrilateral domains, built corner-patch
//! first: every corner (and every tangent-discontinuous junction between
//! boundary pieces) gets an isolating fan of one to three triangles, the fan
//! is geometrically refined toward the corner, and the remaining region is
//! triangulated by ear clipping followed by Lawson flips.
//!
//! Refinement only subdivides the fans, scaling the fan rim toward the
//! corner by the grading factor alpha per level and snapping the two rim
//! points that lie on the boundary back onto the exact curve. Rings between
//! consecutive rims split into two triangles each, so the mesh stays
//! conforming without any transition elements. Elements carry a layer index
//! (0 at the corner, growing outward, `None` off the patches) from which
//! graded polynomial degrees are assigned.
//!
//! The exterior variant meshes the region between the quadrilateral and a
//! far circle: the boundary is traversed in reverse (so corner fans isolate
//! the exterior angles), four spokes from side-midpoint vertices cut the
//! near annulus into four blobs, and geometrically growing rings of
//! triangles continue out to the truncation radius.

use crate::geometry::{
    ccw_angle, BoundaryPiece, GeometryError, Point2, QuadrilateralSpec,
};
use std::collections::HashMap;
use thiserror::Error;

/// Angle slack for classifying corner angles against pi/2 and pi.
const ANGLE_TOL: f64 = 1e-9;
/// Tangent mismatch (radians) above which a piece junction counts as a corner.
const JUNCTION_TOL: f64 = 1e-6;
/// Cap on the fan radius as a fraction of the adjacent chain length.
const PATCH_CHAIN_FACTOR: f64 = 0.3;
/// Largest inner-to-outer radii ratio of a single fan ring.
const RING_MAX_RATIO: f64 = 0.5;
/// Cap on the size of a remaining-region triangle as a multiple of its
/// distance to the nearest corner.
const REGION_SIZE_SLOPE: f64 = 1.5;
/// Midpoint-insertion sweeps allowed when enforcing REGION_SIZE_SLOPE.
const REGION_REFINE_ROUNDS: usize = 12;
/// Cap on a curved edge's deviation from its chord as a multiple of the
/// opposite vertex's distance to that chord.
const REGION_BULGE_RATIO: f64 = 0.25;
/// Ratio between consecutive far-field ring radii.
const RING_GROWTH: f64 = 3.0;
/// Far circle radius as a multiple of the largest corner distance.
const NEAR_CIRCLE_FACTOR: f64 = 2.5;
/// Angular grid size on the far-field circles.
const CIRCLE_DIVISIONS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("degenerate configuration while meshing: {0}")]
    Degenerate(String),
    #[error("mesh validation failed: {0}")]
    Invalid(String),
}

/// Knobs controlling mesh generation.
#[derive(Debug, Clone, Copy)]
pub struct MeshOptions {
    /// Geometric grading factor per refinement level, in (0, 1).
    pub alpha: f64,
    /// Number of refinement levels toward each corner.
    pub nu: u32,
    /// Relative flatness tolerance when sampling curved boundary pieces.
    pub flatten_tol: f64,
}

impl Default for MeshOptions {
    fn default() -> Self {
        MeshOptions {
            alpha: 0.15,
            nu: 12,
            flatten_tol: 0.03,
        }
    }
}

/// Where a boundary edge of the mesh comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySource {
    /// Edge on side `j` of the quadrilateral (0..4).
    Side(usize),
    /// Edge on the artificial truncation circle of an exterior mesh.
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdgeInfo {
    pub a: usize,
    pub b: usize,
    pub source: BoundarySource,
}

#[derive(Debug, Clone)]
pub struct Element {
    /// Vertex indices in counterclockwise order.
    pub v: [usize; 3],
    /// Curved edges: local edge `k` runs from `v[k]` to `v[(k+1)%3]` along
    /// the stored piece (piece.point(0) at `v[k]`).
    pub curved: Vec<(usize, BoundaryPiece)>,
    /// Refinement layer: 0 at a corner, increasing outward, `None` outside
    /// the corner patches.
    pub layer: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point2>,
    pub elements: Vec<Element>,
    pub boundary_edges: Vec<BoundaryEdgeInfo>,
    /// A vertex on the truncation circle of an exterior mesh.
    pub far_vertex: Option<usize>,
}

/// How to assign polynomial degrees to elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegreeMode {
    Constant(u32),
    /// Degree min(p_max, 1 + layer) on patch elements, p_max elsewhere.
    Graded { p_max: u32 },
}

pub fn assign_degrees(mesh: &Mesh, mode: DegreeMode) -> Vec<u32> {
    mesh.elements
        .iter()
        .map(|e| match mode {
            DegreeMode::Constant(p) => p.max(1),
            DegreeMode::Graded { p_max } => match e.layer {
                Some(layer) => (1 + layer).min(p_max).max(1),
                None => p_max.max(1),
            },
        })
        .collect()
}

impl Mesh {
    fn scale(&self) -> f64 {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = Point2::new(lo.x.min(v.x), lo.y.min(v.y));
            hi = Point2::new(hi.x.max(v.x), hi.y.max(v.y));
        }
        (hi - lo).norm().max(f64::MIN_POSITIVE)
    }

    /// Checks conformity: positively oriented elements, every edge shared by
    /// at most two elements with opposite traversal, and the set of
    /// single-element edges exactly matching the recorded boundary edges.
    pub fn validate(&self) -> Result<(), MeshError> {
        let scale = self.scale();
        for v in &self.vertices {
            if !(v.x.is_finite() && v.y.is_finite()) {
                return Err(MeshError::Invalid("non-finite vertex".into()));
            }
        }
        let mut edge_count: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for (ei, elem) in self.elements.iter().enumerate() {
            let [a, b, c] = elem.v;
            if a == b || b == c || a == c || elem.v.iter().any(|&i| i >= self.vertices.len()) {
                return Err(MeshError::Invalid(format!("bad vertex list in element {ei}")));
            }
            let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
            if (pb - pa).cross(pc - pa) <= 0.0 {
                return Err(MeshError::Invalid(format!(
                    "element {ei} (layer {:?}) is not positively oriented: \
                     ({:?}, {:?}, {:?})",
                    elem.layer, pa, pb, pc
                )));
            }
            for k in 0..3 {
                let (u, w) = (elem.v[k], elem.v[(k + 1) % 3]);
                let key = (u.min(w), u.max(w));
                let entry = edge_count.entry(key).or_insert((0, 0));
                if u < w {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
            for (k, piece) in &elem.curved {
                let u = self.vertices[elem.v[*k]];
                let w = self.vertices[elem.v[(*k + 1) % 3]];
                if piece.start().dist(u) > 1e-9 * scale || piece.end().dist(w) > 1e-9 * scale {
                    return Err(MeshError::Invalid(format!(
                        "curved edge of element {ei} does not match its vertices"
                    )));
                }
            }
        }
        let mut boundary: HashMap<(usize, usize), usize> = HashMap::new();
        for info in &self.boundary_edges {
            let key = (info.a.min(info.b), info.a.max(info.b));
            *boundary.entry(key).or_insert(0) += 1;
        }
        for (key, n) in &boundary {
            if *n > 1 {
                return Err(MeshError::Invalid(format!(
                    "boundary edge {key:?} recorded {n} times"
                )));
            }
        }
        for (key, (fwd, rev)) in &edge_count {
            let total = fwd + rev;
            match total {
                1 => {
                    if !boundary.contains_key(key) {
                        return Err(MeshError::Invalid(format!(
                            "edge {key:?} lies on the mesh rim but is not a recorded boundary edge"
                        )));
                    }
                }
                2 => {
                    if *fwd != 1 || *rev != 1 {
                        return Err(MeshError::Invalid(format!(
                            "edge {key:?} traversed twice in the same direction"
                        )));
                    }
                    if boundary.contains_key(key) {
                        return Err(MeshError::Invalid(format!(
                            "interior edge {key:?} recorded as boundary"
                        )));
                    }
                }
                n => {
                    return Err(MeshError::Invalid(format!(
                        "edge {key:?} shared by {n} elements"
                    )));
                }
            }
        }
        for (key, _) in &boundary {
            if !edge_count.contains_key(key) {
                return Err(MeshError::Invalid(format!(
                    "recorded boundary edge {key:?} is not an element edge"
                )));
            }
        }
        Ok(())
    }

    /// Plain-text dump: vertex coordinates, element connectivity with layer
    /// markers, and tagged boundary edges.
    pub fn export_plain(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "vertices {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{:.17e} {:.17e}", v.x, v.y);
        }
        let _ = writeln!(out, "elements {}", self.elements.len());
        for e in &self.elements {
            let layer = e.layer.map_or(-1i64, |l| l as i64);
            let _ = writeln!(out, "{} {} {} {}", e.v[0], e.v[1], e.v[2], layer);
        }
        let _ = writeln!(out, "boundary {}", self.boundary_edges.len());
        for b in &self.boundary_edges {
            let tag = match b.source {
                BoundarySource::Side(j) => j as i64,
                BoundarySource::Outer => -1,
            };
            let _ = writeln!(out, "{} {} {}", b.a, b.b, tag);
        }
        out
    }
}

/// Position along a chain of boundary pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ChainPos {
    piece: usize,
    s: f64,
}

impl ChainPos {
    fn key(&self) -> f64 {
        self.piece as f64 + self.s
    }
}

/// A run of consecutive boundary pieces between two corner nodes, tagged
/// with the quadrilateral side it belongs to.
struct Chain {
    side: usize,
    pieces: Vec<BoundaryPiece>,
    /// Flattening samples covering the chain, including both endpoints and
    /// both sides of every internal piece junction.
    proxy: Vec<(ChainPos, Point2)>,
}

impl Chain {
    fn new(side: usize, pieces: Vec<BoundaryPiece>, flatten_tol: f64) -> Chain {
        let mut proxy = Vec::new();
        for (pi, piece) in pieces.iter().enumerate() {
            for s in piece.flatten(flatten_tol) {
                proxy.push((ChainPos { piece: pi, s }, piece.point(s)));
            }
        }
        Chain { side, pieces, proxy }
    }

    fn point(&self, pos: ChainPos) -> Point2 {
        self.pieces[pos.piece].point(pos.s)
    }

    fn start_pos(&self) -> ChainPos {
        ChainPos { piece: 0, s: 0.0 }
    }

    fn end_pos(&self) -> ChainPos {
        ChainPos {
            piece: self.pieces.len() - 1,
            s: 1.0,
        }
    }

    fn start(&self) -> Point2 {
        self.pieces[0].start()
    }

    fn end(&self) -> Point2 {
        self.pieces.last().expect("chains are non-empty").end()
    }

    /// Sum of the proxy sub-chord lengths, a polyline stand-in for the arc
    /// length of the chain.
    fn chord_len(&self) -> f64 {
        self.proxy
            .windows(2)
            .map(|w| w[0].1.dist(w[1].1))
            .sum()
    }

    /// Shortest curved proxy sub-chord within a polyline walk of `walk`
    /// from the chosen chain end; infinite when that window is straight.
    fn min_curved_subchord_within(&self, walk: f64, from_end: bool) -> f64 {
        let n = self.proxy.len();
        let mut acc = 0.0;
        let mut min = f64::INFINITY;
        for i in 1..n {
            let (a, b) = if from_end {
                (&self.proxy[n - i], &self.proxy[n - 1 - i])
            } else {
                (&self.proxy[i - 1], &self.proxy[i])
            };
            let d = a.1.dist(b.1);
            if a.0.piece == b.0.piece && d > 0.0 && !self.pieces[a.0.piece].is_straight() {
                min = min.min(d);
            }
            acc += d;
            if acc >= walk {
                break;
            }
        }
        min
    }

    /// Largest fan radius not above `r` whose boundary window is locally
    /// flat: every curved sub-chord within a three-radius walk of the
    /// corner must be at least half the radius, so the outermost ring
    /// dwarfs the sagitta of its boundary edge.
    fn curvature_cap(&self, from_end: bool, mut r: f64) -> f64 {
        for _ in 0..60 {
            let m = self.min_curved_subchord_within(3.0 * r, from_end);
            if r <= 2.0 * m {
                break;
            }
            r = 2.0 * m;
        }
        r
    }

    /// The sub-run between two positions on the same piece, reparametrized
    /// over [0, 1].
    fn subpiece(&self, from: ChainPos, to: ChainPos) -> BoundaryPiece {
        assert_eq!(
            from.piece, to.piece,
            "mesh edges must not span piece junctions"
        );
        self.pieces[from.piece].subpiece(from.s, to.s)
    }

    /// First position (walking from the start) at chordal distance `rho`
    /// from the chain start.
    fn cut_from_start(&self, rho: f64) -> Result<ChainPos, MeshError> {
        let anchor = self.start();
        self.cut(rho, anchor, false)
    }

    /// First position (walking from the end) at chordal distance `rho` from
    /// the chain end.
    fn cut_from_end(&self, rho: f64) -> Result<ChainPos, MeshError> {
        let anchor = self.end();
        self.cut(rho, anchor, true)
    }

    fn cut(&self, rho: f64, anchor: Point2, from_end: bool) -> Result<ChainPos, MeshError> {
        let n = self.proxy.len();
        let sample = |i: usize| {
            if from_end {
                self.proxy[n - 1 - i]
            } else {
                self.proxy[i]
            }
        };
        let mut bracket = None;
        for i in 1..n {
            if sample(i).1.dist(anchor) >= rho {
                bracket = Some((sample(i - 1), sample(i)));
                break;
            }
        }
        let (mut inner, mut outer) = bracket.ok_or_else(|| {
            MeshError::Degenerate(format!("fan radius {rho} exceeds the adjacent chain"))
        })?;
        if inner.0.piece != outer.0.piece {
            return Err(MeshError::Degenerate(
                "fan radius crosses a piece junction".into(),
            ));
        }
        let piece = &self.pieces[inner.0.piece];
        for _ in 0..60 {
            let smid = 0.5 * (inner.0.s + outer.0.s);
            let pmid = piece.point(smid);
            let mid = (
                ChainPos {
                    piece: inner.0.piece,
                    s: smid,
                },
                pmid,
            );
            if pmid.dist(anchor) < rho {
                inner = mid;
            } else {
                outer = mid;
            }
        }
        Ok(outer.0)
    }

    /// Proxy samples strictly between two positions, skipping points that
    /// crowd the interval ends.
    fn proxy_between(&self, from: ChainPos, to: ChainPos, clearance: f64) -> Vec<(ChainPos, Point2)> {
        let (pa, pb) = (self.point(from), self.point(to));
        self.proxy
            .iter()
            .filter(|(pos, p)| {
                pos.key() > from.key() + 1e-12
                    && pos.key() < to.key() - 1e-12
                    && p.dist(pa) > clearance
                    && p.dist(pb) > clearance
            })
            .cloned()
            .collect()
    }
}

/// A corner of the meshing boundary: a marked corner of the quadrilateral
/// or a tangent-discontinuous junction inside a side.
struct CornerNode {
    point: Point2,
    /// Interior angle of the meshed region at this node, in (0, 2 pi).
    angle: f64,
}

/// Splits the traversal (given as ordered (side, pieces) runs forming a
/// closed loop) into corner nodes and the chains between them. Node `i`
/// sits between chain `i-1` (incoming) and chain `i` (outgoing).
fn build_chains(
    sides: Vec<(usize, Vec<BoundaryPiece>)>,
    flatten_tol: f64,
) -> (Vec<CornerNode>, Vec<Chain>) {
    let mut chains = Vec::new();
    for (tag, pieces) in sides {
        let mut run: Vec<BoundaryPiece> = Vec::new();
        for piece in pieces {
            if let Some(prev) = run.last() {
                let t_in = prev.tangent(1.0);
                let t_out = piece.tangent(0.0);
                let turn = t_in.cross(t_out).atan2(t_in.dot(t_out)).abs();
                if turn > JUNCTION_TOL {
                    chains.push(Chain::new(tag, std::mem::take(&mut run), flatten_tol));
                }
            }
            run.push(piece);
        }
        chains.push(Chain::new(tag, run, flatten_tol));
    }
    let n = chains.len();
    let nodes = (0..n)
        .map(|i| {
            let incoming = &chains[(i + n - 1) % n];
            let outgoing = &chains[i];
            CornerNode {
                point: outgoing.start(),
                angle: ccw_angle(
                    outgoing.pieces[0].tangent(0.0),
                    -incoming.pieces.last().expect("non-empty").tangent(1.0),
                ),
            }
        })
        .collect();
    (nodes, chains)
}

fn sides_of(quad: &QuadrilateralSpec) -> Vec<(usize, Vec<BoundaryPiece>)> {
    quad.sides()
        .iter()
        .enumerate()
        .map(|(j, side)| (j, side.clone()))
        .collect()
}

/// The quadrilateral traversed backwards, so corner fans isolate the
/// exterior angles; side tags are preserved.
fn reversed_sides_of(quad: &QuadrilateralSpec) -> Vec<(usize, Vec<BoundaryPiece>)> {
    (0..4)
        .rev()
        .map(|j| {
            let pieces = quad.sides()[j]
                .iter()
                .rev()
                .map(|p| p.reversed())
                .collect();
            (j, pieces)
        })
        .collect()
}

struct Builder {
    vertices: Vec<Point2>,
    elements: Vec<Element>,
    boundary_edges: Vec<BoundaryEdgeInfo>,
}

impl Builder {
    fn new() -> Builder {
        Builder {
            vertices: Vec::new(),
            elements: Vec::new(),
            boundary_edges: Vec::new(),
        }
    }

    fn vertex(&mut self, p: Point2) -> usize {
        self.vertices.push(p);
        self.vertices.len() - 1
    }

    fn element(&mut self, v: [usize; 3], layer: Option<u32>) -> usize {
        self.elements.push(Element {
            v,
            curved: Vec::new(),
            layer,
        });
        self.elements.len() - 1
    }

    /// Attaches curve geometry to the element edge from `a` to `b`; the
    /// piece must run from the position of `a` to the position of `b`.
    fn attach_curve(&mut self, elem: usize, a: usize, b: usize, piece: BoundaryPiece) {
        if piece.is_straight() {
            return;
        }
        let v = self.elements[elem].v;
        let k = (0..3)
            .find(|&k| v[k] == a && v[(k + 1) % 3] == b)
            .expect("edge not found in element");
        self.elements[elem].curved.push((k, piece));
    }

    fn boundary_edge(&mut self, a: usize, b: usize, source: BoundarySource) {
        self.boundary_edges.push(BoundaryEdgeInfo { a, b, source });
    }

    /// Splits every element carrying more than one curved edge into three
    /// triangles around its centroid, so each element keeps at most one.
    fn split_multi_curved(&mut self) {
        for ei in 0..self.elements.len() {
            if self.elements[ei].curved.len() < 2 {
                continue;
            }
            let parent = self.elements[ei].clone();
            let centroid = (self.vertices[parent.v[0]]
                + self.vertices[parent.v[1]]
                + self.vertices[parent.v[2]])
                * (1.0 / 3.0);
            let g = self.vertex(centroid);
            let mut children = Vec::with_capacity(3);
            for k in 0..3 {
                let mut child = Element {
                    v: [parent.v[k], parent.v[(k + 1) % 3], g],
                    curved: Vec::new(),
                    layer: parent.layer,
                };
                for (m, piece) in &parent.curved {
                    if *m == k {
                        child.curved.push((0, piece.clone()));
                    }
                }
                children.push(child);
            }
            self.elements[ei] = children.pop().expect("three children");
            self.elements.extend(children);
        }
    }
}

/// Vertex indices of one rim level of a corner fan, outgoing cut first,
/// incoming cut last, rays between.
struct FanLevel {
    out_pos: ChainPos,
    in_pos: ChainPos,
    verts: Vec<usize>,
}

struct BuiltPatch {
    rho: f64,
    /// Level 0 is the outermost rim (fan radius rho).
    levels: Vec<FanLevel>,
}

fn sector_count(angle: f64) -> usize {
    if angle <= std::f64::consts::FRAC_PI_2 + ANGLE_TOL {
        1
    } else if angle <= std::f64::consts::PI + ANGLE_TOL {
        2
    } else {
        3
    }
}

/// Builds the fan and its geometric refinement for one corner node,
/// emitting ring and fan elements together with the boundary edges along
/// the two adjacent chains.
fn build_patch(
    builder: &mut Builder,
    corner_vertex: usize,
    node: &CornerNode,
    out_chain: &Chain,
    in_chain: &Chain,
    opts: &MeshOptions,
) -> Result<BuiltPatch, MeshError> {
    let n_tri = sector_count(node.angle);
    let cap = PATCH_CHAIN_FACTOR * out_chain.chord_len().min(in_chain.chord_len());
    let rho = out_chain
        .curvature_cap(false, cap)
        .min(in_chain.curvature_cap(true, cap));
    if !(rho > 0.0) {
        return Err(MeshError::Degenerate("zero fan radius at a corner".into()));
    }
    let out_dir = out_chain.pieces[0].tangent(0.0);
    let base_angle = out_dir.angle();
    // Ring triangles touch their inner radius while spanning to the outer
    // one, so each geometric level is cut into sub-rings that keep the
    // radii ratio at RING_MAX_RATIO or milder.
    let n_sub = ((opts.alpha.ln() / RING_MAX_RATIO.ln()).ceil() as usize).max(1);
    let n_rings = opts.nu as usize * n_sub;
    let mut levels = Vec::with_capacity(n_rings + 1);
    for step in 0..=n_rings {
        let radius = rho * opts.alpha.powf(step as f64 / n_sub as f64);
        let out_pos = out_chain.cut_from_start(radius)?;
        let in_pos = in_chain.cut_from_end(radius)?;
        let mut verts = Vec::with_capacity(n_tri + 1);
        verts.push(builder.vertex(out_chain.point(out_pos)));
        for i in 1..n_tri {
            let theta = base_angle + node.angle * i as f64 / n_tri as f64;
            verts.push(builder.vertex(node.point + Point2::from_polar(radius, theta)));
        }
        verts.push(builder.vertex(in_chain.point(in_pos)));
        levels.push(FanLevel {
            out_pos,
            in_pos,
            verts,
        });
    }

    for step in 1..=n_rings {
        let level = (step + n_sub - 1) / n_sub;
        let layer = opts.nu - level as u32 + 1;
        let outer = &levels[step - 1];
        let inner = &levels[step];
        for i in 0..n_tri {
            let (po, qo) = (outer.verts[i], outer.verts[i + 1]);
            let (pi_, qi) = (inner.verts[i], inner.verts[i + 1]);
            let t1 = builder.element([po, qo, qi], Some(layer));
            let t2 = builder.element([po, qi, pi_], Some(layer));
            if i == 0 {
                let piece = out_chain.subpiece(inner.out_pos, outer.out_pos);
                builder.boundary_edge(pi_, po, BoundarySource::Side(out_chain.side));
                builder.attach_curve(t2, pi_, po, piece);
            }
            if i == n_tri - 1 {
                let piece = in_chain.subpiece(outer.in_pos, inner.in_pos);
                builder.boundary_edge(qo, qi, BoundarySource::Side(in_chain.side));
                builder.attach_curve(t1, qo, qi, piece);
            }
        }
    }

    let last = &levels[n_rings];
    for i in 0..n_tri {
        let (p, q) = (last.verts[i], last.verts[i + 1]);
        let t = builder.element([corner_vertex, p, q], Some(0));
        if i == 0 {
            let piece = out_chain.subpiece(out_chain.start_pos(), last.out_pos);
            builder.boundary_edge(corner_vertex, p, BoundarySource::Side(out_chain.side));
            builder.attach_curve(t, corner_vertex, p, piece);
        }
        if i == n_tri - 1 {
            let piece = in_chain.subpiece(last.in_pos, in_chain.end_pos());
            builder.boundary_edge(q, corner_vertex, BoundarySource::Side(in_chain.side));
            builder.attach_curve(t, q, corner_vertex, piece);
        }
    }

    Ok(BuiltPatch { rho, levels })
}

/// A polygon edge of the rim that lies on the domain boundary, with the
/// exact geometry from the first vertex to the second.
struct RimEdgeGeometry {
    a: usize,
    b: usize,
    piece: BoundaryPiece,
}

/// Walks the patched boundary, emitting the rim polygon (fan rims plus the
/// chain runs between cut points) and boundary edges for the chain runs.
/// `extra` lists chain positions that must become rim vertices.
fn build_rim(
    builder: &mut Builder,
    nodes: &[CornerNode],
    chains: &[Chain],
    patches: &[BuiltPatch],
    extra: &HashMap<usize, Vec<ChainPos>>,
) -> Result<(Vec<usize>, Vec<RimEdgeGeometry>, Vec<Vec<usize>>), MeshError> {
    let n = nodes.len();
    let mut polygon = Vec::new();
    let mut geometry = Vec::new();
    let mut chain_runs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let rim = &patches[i].levels[0];
        for &v in rim.verts.iter().rev() {
            polygon.push(v);
        }
        let chain = &chains[i];
        let next = (i + 1) % n;
        let from = rim.out_pos;
        let to = patches[next].levels[0].in_pos;
        if from.key() >= to.key() {
            return Err(MeshError::Degenerate(
                "corner fans overlap along a chain".into(),
            ));
        }
        let clearance = 0.3 * patches[i].rho.min(patches[next].rho);
        let mut samples = chain.proxy_between(from, to, clearance);
        if let Some(required) = extra.get(&i) {
            for &pos in required {
                if pos.key() > from.key() + 1e-12 && pos.key() < to.key() - 1e-12 {
                    let p = chain.point(pos);
                    samples.retain(|(q, qp)| {
                        (q.key() - pos.key()).abs() > 1e-12 && qp.dist(p) > clearance
                    });
                    samples.push((pos, p));
                }
            }
            samples.sort_by(|a, b| a.0.key().total_cmp(&b.0.key()));
        }
        let mut run = vec![(from, *polygon.last().expect("rim has vertices"))];
        for (pos, p) in samples {
            let v = builder.vertex(p);
            polygon.push(v);
            run.push((pos, v));
        }
        run.push((to, patches[next].levels[0].verts[patches[next].levels[0].verts.len() - 1]));
        for w in run.windows(2) {
            let ((pa, va), (pb, vb)) = (w[0], w[1]);
            builder.boundary_edge(va, vb, BoundarySource::Side(chain.side));
            let piece = chain.subpiece(pa, pb);
            if !piece.is_straight() {
                geometry.push(RimEdgeGeometry {
                    a: va,
                    b: vb,
                    piece,
                });
            }
        }
        chain_runs[i] = run.iter().map(|&(_, v)| v).collect();
    }
    Ok((polygon, geometry, chain_runs))
}

/// Adds the ear-clipped, Lawson-flipped triangulation of `polygon` to the
/// builder, refined until every triangle is no larger than
/// REGION_SIZE_SLOPE times its distance to the nearest corner, and attaches
/// curved geometry to boundary edges.
fn triangulate_region(
    builder: &mut Builder,
    polygon: &[usize],
    geometry: &[RimEdgeGeometry],
    corners: &[Point2],
) -> Result<(), MeshError> {
    let mut triangles = triangulate_polygon(&builder.vertices, polygon)?;
    let mut geom_map: HashMap<(usize, usize), RimEdgeGeometry> = HashMap::new();
    for g in geometry {
        geom_map.insert(
            edge_key(g.a, g.b),
            RimEdgeGeometry {
                a: g.a,
                b: g.b,
                piece: g.piece.clone(),
            },
        );
    }
    let mut fixed = boundary_edge_set(polygon);
    refine_region(builder, &mut triangles, &mut fixed, &mut geom_map, corners);
    for tri in triangles {
        let e = builder.element(tri, None);
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            if let Some(g) = geom_map.get(&(a.min(b), a.max(b))) {
                let piece = if g.a == a {
                    g.piece.clone()
                } else {
                    g.piece.reversed()
                };
                builder.elements[e].curved.push((k, piece));
            }
        }
    }
    Ok(())
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Bisects the longest splittable edge of every oversized triangle until the
/// REGION_SIZE_SLOPE bound holds, re-running Lawson flips after each sweep.
/// Edges shared with patch rims or far-field rings stay untouched; boundary
/// edges split together with their records, curved ones at the point halfway
/// along the curve. A curved edge whose deviation from its chord exceeds
/// REGION_BULGE_RATIO times the opposite vertex's distance to the chord is
/// split as well, keeping the blended element maps invertible.
fn refine_region(
    builder: &mut Builder,
    triangles: &mut Vec<[usize; 3]>,
    fixed: &mut std::collections::HashSet<(usize, usize)>,
    geom_map: &mut HashMap<(usize, usize), RimEdgeGeometry>,
    corners: &[Point2],
) {
    for _ in 0..REGION_REFINE_ROUNDS {
        let mut queue: Vec<(f64, (usize, usize))> = Vec::new();
        let mut seen: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();
        for t in triangles.iter() {
            let p = [
                builder.vertices[t[0]],
                builder.vertices[t[1]],
                builder.vertices[t[2]],
            ];
            for k in 0..3 {
                let key = edge_key(t[k], t[(k + 1) % 3]);
                let Some(g) = geom_map.get(&key) else {
                    continue;
                };
                let (pa, pb, po) = (p[k], p[(k + 1) % 3], p[(k + 2) % 3]);
                let (ex, ey) = (pb.x - pa.x, pb.y - pa.y);
                let len = (ex * ex + ey * ey).sqrt();
                let line_dist =
                    |q: Point2| (ex * (q.y - pa.y) - ey * (q.x - pa.x)).abs() / len;
                let sagitta = [0.25, 0.5, 0.75]
                    .iter()
                    .map(|&s| line_dist(g.piece.point(s)))
                    .fold(0.0_f64, f64::max);
                if sagitta > REGION_BULGE_RATIO * line_dist(po) && seen.insert(key) {
                    queue.push((len, key));
                }
            }
            let h = p[0].dist(p[1]).max(p[1].dist(p[2])).max(p[2].dist(p[0]));
            let delta = p
                .iter()
                .map(|q| {
                    corners
                        .iter()
                        .map(|c| q.dist(*c))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(f64::INFINITY, f64::min);
            if h <= REGION_SIZE_SLOPE * delta {
                continue;
            }
            let mut best: Option<(f64, (usize, usize))> = None;
            for k in 0..3 {
                let key = edge_key(t[k], t[(k + 1) % 3]);
                if fixed.contains(&key)
                    && !builder
                        .boundary_edges
                        .iter()
                        .any(|be| edge_key(be.a, be.b) == key)
                {
                    continue;
                }
                let len = builder.vertices[key.0].dist(builder.vertices[key.1]);
                if best.map_or(true, |(l, _)| len > l) {
                    best = Some((len, key));
                }
            }
            if let Some((len, key)) = best {
                if seen.insert(key) {
                    queue.push((len, key));
                }
            }
        }
        if queue.is_empty() {
            return;
        }
        queue.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, key) in queue {
            split_region_edge(builder, triangles, fixed, geom_map, key);
        }
        lawson_flips(&builder.vertices, fixed, triangles);
    }
}

fn split_region_edge(
    builder: &mut Builder,
    triangles: &mut Vec<[usize; 3]>,
    fixed: &mut std::collections::HashSet<(usize, usize)>,
    geom_map: &mut HashMap<(usize, usize), RimEdgeGeometry>,
    key: (usize, usize),
) {
    let owners: Vec<usize> = triangles
        .iter()
        .enumerate()
        .filter(|(_, t)| (0..3).any(|k| edge_key(t[k], t[(k + 1) % 3]) == key))
        .map(|(i, _)| i)
        .collect();
    if owners.is_empty() {
        return;
    }
    let pa = builder.vertices[key.0];
    let pb = builder.vertices[key.1];
    let mid_point = match geom_map.get(&key) {
        Some(g) => g.piece.point(0.5),
        None => Point2::new(0.5 * (pa.x + pb.x), 0.5 * (pa.y + pb.y)),
    };
    let mid = builder.vertex(mid_point);
    if let Some(g) = geom_map.remove(&key) {
        geom_map.insert(
            edge_key(g.a, mid),
            RimEdgeGeometry {
                a: g.a,
                b: mid,
                piece: g.piece.subpiece(0.0, 0.5),
            },
        );
        geom_map.insert(
            edge_key(mid, g.b),
            RimEdgeGeometry {
                a: mid,
                b: g.b,
                piece: g.piece.subpiece(0.5, 1.0),
            },
        );
    }
    if fixed.remove(&key) {
        fixed.insert(edge_key(key.0, mid));
        fixed.insert(edge_key(mid, key.1));
        if let Some(i) = builder
            .boundary_edges
            .iter()
            .position(|be| edge_key(be.a, be.b) == key)
        {
            let old = builder.boundary_edges[i];
            builder.boundary_edges[i] = BoundaryEdgeInfo {
                a: old.a,
                b: mid,
                source: old.source,
            };
            builder.boundary_edges.push(BoundaryEdgeInfo {
                a: mid,
                b: old.b,
                source: old.source,
            });
        }
    }
    for ti in owners {
        let t = triangles[ti];
        let k = (0..3)
            .find(|&k| edge_key(t[k], t[(k + 1) % 3]) == key)
            .expect("owner has the edge");
        let (i, j, o) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
        triangles[ti] = [i, mid, o];
        triangles.push([mid, j, o]);
    }
}

/// Ear clipping with a quality preference, then Lawson flips on interior
/// diagonals. Expects a simple polygon, counterclockwise.
fn triangulate_polygon(
    points: &[Point2],
    polygon: &[usize],
) -> Result<Vec<[usize; 3]>, MeshError> {
    let n = polygon.len();
    if n < 3 {
        return Err(MeshError::Degenerate("polygon with fewer than 3 vertices".into()));
    }
    let scale = polygon
        .iter()
        .zip(polygon.iter().cycle().skip(1))
        .map(|(&a, &b)| points[a].dist(points[b]))
        .fold(0.0_f64, f64::max);
    let area_eps = 1e-12 * scale * scale;
    let mut ring: Vec<usize> = polygon.to_vec();
    let mut triangles = Vec::with_capacity(n - 2);
    while ring.len() > 3 {
        let m = ring.len();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..m {
            let (a, b, c) = (
                ring[(i + m - 1) % m],
                ring[i],
                ring[(i + 1) % m],
            );
            let (pa, pb, pc) = (points[a], points[b], points[c]);
            let area2 = (pb - pa).cross(pc - pa);
            if area2 <= area_eps {
                continue;
            }
            let mut blocked = false;
            for &other in &ring {
                if other == a || other == b || other == c {
                    continue;
                }
                if point_in_triangle(points[other], pa, pb, pc, area_eps) {
                    blocked = true;
                    break;
                }
            }
            if blocked {
                continue;
            }
            for j in 0..m {
                let (u, v) = (ring[j], ring[(j + 1) % m]);
                if u == a || u == b || u == c || v == a || v == b || v == c {
                    continue;
                }
                if segments_cross(pa, pc, points[u], points[v], area_eps) {
                    blocked = true;
                    break;
                }
            }
            if blocked {
                continue;
            }
            let quality = min_angle(pa, pb, pc);
            if quality > 0.35 {
                best = Some((i, quality));
                break;
            }
            if best.map_or(true, |(_, q)| quality > q) {
                best = Some((i, quality));
            }
        }
        let (i, _) = best.ok_or_else(|| {
            MeshError::Degenerate("no ear found; polygon may be self-intersecting".into())
        })?;
        let m = ring.len();
        triangles.push([ring[(i + m - 1) % m], ring[i], ring[(i + 1) % m]]);
        ring.remove(i);
    }
    let (pa, pb, pc) = (points[ring[0]], points[ring[1]], points[ring[2]]);
    if (pb - pa).cross(pc - pa) <= area_eps {
        return Err(MeshError::Degenerate(
            "ear clipping left a degenerate final triangle".into(),
        ));
    }
    triangles.push([ring[0], ring[1], ring[2]]);

    lawson_flips(points, &boundary_edge_set(polygon), &mut triangles);
    Ok(triangles)
}

fn boundary_edge_set(polygon: &[usize]) -> std::collections::HashSet<(usize, usize)> {
    let n = polygon.len();
    let mut fixed = std::collections::HashSet::new();
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        fixed.insert((a.min(b), a.max(b)));
    }
    fixed
}

fn point_in_triangle(p: Point2, a: Point2, b: Point2, c: Point2, eps: f64) -> bool {
    let d1 = (b - a).cross(p - a);
    let d2 = (c - b).cross(p - b);
    let d3 = (a - c).cross(p - c);
    d1 >= -eps && d2 >= -eps && d3 >= -eps
}

/// Whether the open segments (p1, p2) and (q1, q2) cross properly, with
/// cross products below `eps` treated as collinear (no crossing).
fn segments_cross(p1: Point2, p2: Point2, q1: Point2, q2: Point2, eps: f64) -> bool {
    let d1 = (p2 - p1).cross(q1 - p1);
    let d2 = (p2 - p1).cross(q2 - p1);
    let d3 = (q2 - q1).cross(p1 - q1);
    let d4 = (q2 - q1).cross(p2 - q1);
    d1.max(d2) > eps && d1.min(d2) < -eps && d3.max(d4) > eps && d3.min(d4) < -eps
}

/// Whether the radial segment from rim vertex `v` out to the circle of
/// `near_radius` about `center` avoids every rim edge not incident to `v`.
fn radial_path_is_clear(
    vertices: &[Point2],
    polygon: &[usize],
    v: usize,
    center: Point2,
    near_radius: f64,
) -> bool {
    let p = vertices[v];
    let head = center + Point2::from_polar(near_radius, (p - center).angle());
    let m = polygon.len();
    (0..m).all(|i| {
        let (a, b) = (polygon[i], polygon[(i + 1) % m]);
        a == v || b == v || !segments_cross(p, head, vertices[a], vertices[b], 0.0)
    })
}

fn min_angle(a: Point2, b: Point2, c: Point2) -> f64 {
    let angle = |u: Point2, v: Point2| {
        let d = u.cross(v).abs().atan2(u.dot(v));
        d.abs()
    };
    angle(b - a, c - a)
        .min(angle(c - b, a - b))
        .min(angle(a - c, b - c))
}

fn lawson_flips(
    points: &[Point2],
    fixed: &std::collections::HashSet<(usize, usize)>,
    triangles: &mut Vec<[usize; 3]>,
) {
    let max_passes = 8 * triangles.len().max(8);
    for _ in 0..max_passes {
        let mut edge_map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (ti, t) in triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edge_map.entry((a.min(b), a.max(b))).or_default().push(ti);
            }
        }
        let mut edges: Vec<(&(usize, usize), &Vec<usize>)> = edge_map.iter().collect();
        edges.sort_by_key(|(edge, _)| **edge);
        let mut flipped = false;
        for (edge, owners) in edges {
            if owners.len() != 2 || fixed.contains(edge) {
                continue;
            }
            let (t1, t2) = (owners[0], owners[1]);
            let w1 = opposite_vertex(&triangles[t1], *edge);
            let w2 = opposite_vertex(&triangles[t2], *edge);
            let (u, v) = *edge;
            if !incircle_violated(points[u], points[v], points[w1], points[w2]) {
                continue;
            }
            let n1 = orient_ccw([u, w2, w1], points);
            let n2 = orient_ccw([v, w1, w2], points);
            match (n1, n2) {
                (Some(a), Some(b)) => {
                    triangles[t1] = a;
                    triangles[t2] = b;
                    flipped = true;
                    break;
                }
                _ => continue,
            }
        }
        if !flipped {
            break;
        }
    }
}

fn opposite_vertex(t: &[usize; 3], edge: (usize, usize)) -> usize {
    *t.iter()
        .find(|&&v| v != edge.0 && v != edge.1)
        .expect("triangle contains the edge")
}

fn orient_ccw(t: [usize; 3], points: &[Point2]) -> Option<[usize; 3]> {
    let (a, b, c) = (points[t[0]], points[t[1]], points[t[2]]);
    let cross = (b - a).cross(c - a);
    if cross > 0.0 {
        Some(t)
    } else {
        None
    }
}

/// Whether `d` lies strictly inside the circumcircle of CCW triangle
/// (a, b, c), with a relative tolerance against flip cycling.
fn incircle_violated(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let m = [
        [a.x - d.x, a.y - d.y, (a.x - d.x).powi(2) + (a.y - d.y).powi(2)],
        [b.x - d.x, b.y - d.y, (b.x - d.x).powi(2) + (b.y - d.y).powi(2)],
        [c.x - d.x, c.y - d.y, (c.x - d.x).powi(2) + (c.y - d.y).powi(2)],
    ];
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let orient = (b - a).cross(c - a);
    let scale = (a.dist(d) * b.dist(d) * c.dist(d)).powf(4.0 / 3.0).max(f64::MIN_POSITIVE);
    orient.signum() * det > 1e-11 * scale
}

/// Mesh of the interior of the quadrilateral.
pub fn interior_mesh(quad: &QuadrilateralSpec, opts: &MeshOptions) -> Result<Mesh, MeshError> {
    let (nodes, chains) = build_chains(sides_of(quad), opts.flatten_tol);
    let mut builder = Builder::new();
    let corner_vertices: Vec<usize> = nodes.iter().map(|nd| builder.vertex(nd.point)).collect();
    let n = nodes.len();
    let mut patches = Vec::with_capacity(n);
    for i in 0..n {
        let patch = build_patch(
            &mut builder,
            corner_vertices[i],
            &nodes[i],
            &chains[i],
            &chains[(i + n - 1) % n],
            opts,
        )?;
        patches.push(patch);
    }
    let (polygon, geometry, _) = build_rim(&mut builder, &nodes, &chains, &patches, &HashMap::new())?;
    let corners: Vec<Point2> = nodes.iter().map(|nd| nd.point).collect();
    triangulate_region(&mut builder, &polygon, &geometry, &corners)?;
    builder.split_multi_curved();
    let mesh = Mesh {
        vertices: builder.vertices,
        elements: builder.elements,
        boundary_edges: builder.boundary_edges,
        far_vertex: None,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Mesh of the exterior of the quadrilateral, truncated by a circle of the
/// given radius centered at the corner centroid, on which the far vertex is
/// reported and which is tagged `BoundarySource::Outer`.
pub fn truncated_exterior_mesh(
    quad: &QuadrilateralSpec,
    opts: &MeshOptions,
    radius: f64,
) -> Result<Mesh, MeshError> {
    let center = quad.corner_centroid();
    let near_radius = NEAR_CIRCLE_FACTOR * quad.max_radius_about(center);
    if !(radius > RING_GROWTH * near_radius) {
        return Err(MeshError::Degenerate(format!(
            "truncation radius {radius} too small for a domain of extent {near_radius}"
        )));
    }
    let (nodes, chains) = build_chains(reversed_sides_of(quad), opts.flatten_tol);
    let mut builder = Builder::new();
    let corner_vertices: Vec<usize> = nodes.iter().map(|nd| builder.vertex(nd.point)).collect();
    let n = nodes.len();
    let mut patches = Vec::with_capacity(n);
    for i in 0..n {
        let patch = build_patch(
            &mut builder,
            corner_vertices[i],
            &nodes[i],
            &chains[i],
            &chains[(i + n - 1) % n],
            opts,
        )?;
        patches.push(patch);
    }

    // Preview of the rim walk (fan rims plus chain proxy samples), with
    // chain attribution where a sub-chord runs along a chain. Spoke feet
    // are screened against it before the rim is actually built.
    let mut walk: Vec<(Point2, Option<(usize, f64)>)> = Vec::new();
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let next = (i + 1) % n;
        let rim = &patches[i].levels[0];
        let len = rim.verts.len();
        for (j, &v) in rim.verts.iter().rev().enumerate() {
            let tag = if j == 0 {
                Some((prev, rim.in_pos.key()))
            } else if j == len - 1 {
                Some((i, rim.out_pos.key()))
            } else {
                None
            };
            walk.push((builder.vertices[v], tag));
        }
        let clearance = 0.3 * patches[i].rho.min(patches[next].rho);
        let samples =
            chains[i].proxy_between(rim.out_pos, patches[next].levels[0].in_pos, clearance);
        for (pos, p) in samples {
            walk.push((p, Some((i, pos.key()))));
        }
    }

    // One spoke foot per quadrilateral side, on the side's longest chain.
    // The foot must see the near circle along its own radius, so candidate
    // positions are tried nearest the chain middle first and rejected while
    // the radial connector crosses the rim preview; corner fans and other
    // sides can shadow parts of a chain from the circle's center.
    let mut extra: HashMap<usize, Vec<ChainPos>> = HashMap::new();
    let mut foot_chain = [usize::MAX; 4];
    for side in 0..4 {
        let chain_idx = chains
            .iter()
            .enumerate()
            .filter(|(_, c)| c.side == side)
            .max_by(|a, b| a.1.chord_len().total_cmp(&b.1.chord_len()))
            .map(|(i, _)| i)
            .ok_or_else(|| MeshError::Degenerate(format!("side {side} has no chain")))?;
        let chain = &chains[chain_idx];
        let next = (chain_idx + 1) % n;
        let ka = patches[chain_idx].levels[0].out_pos.key();
        let kb = patches[next].levels[0].in_pos.key();
        let clearance = 0.3 * patches[chain_idx].rho.min(patches[next].rho);
        let steps = 32;
        let mut keys: Vec<f64> = (1..steps)
            .map(|t| ka + (kb - ka) * t as f64 / steps as f64)
            .collect();
        let mid = 0.5 * (ka + kb);
        keys.sort_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()));
        let pos = keys
            .iter()
            .filter(|k| k.fract() > 0.02 && k.fract() < 0.98)
            .map(|&k| ChainPos {
                piece: k.floor() as usize,
                s: k.fract(),
            })
            .find(|&pos| {
                let p = chain.point(pos);
                let head = center + Point2::from_polar(near_radius, (p - center).angle());
                (0..walk.len()).all(|w| {
                    let (a, ta) = walk[w];
                    let (b, tb) = walk[(w + 1) % walk.len()];
                    if let (Some((ca, ya)), Some((cb, yb))) = (ta, tb) {
                        let covers = ya.min(yb) <= pos.key() && pos.key() <= ya.max(yb);
                        if ca == chain_idx
                            && cb == chain_idx
                            && (covers || a.dist(p) < clearance || b.dist(p) < clearance)
                        {
                            return true;
                        }
                    }
                    !segments_cross(p, head, a, b, 0.0)
                })
            })
            .ok_or_else(|| {
                MeshError::Degenerate(format!(
                    "no spoke foot on side {side} sees the near circle"
                ))
            })?;
        extra.entry(chain_idx).or_default().push(pos);
        foot_chain[side] = chain_idx;
    }
    let (polygon, geometry, chain_runs) =
        build_rim(&mut builder, &nodes, &chains, &patches, &extra)?;
    let corners: Vec<Point2> = nodes.iter().map(|nd| nd.point).collect();

    // Identify the foot vertices on the rim: per side, the chain-run vertex
    // nearest the mid position whose radial connector out to the near circle
    // stays clear of the rim. Corner fans can shadow parts of a chain from
    // the circle's center, so the mid vertex is not always usable.
    let mut feet = Vec::with_capacity(4);
    for side in 0..4 {
        let chain_idx = foot_chain[side];
        let chain = &chains[chain_idx];
        let target = chain.point(extra[&chain_idx][0]);
        let mut candidates = chain_runs[chain_idx].clone();
        candidates.sort_by(|&a, &b| {
            builder.vertices[a]
                .dist(target)
                .total_cmp(&builder.vertices[b].dist(target))
        });
        let foot = candidates
            .into_iter()
            .find(|&v| radial_path_is_clear(&builder.vertices, &polygon, v, center, near_radius))
            .ok_or_else(|| {
                MeshError::Degenerate(format!(
                    "no vertex on side {side} sees the near circle radially"
                ))
            })?;
        feet.push(foot);
    }
    // Order the feet along the rim polygon.
    let rim_index: HashMap<usize, usize> = polygon.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    feet.sort_by_key(|v| rim_index[v]);

    // Angular grid on the circles: each gap between consecutive spoke
    // angles (taken counterclockwise) is subdivided evenly.
    let spoke_angles: Vec<f64> = feet
        .iter()
        .map(|&v| (builder.vertices[v] - center).angle())
        .collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| spoke_angles[i].total_cmp(&spoke_angles[j]));
    let per_gap = CIRCLE_DIVISIONS / 4;
    let mut grid_angles = Vec::with_capacity(CIRCLE_DIVISIONS);
    let mut head_slot = [0usize; 4];
    for k in 0..4 {
        let a0 = spoke_angles[order[k]];
        let a1 = spoke_angles[order[(k + 1) % 4]];
        let gap = (a1 - a0).rem_euclid(2.0 * std::f64::consts::PI);
        if gap < 1e-9 {
            return Err(MeshError::Degenerate(
                "two spokes share the same direction".into(),
            ));
        }
        head_slot[order[k]] = grid_angles.len();
        for t in 0..per_gap {
            grid_angles.push(a0 + gap * t as f64 / per_gap as f64);
        }
    }

    // Concentric circles from the near circle out to the truncation radius.
    let mut radii = vec![near_radius];
    while *radii.last().expect("non-empty") < radius {
        let next = (radii.last().expect("non-empty") * RING_GROWTH).min(radius);
        radii.push(next);
    }
    let rings: Vec<Vec<usize>> = radii
        .iter()
        .map(|&r| {
            grid_angles
                .iter()
                .map(|&a| builder.vertex(center + Point2::from_polar(r, a)))
                .collect()
        })
        .collect();

    // Blobs between consecutive feet (rim order) and the near circle.
    let m = CIRCLE_DIVISIONS;
    for k in 0..4 {
        let foot_a = feet[k];
        let foot_b = feet[(k + 1) % 4];
        let (ia, ib) = (rim_index[&foot_a], rim_index[&foot_b]);
        let mut blob = Vec::new();
        let mut i = ia;
        loop {
            blob.push(polygon[i]);
            if i == ib {
                break;
            }
            i = (i + 1) % polygon.len();
        }
        // Circle path from the head above foot_b counterclockwise back to
        // the head above foot_a.
        let side_b = (0..4).find(|&s| feet[s] == foot_b).expect("foot exists");
        let side_a = (0..4).find(|&s| feet[s] == foot_a).expect("foot exists");
        let (ha, hb) = (head_slot[side_a], head_slot[side_b]);
        let mut t = hb;
        loop {
            blob.push(rings[0][t]);
            if t == ha {
                break;
            }
            t = (t + 1) % m;
        }
        let signed_area: f64 = {
            let mut s = 0.0;
            for w in 0..blob.len() {
                let p = builder.vertices[blob[w]];
                let q = builder.vertices[blob[(w + 1) % blob.len()]];
                s += p.cross(q);
            }
            0.5 * s
        };
        if signed_area <= 0.0 {
            return Err(MeshError::Degenerate(
                "exterior blob is not positively oriented".into(),
            ));
        }
        triangulate_region(&mut builder, &blob, &geometry, &corners)?;
    }

    // Structured rings out to the truncation circle.
    for i in 0..rings.len() - 1 {
        let (inner, outer) = (&rings[i], &rings[i + 1]);
        for t in 0..m {
            let tn = (t + 1) % m;
            builder.element([inner[t], outer[t], outer[tn]], None);
            builder.element([inner[t], outer[tn], inner[tn]], None);
        }
    }
    let last = rings.last().expect("non-empty");
    for t in 0..m {
        let tn = (t + 1) % m;
        builder.boundary_edge(last[t], last[tn], BoundarySource::Outer);
    }
    let far_vertex = Some(last[0]);

    builder.split_multi_curved();
    let mesh = Mesh {
        vertices: builder.vertices,
        elements: builder.elements,
        boundary_edges: builder.boundary_edges,
        far_vertex,
    };
    mesh.validate()?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{circle_quad, flower_quad, invert_quadrilateral, side_slide_quad};

    fn unit_square() -> QuadrilateralSpec {
        QuadrilateralSpec::polygon([
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ])
        .unwrap()
    }

    fn l_shape() -> QuadrilateralSpec {
        let p = |x: f64, y: f64| Point2::new(x, y);
        let seg = |a: Point2, b: Point2| BoundaryPiece::segment(a, b);
        QuadrilateralSpec::from_sides([
            vec![seg(p(0.0, 0.0), p(2.0, 0.0))],
            vec![seg(p(2.0, 0.0), p(2.0, 1.0))],
            vec![seg(p(2.0, 1.0), p(1.0, 1.0)), seg(p(1.0, 1.0), p(1.0, 2.0))],
            vec![seg(p(1.0, 2.0), p(0.0, 2.0)), seg(p(0.0, 2.0), p(0.0, 0.0))],
        ])
        .unwrap()
    }

    #[test]
    fn square_mesh_counts_and_validity() {
        let opts = MeshOptions {
            nu: 2,
            ..MeshOptions::default()
        };
        let mesh = interior_mesh(&unit_square(), &opts).unwrap();
        // Four 1-sector fans: each geometric level splits into 3 sub-rings
        // of 2 triangles, plus the fan tip; the remaining octagon is
        // refined toward the corners into 32 triangles.
        assert_eq!(mesh.elements.len(), 4 * (3 * 2 * 2 + 1) + 32);
        assert!(mesh.far_vertex.is_none());
        let layers: Vec<Option<u32>> = mesh.elements.iter().map(|e| e.layer).collect();
        assert_eq!(layers.iter().filter(|l| **l == Some(0)).count(), 4);
        assert_eq!(layers.iter().filter(|l| **l == Some(1)).count(), 24);
        assert_eq!(layers.iter().filter(|l| **l == Some(2)).count(), 24);
        assert_eq!(layers.iter().filter(|l| l.is_none()).count(), 32);
        assert!(mesh.elements.iter().all(|e| e.curved.is_empty()));
    }

    #[test]
    fn refinement_scales_geometrically() {
        let opts = MeshOptions {
            alpha: 0.15,
            nu: 6,
            ..MeshOptions::default()
        };
        let mesh = interior_mesh(&unit_square(), &opts).unwrap();
        // The innermost boundary vertex on each chain sits at distance
        // alpha^nu * rho from its corner; for the unit square rho = 0.3.
        let corner = Point2::new(0.0, 0.0);
        let expected = 0.3 * 0.15f64.powi(6);
        let closest = mesh
            .vertices
            .iter()
            .filter(|v| v.dist(corner) > 1e-15)
            .map(|v| v.dist(corner))
            .fold(f64::INFINITY, f64::min);
        assert!(
            (closest - expected).abs() < 1e-12,
            "closest vertex at {closest}, expected {expected}"
        );
    }

    #[test]
    fn graded_degrees_follow_layers() {
        let opts = MeshOptions {
            nu: 3,
            ..MeshOptions::default()
        };
        let mesh = interior_mesh(&unit_square(), &opts).unwrap();
        let degrees = assign_degrees(&mesh, DegreeMode::Graded { p_max: 3 });
        for (e, &d) in mesh.elements.iter().zip(&degrees) {
            match e.layer {
                Some(l) => assert_eq!(d, (1 + l).min(3)),
                None => assert_eq!(d, 3),
            }
        }
        let constant = assign_degrees(&mesh, DegreeMode::Constant(5));
        assert!(constant.iter().all(|&d| d == 5));
    }

    #[test]
    fn l_shape_isolates_the_reflex_junction() {
        let opts = MeshOptions {
            nu: 1,
            ..MeshOptions::default()
        };
        let mesh = interior_mesh(&l_shape(), &opts).unwrap();
        // Five right-angle nodes (1 sector each) and one reflex junction
        // (3 sectors) at (1,1).
        let tip = mesh
            .vertices
            .iter()
            .position(|v| v.dist(Point2::new(1.0, 1.0)) < 1e-12)
            .expect("junction vertex exists");
        let incident: Vec<&Element> = mesh
            .elements
            .iter()
            .filter(|e| e.v.contains(&tip))
            .collect();
        assert_eq!(incident.len(), 3);
        assert!(incident.iter().all(|e| e.layer == Some(0)));
    }

    #[test]
    fn flower_mesh_has_two_sector_fans_and_curved_edges() {
        let quad = flower_quad(4).unwrap();
        let opts = MeshOptions {
            nu: 3,
            ..MeshOptions::default()
        };
        let mesh = interior_mesh(&quad, &opts).unwrap();
        for (i, corner) in quad.corners().iter().enumerate() {
            let tip = mesh
                .vertices
                .iter()
                .position(|v| v.dist(*corner) < 1e-12)
                .unwrap_or_else(|| panic!("corner {i} missing"));
            let fans = mesh.elements.iter().filter(|e| e.v.contains(&tip)).count();
            assert_eq!(fans, 2, "corner {i}");
        }
        assert!(mesh.elements.iter().any(|e| !e.curved.is_empty()));
        let curved_boundary: usize = mesh.elements.iter().map(|e| e.curved.len()).sum();
        assert_eq!(curved_boundary, mesh.boundary_edges.len());
    }

    #[test]
    fn circle_mesh_validates() {
        let mesh = interior_mesh(&circle_quad(), &MeshOptions::default()).unwrap();
        assert!(mesh.elements.iter().any(|e| !e.curved.is_empty()));
        // All four marked points are smooth, so every fan has two sectors.
        let fan_count = mesh
            .elements
            .iter()
            .filter(|e| e.layer == Some(0))
            .count();
        assert_eq!(fan_count, 8);
    }

    #[test]
    fn inverted_square_mesh_has_three_sector_fans() {
        let big = QuadrilateralSpec::polygon([
            Point2::new(-1.0, -1.0),
            Point2::new(1.0, -1.0),
            Point2::new(1.0, 1.0),
            Point2::new(-1.0, 1.0),
        ])
        .unwrap();
        let image = invert_quadrilateral(&big, Point2::new(0.0, 0.0)).unwrap();
        let opts = MeshOptions {
            nu: 2,
            ..MeshOptions::default()
        };
        let mesh = interior_mesh(&image, &opts).unwrap();
        for corner in image.corners() {
            let tip = mesh
                .vertices
                .iter()
                .position(|v| v.dist(corner) < 1e-12)
                .expect("corner vertex exists");
            let fans = mesh.elements.iter().filter(|e| e.v.contains(&tip)).count();
            assert_eq!(fans, 3);
        }
    }

    #[test]
    fn skewed_trapezoids_mesh() {
        for &t in &[0.5, 1.5, 2.5] {
            let quad = side_slide_quad(1.0, 2.0, t).unwrap();
            let mesh = interior_mesh(&quad, &MeshOptions::default()).unwrap();
            assert!(mesh.elements.len() > 20);
        }
    }

    #[test]
    fn truncated_exterior_mesh_of_square() {
        let opts = MeshOptions {
            nu: 2,
            ..MeshOptions::default()
        };
        let mesh = truncated_exterior_mesh(&unit_square(), &opts, 1e6).unwrap();
        let far = mesh.far_vertex.expect("exterior mesh has a far vertex");
        let center = Point2::new(0.5, 0.5);
        assert!((mesh.vertices[far].dist(center) - 1e6).abs() < 1e-6);
        assert!(mesh
            .boundary_edges
            .iter()
            .any(|b| b.source == BoundarySource::Outer));
        for side in 0..4 {
            assert!(mesh
                .boundary_edges
                .iter()
                .any(|b| b.source == BoundarySource::Side(side)));
        }
        // Exterior corners of the square are reflex: three sectors each.
        for corner in unit_square().corners() {
            let tip = mesh
                .vertices
                .iter()
                .position(|v| v.dist(corner) < 1e-12)
                .expect("corner vertex exists");
            let fans = mesh
                .elements
                .iter()
                .filter(|e| e.v.contains(&tip) && e.layer == Some(0))
                .count();
            assert_eq!(fans, 3);
        }
    }

    #[test]
    fn export_round_trips_counts() {
        let mesh = interior_mesh(&unit_square(), &MeshOptions { nu: 1, ..Default::default() })
            .unwrap();
        let text = mesh.export_plain();
        assert!(text.starts_with(&format!("vertices {}\n", mesh.vertices.len())));
        assert!(text.contains(&format!("elements {}\n", mesh.elements.len())));
        assert!(text.contains(&format!("boundary {}\n", mesh.boundary_edges.len())));
    }

    #[test]
    fn ear_clipping_handles_nonconvex_polygons() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(4.0, 0.0),
            Point2::new(4.0, 3.0),
            Point2::new(2.0, 1.0),
            Point2::new(0.0, 3.0),
        ];
        let poly: Vec<usize> = (0..5).collect();
        let tris = triangulate_polygon(&pts, &poly).unwrap();
        assert_eq!(tris.len(), 3);
        let area: f64 = tris
            .iter()
            .map(|t| 0.5 * (pts[t[1]] - pts[t[0]]).cross(pts[t[2]] - pts[t[0]]))
            .sum();
        assert!((area - 8.0).abs() < 1e-12);
    }
}
