//! Triangulations of disks and ellipses, boundary structure, and electrodes.
//!
//! Meshes are built ring by ring: node rings at radii `i * dr` with an
//! angular count proportional to the radius, and each annulus between two
//! consecutive rings stitched with the shorter-diagonal rule. Boundary nodes
//! sit exactly on the curve. Ellipses are the image of a unit-disk mesh under
//! the axis scaling, so the boundary parameter of an ellipse node is its
//! parametric angle `t` in `(a cos t, b sin t)`.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::output::fmt_f64;

/// Element budget used by [`build_disk_mesh`] and [`build_ellipse_mesh`].
pub const DEFAULT_ELEMENT_BUDGET: usize = 2_000_000;

pub type Point = [f64; 2];

/// The curve that bounds a mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Disk { radius: f64 },
    Ellipse { a: f64, b: f64 },
}

impl Boundary {
    pub fn point(&self, t: f64) -> Point {
        match *self {
            Boundary::Disk { radius } => [radius * t.cos(), radius * t.sin()],
            Boundary::Ellipse { a, b } => [a * t.cos(), b * t.sin()],
        }
    }

    /// Boundary parameter of the ray through `p`, in `[0, 2pi)`.
    pub fn parameter(&self, p: Point) -> f64 {
        let t = match *self {
            Boundary::Disk { .. } => p[1].atan2(p[0]),
            Boundary::Ellipse { a, b } => (p[1] / b).atan2(p[0] / a),
        };
        wrap_angle(t)
    }

    /// Radius used to turn arc lengths into parameter spans. For an ellipse
    /// this is 1: spans are measured on the unit circle the ellipse maps from.
    pub fn nominal_radius(&self) -> f64 {
        match *self {
            Boundary::Disk { radius } => radius,
            Boundary::Ellipse { .. } => 1.0,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Boundary::Disk { radius } => PI * radius * radius,
            Boundary::Ellipse { a, b } => PI * a * b,
        }
    }

    /// `x^2/a^2 + y^2/b^2`, below 1 inside.
    pub fn level(&self, p: Point) -> f64 {
        match *self {
            Boundary::Disk { radius } => (p[0] * p[0] + p[1] * p[1]) / (radius * radius),
            Boundary::Ellipse { a, b } => (p[0] / a).powi(2) + (p[1] / b).powi(2),
        }
    }

    /// Distance to the boundary curve: exact for a disk, sampled for an ellipse.
    pub fn distance(&self, p: Point) -> f64 {
        match *self {
            Boundary::Disk { radius } => (radius - p[0].hypot(p[1])).abs(),
            Boundary::Ellipse { .. } => (0..720)
                .map(|i| {
                    let q = self.point(TAU * i as f64 / 720.0);
                    (q[0] - p[0]).hypot(q[1] - p[1])
                })
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// Maps an angle into `[0, 2pi)`.
pub fn wrap_angle(t: f64) -> f64 {
    let w = t.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Counterclockwise span from `from` to `to`, in `[0, 2pi)`.
fn ccw_span(from: f64, to: f64) -> f64 {
    wrap_angle(to - from)
}

/// A boundary edge, oriented counterclockwise along the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub element: usize,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<Point>,
    elements: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    areas: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
    boundary: Boundary,
    boundary_param: Vec<Option<f64>>,
}

impl Mesh {
    /// Builds a mesh from raw parts. `boundary_param` marks which nodes lie on
    /// the boundary curve and at what parameter.
    pub fn from_parts(
        nodes: Vec<Point>,
        elements: Vec<[usize; 3]>,
        boundary: Boundary,
        boundary_param: Vec<Option<f64>>,
    ) -> Result<Self> {
        if boundary_param.len() != nodes.len() {
            return Err(Error::Dimension(
                "boundary parameter list must match the node list".into(),
            ));
        }
        if let Some(bad) = elements.iter().flatten().find(|&&i| i >= nodes.len()) {
            return Err(Error::Mesh(format!("element references missing node {bad}")));
        }
        let mut mesh = Self {
            nodes,
            elements,
            boundary_edges: Vec::new(),
            areas: Vec::new(),
            neighbors: Vec::new(),
            boundary,
            boundary_param,
        };
        mesh.rebuild_topology()?;
        Ok(mesh)
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    /// Elements sharing one edge with each element.
    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn boundary_param(&self, node: usize) -> Option<f64> {
        self.boundary_param[node]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn vertices(&self, l: usize) -> [Point; 3] {
        let [a, b, c] = self.elements[l];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn centroid(&self, l: usize) -> Point {
        let [p, q, r] = self.vertices(l);
        [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0]
    }

    pub fn diameter(&self, l: usize) -> f64 {
        let [p, q, r] = self.vertices(l);
        dist(p, q).max(dist(q, r)).max(dist(r, p))
    }

    pub fn max_diameter(&self) -> f64 {
        (0..self.num_elements())
            .map(|l| self.diameter(l))
            .fold(0.0, f64::max)
    }

    pub fn edge_length(&self, edge: &BoundaryEdge) -> f64 {
        dist(self.nodes[edge.nodes[0]], self.nodes[edge.nodes[1]])
    }

    pub fn boundary_length(&self) -> f64 {
        self.boundary_edges.iter().map(|e| self.edge_length(e)).sum()
    }

    /// Gradients of the three barycentric basis functions on element `l`.
    pub fn basis_gradients(&self, l: usize) -> [[f64; 2]; 3] {
        let [p, q, r] = self.vertices(l);
        let twice_area = signed_double_area(p, q, r);
        [
            [(q[1] - r[1]) / twice_area, (r[0] - q[0]) / twice_area],
            [(r[1] - p[1]) / twice_area, (p[0] - r[0]) / twice_area],
            [(p[1] - q[1]) / twice_area, (q[0] - p[0]) / twice_area],
        ]
    }

    /// Barycentric coordinates of `p` with respect to element `l`.
    pub fn barycentric(&self, l: usize, p: Point) -> [f64; 3] {
        let [a, b, c] = self.vertices(l);
        let total = signed_double_area(a, b, c);
        [
            signed_double_area(p, b, c) / total,
            signed_double_area(a, p, c) / total,
            signed_double_area(a, b, p) / total,
        ]
    }

    /// Parameter span covered by a boundary edge.
    pub fn edge_param_span(&self, edge: &BoundaryEdge) -> (f64, f64) {
        let ta = self.boundary_param[edge.nodes[0]].expect("boundary node");
        let tb = self.boundary_param[edge.nodes[1]].expect("boundary node");
        (ta, ccw_span(ta, tb))
    }

    /// Verifies every structural invariant: positive areas, edge sharing,
    /// neighbor symmetry and boundary node placement.
    pub fn check_invariants(&self) -> Result<()> {
        for (l, &area) in self.areas.iter().enumerate() {
            if !(area > 0.0) {
                return Err(Error::Mesh(format!("element {l} has area {area:e}")));
            }
        }
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for el in &self.elements {
            for (a, b) in element_edges(el) {
                *count.entry(edge_key(a, b)).or_default() += 1;
            }
        }
        let boundary_count = count.values().filter(|&&c| c == 1).count();
        if count.values().any(|&c| c > 2) {
            return Err(Error::Mesh("an edge is shared by more than two elements".into()));
        }
        if boundary_count != self.boundary_edges.len() {
            return Err(Error::Mesh("boundary edge list is inconsistent".into()));
        }
        for (l, nb) in self.neighbors.iter().enumerate() {
            if nb.len() > 3 || nb.contains(&l) {
                return Err(Error::Mesh(format!("element {l} has invalid neighbors")));
            }
            if nb.iter().any(|&k| !self.neighbors[k].contains(&l)) {
                return Err(Error::Mesh(format!("adjacency of element {l} is not symmetric")));
            }
        }
        for e in &self.boundary_edges {
            for &n in &e.nodes {
                let t = self.boundary_param[n]
                    .ok_or_else(|| Error::Mesh(format!("boundary node {n} has no parameter")))?;
                let q = self.boundary.point(t);
                if dist(q, self.nodes[n]) > 1e-12 {
                    return Err(Error::Mesh(format!("boundary node {n} is off the curve")));
                }
            }
        }
        Ok(())
    }

    /// Returns the element containing `p`, lowest index first on shared edges.
    pub fn locate(&self, p: Point) -> Option<usize> {
        PointLocator::new(self).locate(self, p)
    }

    /// Moves the boundary node nearest to parameter `t` onto `t`, or splits the
    /// boundary edge containing `t`. Nodes in `pinned` are never moved.
    /// Returns the node now sitting at `t`.
    pub fn insert_boundary_node(&mut self, t: f64, pinned: &[usize]) -> Result<usize> {
        let t = wrap_angle(t);
        let (edge_idx, offset, span) = self
            .boundary_edges
            .iter()
            .enumerate()
            .find_map(|(i, e)| {
                let (ta, span) = self.edge_param_span(e);
                let off = ccw_span(ta, t);
                (off < span).then_some((i, off, span))
            })
            .ok_or_else(|| Error::Mesh(format!("no boundary edge covers parameter {t}")))?;
        let edge = self.boundary_edges[edge_idx];
        let [a, b] = edge.nodes;
        let tol = 1e-12;
        if offset < tol {
            return Ok(a);
        }
        if span - offset < tol {
            return Ok(b);
        }

        let frac = offset / span;
        let candidate = if frac < 0.25 && !pinned.contains(&a) {
            Some(a)
        } else if frac > 0.75 && !pinned.contains(&b) {
            Some(b)
        } else {
            None
        };
        if let Some(node) = candidate {
            if self.try_move_boundary_node(node, t) {
                return Ok(node);
            }
        }
        self.split_boundary_edge(edge, t)
    }

    fn try_move_boundary_node(&mut self, node: usize, t: f64) -> bool {
        let old = self.nodes[node];
        self.nodes[node] = self.boundary.point(t);
        let ok = self.elements.iter().filter(|el| el.contains(&node)).all(|el| {
            signed_double_area(self.nodes[el[0]], self.nodes[el[1]], self.nodes[el[2]]) > 0.0
        });
        if ok {
            self.boundary_param[node] = Some(t);
            self.recompute_areas();
        } else {
            self.nodes[node] = old;
        }
        ok
    }

    fn split_boundary_edge(&mut self, edge: BoundaryEdge, t: f64) -> Result<usize> {
        let [a, b] = edge.nodes;
        let el = self.elements[edge.element];
        let c = *el.iter().find(|&&n| n != a && n != b).unwrap();
        let p = self.nodes.len();
        self.nodes.push(self.boundary.point(t));
        self.boundary_param.push(Some(t));
        self.elements[edge.element] = [a, p, c];
        self.elements.push([p, b, c]);
        self.rebuild_topology()?;
        for l in [edge.element, self.elements.len() - 1] {
            if !(self.areas[l] > 0.0) {
                return Err(Error::Mesh(format!(
                    "splitting boundary edge at parameter {t} produced an inverted element"
                )));
            }
        }
        Ok(p)
    }

    fn recompute_areas(&mut self) {
        self.areas = self
            .elements
            .iter()
            .map(|el| 0.5 * signed_double_area(self.nodes[el[0]], self.nodes[el[1]], self.nodes[el[2]]))
            .collect();
    }

    fn rebuild_topology(&mut self) -> Result<()> {
        self.recompute_areas();
        let mut owners: HashMap<(usize, usize), Vec<(usize, usize, usize)>> = HashMap::new();
        for (l, el) in self.elements.iter().enumerate() {
            for (a, b) in element_edges(el) {
                owners.entry(edge_key(a, b)).or_default().push((l, a, b));
            }
        }
        let mut neighbors = vec![Vec::new(); self.elements.len()];
        let mut boundary_edges = Vec::new();
        for list in owners.values() {
            match list.as_slice() {
                [(l, a, b)] => boundary_edges.push(BoundaryEdge {
                    nodes: [*a, *b],
                    element: *l,
                }),
                [(l, ..), (k, ..)] => {
                    neighbors[*l].push(*k);
                    neighbors[*k].push(*l);
                }
                _ => return Err(Error::Mesh("edge shared by more than two elements".into())),
            }
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        let param = |e: &BoundaryEdge| self.boundary_param[e.nodes[0]].unwrap_or(f64::INFINITY);
        boundary_edges.sort_by(|x, y| param(x).total_cmp(&param(y)).then(x.nodes.cmp(&y.nodes)));
        self.neighbors = neighbors;
        self.boundary_edges = boundary_edges;
        Ok(())
    }

    /// Writes `nodes.csv` and `elements.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join("nodes.csv"))?);
        writeln!(w, "id,x,y")?;
        for (i, p) in self.nodes.iter().enumerate() {
            writeln!(w, "{},{},{}", i, fmt_f64(p[0]), fmt_f64(p[1]))?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("elements.csv"))?);
        writeln!(w, "id,n0,n1,n2")?;
        for (i, el) in self.elements.iter().enumerate() {
            writeln!(w, "{},{},{},{}", i, el[0], el[1], el[2])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn dist(p: Point, q: Point) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

pub(crate) fn signed_double_area(p: Point, q: Point, r: Point) -> f64 {
    (q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1])
}

fn element_edges(el: &[usize; 3]) -> [(usize, usize); 3] {
    [(el[0], el[1]), (el[1], el[2]), (el[2], el[0])]
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Uniform bucket grid for point-in-element queries.
#[derive(Debug, Clone)]
pub struct PointLocator {
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl PointLocator {
    pub fn new(mesh: &Mesh) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in mesh.nodes() {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let mean_area = mesh.total_area() / mesh.num_elements().max(1) as f64;
        let cell = (2.0 * mean_area).sqrt().max(1e-9);
        let nx = (((hi[0] - lo[0]) / cell).ceil() as usize).max(1);
        let ny = (((hi[1] - lo[1]) / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        let mut locator = Self {
            origin: lo,
            cell,
            nx,
            ny,
            buckets: Vec::new(),
        };
        for l in 0..mesh.num_elements() {
            let v = mesh.vertices(l);
            let min = [v[0][0].min(v[1][0]).min(v[2][0]), v[0][1].min(v[1][1]).min(v[2][1])];
            let max = [v[0][0].max(v[1][0]).max(v[2][0]), v[0][1].max(v[1][1]).max(v[2][1])];
            let (i0, j0) = locator.cell_of(min);
            let (i1, j1) = locator.cell_of(max);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(l);
                }
            }
        }
        locator.buckets = buckets;
        locator
    }

    fn cell_of(&self, p: Point) -> (usize, usize) {
        let fx = ((p[0] - self.origin[0]) / self.cell).floor();
        let fy = ((p[1] - self.origin[1]) / self.cell).floor();
        (
            (fx.max(0.0) as usize).min(self.nx - 1),
            (fy.max(0.0) as usize).min(self.ny - 1),
        )
    }

    /// Element containing `p`; points on shared edges go to the lowest index.
    pub fn locate(&self, mesh: &Mesh, p: Point) -> Option<usize> {
        let (i, j) = self.cell_of(p);
        self.buckets[j * self.nx + i]
            .iter()
            .copied()
            .filter(|&l| mesh.barycentric(l, p).iter().all(|&w| w >= -1e-12))
            .min()
    }

    /// Element whose centroid is closest to `p`.
    pub fn nearest(&self, mesh: &Mesh, p: Point) -> usize {
        (0..mesh.num_elements())
            .min_by(|&a, &b| dist(mesh.centroid(a), p).total_cmp(&dist(mesh.centroid(b), p)))
            .expect("mesh has elements")
    }
}

/// Triangulates the disk of the given radius with elements of size about `target_h`.
pub fn build_disk_mesh(radius: f64, target_h: f64) -> Result<Mesh> {
    build_disk_mesh_with_budget(radius, target_h, DEFAULT_ELEMENT_BUDGET)
}

pub fn build_disk_mesh_with_budget(radius: f64, target_h: f64, budget: usize) -> Result<Mesh> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {radius}")));
    }
    if !(target_h > 0.0 && target_h.is_finite()) {
        return Err(Error::InvalidInput(format!("mesh size must be positive, got {target_h}")));
    }
    if target_h >= radius {
        return Err(Error::Mesh(format!(
            "mesh size {target_h} is not smaller than the radius {radius}"
        )));
    }
    let rings = (radius / target_h).ceil() as usize;
    let estimate = (TAU * (rings * rings) as f64).ceil() as usize + 6 * rings;
    if estimate > budget {
        return Err(Error::Mesh(format!(
            "mesh size {target_h} needs about {estimate} elements, budget is {budget}"
        )));
    }
    let (nodes, elements, params) = polar_rings(radius, rings);
    Mesh::from_parts(nodes, elements, Boundary::Disk { radius }, params)
}

/// Triangulates the ellipse `x^2/a^2 + y^2/b^2 < 1`.
pub fn build_ellipse_mesh(a: f64, b: f64, target_h: f64) -> Result<Mesh> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidInput(format!("semi-axes must be positive, got {a}, {b}")));
    }
    if !(target_h > 0.0) || target_h >= a.min(b) {
        return Err(Error::Mesh(format!(
            "mesh size {target_h} is not smaller than the semi-axes {a}, {b}"
        )));
    }
    let unit = build_disk_mesh(1.0, target_h / a.max(b))?;
    let nodes = unit.nodes.iter().map(|p| [a * p[0], b * p[1]]).collect();
    Mesh::from_parts(
        nodes,
        unit.elements,
        Boundary::Ellipse { a, b },
        unit.boundary_param,
    )
}

fn ring_count(i: usize) -> usize {
    if i == 0 {
        1
    } else {
        ((TAU * i as f64).round() as usize).max(6)
    }
}

fn ring_angles(i: usize) -> Vec<f64> {
    let n = ring_count(i);
    let shift = if i % 2 == 0 { PI / n as f64 } else { 0.0 };
    (0..n).map(|k| shift + TAU * k as f64 / n as f64).collect()
}

type RingMesh = (Vec<Point>, Vec<[usize; 3]>, Vec<Option<f64>>);

fn polar_rings(radius: f64, rings: usize) -> RingMesh {
    let dr = radius / rings as f64;
    let mut nodes = vec![[0.0, 0.0]];
    let mut params = vec![None];
    let mut elements = Vec::new();
    let mut prev: Vec<(usize, f64)> = vec![(0, 0.0)];

    for i in 1..=rings {
        let r = if i == rings { radius } else { dr * i as f64 };
        let angles = ring_angles(i);
        let ring: Vec<(usize, f64)> = angles
            .iter()
            .map(|&t| {
                nodes.push([r * t.cos(), r * t.sin()]);
                params.push((i == rings).then_some(t));
                (nodes.len() - 1, t)
            })
            .collect();
        if i == 1 {
            for k in 0..ring.len() {
                elements.push([0, ring[k].0, ring[(k + 1) % ring.len()].0]);
            }
        } else {
            stitch(&nodes, &prev, &ring, &mut elements);
        }
        prev = ring;
    }
    (nodes, elements, params)
}

/// Triangulates the annulus between two rings, each sorted by angle in `[0, 2pi)`.
fn stitch(nodes: &[Point], inner: &[(usize, f64)], outer: &[(usize, f64)], out: &mut Vec<[usize; 3]>) {
    let (m, n) = (inner.len(), outer.len());
    let ia = |i: usize| inner[i % m].0;
    let oa = |j: usize| outer[j % n].0;
    let mut i = 0;
    let mut j = 0;
    while i < m || j < n {
        let advance_inner = if i == m {
            false
        } else if j == n {
            true
        } else {
            let inner_tri = [ia(i), oa(j), ia(i + 1)];
            let outer_tri = [ia(i), oa(j), oa(j + 1)];
            let ok_inner = positive(nodes, inner_tri);
            let ok_outer = positive(nodes, outer_tri);
            match (ok_inner, ok_outer) {
                (true, false) => true,
                (false, true) => false,
                _ => {
                    let d_inner = dist(nodes[ia(i + 1)], nodes[oa(j)]);
                    let d_outer = dist(nodes[ia(i)], nodes[oa(j + 1)]);
                    d_inner <= d_outer
                }
            }
        };
        if advance_inner {
            out.push([ia(i), oa(j), ia(i + 1)]);
            i += 1;
        } else {
            out.push([ia(i), oa(j), oa(j + 1)]);
            j += 1;
        }
    }
}

fn positive(nodes: &[Point], t: [usize; 3]) -> bool {
    signed_double_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) > 0.0
}

/// Electrodes as boundary arcs, with the boundary edges each one covers.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeLayout {
    /// `(start, end)` boundary parameters, `start` in `[0, 2pi)` and `end > start`.
    pub arcs: Vec<(f64, f64)>,
    /// Indices into [`Mesh::boundary_edges`] covered by each electrode.
    pub edge_map: Vec<Vec<usize>>,
    /// Contact constants `c_j`.
    pub contact: Vec<f64>,
}

impl ElectrodeLayout {
    pub fn len(&self) -> usize {
        self.arcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }

    pub fn center(&self, j: usize) -> f64 {
        let (s, e) = self.arcs[j];
        wrap_angle(0.5 * (s + e))
    }

    /// Length of electrode `j` as covered by mesh edges.
    pub fn length(&self, mesh: &Mesh, j: usize) -> f64 {
        self.edge_map[j]
            .iter()
            .map(|&e| mesh.edge_length(&mesh.boundary_edges()[e]))
            .sum()
    }

    pub fn with_contact(mut self, contact: Vec<f64>) -> Result<Self> {
        if contact.len() != self.len() || contact.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::InvalidInput(
                "contact constants must be positive, one per electrode".into(),
            ));
        }
        self.contact = contact;
        Ok(self)
    }

    /// Writes `electrodes.csv` (id, start_angle, end_angle).
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join("electrodes.csv"))?);
        writeln!(w, "id,start_angle,end_angle")?;
        for (j, (s, e)) in self.arcs.iter().enumerate() {
            writeln!(w, "{},{},{}", j, fmt_f64(*s), fmt_f64(*e))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Places `count` electrodes of the given arc length, electrode `j` centered at
/// `2 pi j / count + offsets[j]`. Boundary nodes are inserted (or nudged) so
/// that every electrode endpoint is a mesh node. An empty `offsets` means zero.
pub fn place_electrodes(
    mesh: &mut Mesh,
    count: usize,
    arc_length: f64,
    offsets: &[f64],
) -> Result<ElectrodeLayout> {
    if count < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 electrodes, got {count}")));
    }
    if !(arc_length > 0.0) {
        return Err(Error::InvalidInput("electrode arc length must be positive".into()));
    }
    if !offsets.is_empty() && offsets.len() != count {
        return Err(Error::Dimension(format!(
            "{} electrode offsets for {count} electrodes",
            offsets.len()
        )));
    }
    let width = arc_length / mesh.boundary().nominal_radius();
    let arcs: Vec<(f64, f64)> = (0..count)
        .map(|j| {
            let off = offsets.get(j).copied().unwrap_or(0.0);
            let start = wrap_angle(TAU * j as f64 / count as f64 + off - 0.5 * width);
            (start, start + width)
        })
        .collect();

    let mut by_start: Vec<usize> = (0..count).collect();
    by_start.sort_by(|&a, &b| arcs[a].0.total_cmp(&arcs[b].0).then(a.cmp(&b)));
    for w in 0..count {
        let a = by_start[w];
        let b = by_start[(w + 1) % count];
        let gap = if w + 1 < count {
            arcs[b].0 - arcs[a].1
        } else {
            arcs[b].0 + TAU - arcs[a].1
        };
        if gap <= 1e-12 || width * count as f64 >= TAU {
            let (first, second) = if a < b { (a, b) } else { (b, a) };
            return Err(Error::ElectrodeOverlap { first, second });
        }
    }

    let mut pinned = Vec::with_capacity(2 * count);
    for &(s, e) in &arcs {
        for t in [s, e] {
            let node = mesh.insert_boundary_node(t, &pinned)?;
            pinned.push(node);
        }
    }

    let edge_map: Vec<Vec<usize>> = arcs
        .iter()
        .map(|&(s, _)| {
            mesh.boundary_edges()
                .iter()
                .enumerate()
                .filter(|(_, e)| {
                    let (ta, span) = mesh.edge_param_span(e);
                    ccw_span(s, ta + 0.5 * span) < width
                })
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    if let Some(j) = edge_map.iter().position(Vec::is_empty) {
        return Err(Error::Mesh(format!("electrode {j} covers no boundary edge")));
    }
    Ok(ElectrodeLayout {
        arcs,
        edge_map,
        contact: vec![1.0; count],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_disk_area_is_an_inscribed_polygon() {
        let mesh = build_disk_mesh(1.0, 0.5).unwrap();
        mesh.check_invariants().unwrap();
        let area = mesh.total_area();
        assert!(area <= PI && area >= PI - 0.3, "area {area}");
    }

    #[test]
    fn area_defect_is_second_order() {
        let h = 0.1;
        let d1 = PI - build_disk_mesh(1.0, h).unwrap().total_area();
        let d2 = PI - build_disk_mesh(1.0, h / 2.0).unwrap().total_area();
        let ratio = d1 / d2;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn oversized_mesh_size_is_rejected() {
        assert!(matches!(build_disk_mesh(1.0, 2.0), Err(Error::Mesh(_))));
        assert!(matches!(
            build_disk_mesh_with_budget(1.0, 0.001, 1000),
            Err(Error::Mesh(_))
        ));
    }

    #[test]
    fn diameter_is_within_factor_two_and_monotone() {
        let mut last = f64::INFINITY;
        for h in [0.2, 0.1, 0.05] {
            let mesh = build_disk_mesh(1.0, h).unwrap();
            let d = mesh.max_diameter();
            assert!(d <= 2.0 * h && d >= 0.5 * h, "h {h}, diameter {d}");
            assert!(d <= last);
            last = d;
        }
    }

    #[test]
    fn ellipse_areas() {
        for (a, b) in [(1.1, 0.9), (1.2, 0.8)] {
            let mesh = build_ellipse_mesh(a, b, 0.1).unwrap();
            mesh.check_invariants().unwrap();
            let rel = (mesh.total_area() - PI * a * b).abs() / (PI * a * b);
            assert!(rel < 0.02, "({a}, {b}): {rel}");
        }
        let e = build_ellipse_mesh(1.0, 1.0, 0.1).unwrap();
        let d = build_disk_mesh(1.0, 0.1).unwrap();
        assert_eq!(e.num_elements(), d.num_elements());
        assert_eq!(e.num_nodes(), d.num_nodes());
        assert!((e.total_area() - d.total_area()).abs() < 1e-12);
    }

    #[test]
    fn sixteen_electrodes_cover_half_the_boundary() {
        let mut mesh = build_disk_mesh(1.0, 0.1).unwrap();
        let layout = place_electrodes(&mut mesh, 16, PI / 16.0, &[]).unwrap();
        mesh.check_invariants().unwrap();
        let covered: f64 = layout.arcs.iter().map(|(s, e)| e - s).sum();
        assert!((covered - PI).abs() < 1e-12);
        for j in 0..16 {
            assert!(!layout.edge_map[j].is_empty());
            let (s, e) = layout.arcs[j];
            // endpoints are nodes
            for t in [s, e] {
                let t = wrap_angle(t);
                assert!((0..mesh.num_nodes()).any(|n| mesh
                    .boundary_param(n)
                    .is_some_and(|p| ccw_span(p, t).min(ccw_span(t, p)) < 1e-12)));
            }
            // polygonal electrode length is close to the arc length
            let len = layout.length(&mesh, j);
            assert!((len - PI / 16.0).abs() < 1e-3, "electrode {j}: {len}");
        }
    }

    #[test]
    fn shifted_electrodes_stay_disjoint() {
        let mut mesh = build_disk_mesh(1.0, 0.1).unwrap();
        let offsets: Vec<f64> = (0..16).map(|j| if j % 2 == 1 { PI / 32.0 } else { 0.0 }).collect();
        let layout = place_electrodes(&mut mesh, 16, PI / 16.0, &offsets).unwrap();
        mesh.check_invariants().unwrap();
        for j in 0..16 {
            for k in 0..16 {
                if j != k {
                    assert!(layout.edge_map[j].iter().all(|e| !layout.edge_map[k].contains(e)));
                }
            }
        }
    }

    #[test]
    fn touching_electrodes_are_rejected() {
        let mut mesh = build_disk_mesh(1.0, 0.1).unwrap();
        let err = place_electrodes(&mut mesh, 2, PI, &[]).unwrap_err();
        assert!(matches!(err, Error::ElectrodeOverlap { first: 0, second: 1 }));
    }

    #[test]
    fn locate_finds_centroids() {
        let mesh = build_disk_mesh(1.0, 0.2).unwrap();
        let loc = PointLocator::new(&mesh);
        for l in 0..mesh.num_elements() {
            assert_eq!(loc.locate(&mesh, mesh.centroid(l)), Some(l));
        }
        assert_eq!(loc.locate(&mesh, [2.0, 0.0]), None);
    }
}
