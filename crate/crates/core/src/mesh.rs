//! Structured triangulations of axis-aligned rectangles and Lagrange
//! degree-of-freedom maps.
//!
//! Every rectangular cell `(i, j)` is split along the diagonal running from
//! its lower-left corner to its upper-right corner, giving the two
//! counterclockwise triangles `[ll, lr, ur]` and `[ll, ur, ul]`.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh argument: {0}")]
    InvalidArgument(String),
}

/// Side of the bounding rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

    fn bit(self) -> u8 {
        match self {
            Side::Left => 1,
            Side::Right => 2,
            Side::Bottom => 4,
            Side::Top => 8,
        }
    }
}

/// Set of rectangle sides a node or dof touches (corners touch two).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SideSet(u8);

impl SideSet {
    pub fn empty() -> Self {
        SideSet(0)
    }

    pub fn insert(&mut self, side: Side) {
        self.0 |= side.bit();
    }

    pub fn contains(self, side: Side) -> bool {
        self.0 & side.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersection(self, other: SideSet) -> SideSet {
        SideSet(self.0 & other.0)
    }
}

/// Mesh edge with its (one or two) adjacent triangles.
#[derive(Clone, Debug)]
pub struct Edge {
    /// Vertex indices with `vertices.0 < vertices.1`.
    pub vertices: (usize, usize),
    pub triangles: [Option<usize>; 2],
    /// `Some` for edges lying on the rectangle boundary.
    pub side: Option<Side>,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.side.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    /// Counterclockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub edges: Vec<Edge>,
    /// Local edge `k` of triangle `t` joins local vertices `k` and `(k+1)%3`.
    pub triangle_edges: Vec<[usize; 3]>,
    /// Indices into `edges` of the edges on the boundary.
    pub boundary_edges: Vec<usize>,
    /// Sides touched by each node (empty for interior nodes).
    pub node_sides: Vec<SideSet>,
    pub nx: usize,
    pub ny: usize,
    pub bounds: [f64; 4],
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Signed area of triangle `t` (positive for counterclockwise order).
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    /// Diameter of the (congruent) cells, i.e. the length of the cell diagonal.
    pub fn h(&self) -> f64 {
        let dx = (self.bounds[1] - self.bounds[0]) / self.nx as f64;
        let dy = (self.bounds[3] - self.bounds[2]) / self.ny as f64;
        dx.hypot(dy)
    }

    pub fn domain_area(&self) -> f64 {
        (self.bounds[1] - self.bounds[0]) * (self.bounds[3] - self.bounds[2])
    }
}

/// Builds the uniform `nx x ny` triangulation of `[xmin, xmax] x [ymin, ymax]`.
pub fn build_rect_mesh(
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    nx: usize,
    ny: usize,
) -> Result<Mesh, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::InvalidArgument(format!(
            "cell counts must be positive, got nx={nx}, ny={ny}"
        )));
    }
    if !(xmax > xmin) || !(ymax > ymin) || !(xmax - xmin).is_finite() || !(ymax - ymin).is_finite()
    {
        return Err(MeshError::InvalidArgument(format!(
            "degenerate extents [{xmin}, {xmax}] x [{ymin}, {ymax}]"
        )));
    }

    let node = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    let mut node_sides = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            // exact endpoints, no accumulated rounding
            let x = if i == nx { xmax } else { xmin + (xmax - xmin) * i as f64 / nx as f64 };
            let y = if j == ny { ymax } else { ymin + (ymax - ymin) * j as f64 / ny as f64 };
            nodes.push([x, y]);
            let mut s = SideSet::empty();
            if i == 0 {
                s.insert(Side::Left);
            }
            if i == nx {
                s.insert(Side::Right);
            }
            if j == 0 {
                s.insert(Side::Bottom);
            }
            if j == ny {
                s.insert(Side::Top);
            }
            node_sides.push(s);
        }
    }

    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let ll = node(i, j);
            let lr = node(i + 1, j);
            let ur = node(i + 1, j + 1);
            let ul = node(i, j + 1);
            triangles.push([ll, lr, ur]);
            triangles.push([ll, ur, ul]);
        }
    }

    let mut edge_index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges: Vec<Edge> = Vec::new();
    let mut triangle_edges = Vec::with_capacity(triangles.len());
    for (t, tri) in triangles.iter().enumerate() {
        let mut te = [0usize; 3];
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            let e = *edge_index.entry(key).or_insert_with(|| {
                edges.push(Edge { vertices: key, triangles: [None, None], side: None });
                edges.len() - 1
            });
            let slot = &mut edges[e].triangles;
            if slot[0].is_none() {
                slot[0] = Some(t);
            } else {
                slot[1] = Some(t);
            }
            te[k] = e;
        }
        triangle_edges.push(te);
    }

    let mut boundary_edges = Vec::new();
    for (e, edge) in edges.iter_mut().enumerate() {
        if edge.triangles[1].is_none() {
            let common = node_sides[edge.vertices.0].intersection(node_sides[edge.vertices.1]);
            let side = Side::ALL
                .into_iter()
                .find(|s| common.contains(*s))
                .expect("boundary edge must lie on one side");
            edge.side = Some(side);
            boundary_edges.push(e);
        }
    }

    Ok(Mesh {
        nodes,
        triangles,
        edges,
        triangle_edges,
        boundary_edges,
        node_sides,
        nx,
        ny,
        bounds: [xmin, xmax, ymin, ymax],
    })
}

/// Lagrange dof map of order 1 or 2 over a [`Mesh`].
///
/// P2 numbering: all vertices first (same index as the node), then one dof
/// per edge at `n_nodes + edge_index`. Cell-local order is the three
/// vertices followed by the midpoints of local edges 0, 1, 2.
#[derive(Clone, Debug)]
pub struct DofMap {
    pub order: usize,
    pub n_dofs: usize,
    pub cell_to_dofs: Vec<Vec<usize>>,
    /// Dofs on the boundary, in increasing order.
    pub boundary_dofs: Vec<usize>,
    /// Side tags per dof (empty set for interior dofs).
    pub dof_sides: Vec<SideSet>,
    n_nodes: usize,
}

impl DofMap {
    pub fn n_local(&self) -> usize {
        if self.order == 1 {
            3
        } else {
            6
        }
    }

    /// Coordinates of dof `d`; midpoint coordinates are derived from the mesh.
    pub fn dof_point(&self, mesh: &Mesh, d: usize) -> [f64; 2] {
        if d < self.n_nodes {
            mesh.nodes[d]
        } else {
            let (a, b) = mesh.edges[d - self.n_nodes].vertices;
            let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
            [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
        }
    }

    pub fn dof_points(&self, mesh: &Mesh) -> Vec<[f64; 2]> {
        (0..self.n_dofs).map(|d| self.dof_point(mesh, d)).collect()
    }

    /// Boundary dofs touching `side`.
    pub fn dofs_on(&self, side: Side) -> Vec<usize> {
        self.boundary_dofs
            .iter()
            .copied()
            .filter(|&d| self.dof_sides[d].contains(side))
            .collect()
    }

    pub fn is_vertex_dof(&self, d: usize) -> bool {
        d < self.n_nodes
    }
}

pub fn dof_map(mesh: &Mesh, order: usize) -> Result<DofMap, MeshError> {
    let n_nodes = mesh.n_nodes();
    match order {
        1 => {
            let cell_to_dofs = mesh.triangles.iter().map(|t| t.to_vec()).collect();
            let dof_sides = mesh.node_sides.clone();
            let boundary_dofs = (0..n_nodes).filter(|&d| !dof_sides[d].is_empty()).collect();
            Ok(DofMap { order, n_dofs: n_nodes, cell_to_dofs, boundary_dofs, dof_sides, n_nodes })
        }
        2 => {
            let n_dofs = n_nodes + mesh.n_edges();
            let cell_to_dofs = mesh
                .triangles
                .iter()
                .zip(&mesh.triangle_edges)
                .map(|(t, e)| {
                    vec![t[0], t[1], t[2], n_nodes + e[0], n_nodes + e[1], n_nodes + e[2]]
                })
                .collect();
            let mut dof_sides = mesh.node_sides.clone();
            dof_sides.extend(mesh.edges.iter().map(|e| {
                let mut s = SideSet::empty();
                if let Some(side) = e.side {
                    s.insert(side);
                }
                s
            }));
            let boundary_dofs = (0..n_dofs).filter(|&d| !dof_sides[d].is_empty()).collect();
            Ok(DofMap { order, n_dofs, cell_to_dofs, boundary_dofs, dof_sides, n_nodes })
        }
        _ => Err(MeshError::InvalidArgument(format!("unsupported element order {order}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn unit(nx: usize, ny: usize) -> Mesh {
        build_rect_mesh(0.0, 1.0, 0.0, 1.0, nx, ny).unwrap()
    }

    #[test]
    fn smallest_grid() {
        let m = unit(1, 1);
        assert_eq!(m.n_nodes(), 4);
        assert_eq!(m.n_triangles(), 2);
        assert_eq!(m.boundary_edges.len(), 4);
        assert_eq!(m.n_edges(), 5);
    }

    #[test]
    fn mesh_size_of_forty_cells() {
        let m = unit(40, 40);
        assert!((m.h() - 2f64.sqrt() / 40.0).abs() < 1e-15);
    }

    #[test]
    fn three_by_two_counts() {
        let m = unit(3, 2);
        assert_eq!(m.n_nodes(), 12);
        assert_eq!(m.n_triangles(), 12);
        // Euler: V - E + F = 1
        let e = m.n_nodes() + m.n_triangles() - 1;
        assert_eq!(m.n_edges(), e);
        assert_eq!(e, 23);
    }

    #[test]
    fn invalid_arguments() {
        assert!(build_rect_mesh(0.0, 1.0, 0.0, 1.0, 0, 3).is_err());
        assert!(build_rect_mesh(1.0, 1.0, 0.0, 1.0, 2, 3).is_err());
        assert!(build_rect_mesh(0.0, 1.0, 2.0, 1.0, 2, 3).is_err());
        assert!(dof_map(&unit(1, 1), 3).is_err());
    }

    #[test]
    fn edge_adjacency() {
        let m = unit(4, 3);
        for e in &m.edges {
            let n = e.triangles.iter().flatten().count();
            if e.is_boundary() {
                assert_eq!(n, 1);
            } else {
                assert_eq!(n, 2);
            }
        }
        let sides: Vec<_> = m.boundary_edges.iter().map(|&e| m.edges[e].side.unwrap()).collect();
        assert_eq!(sides.iter().filter(|s| **s == Side::Left).count(), 3);
        assert_eq!(sides.iter().filter(|s| **s == Side::Bottom).count(), 4);
    }

    #[test]
    fn two_triangle_dofs() {
        let m = unit(1, 1);
        let p1 = dof_map(&m, 1).unwrap();
        assert_eq!(p1.n_dofs, 4);
        assert_eq!(p1.boundary_dofs.len(), 4);
        let p2 = dof_map(&m, 2).unwrap();
        assert_eq!(p2.n_dofs, 9);
        assert_eq!(p2.boundary_dofs.len(), 8);
        let interior: Vec<_> = (0..9).filter(|d| !p2.boundary_dofs.contains(d)).collect();
        assert_eq!(interior.len(), 1);
        let p = p2.dof_point(&m, interior[0]);
        assert_eq!(p, [0.5, 0.5]);
    }

    #[test]
    fn p2_dofs_on_40x40() {
        let m = unit(40, 40);
        // independent count: distinct sorted vertex pairs over all triangles
        let mut set = HashSet::new();
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        assert_eq!(set.len(), 4880);
        let p2 = dof_map(&m, 2).unwrap();
        assert_eq!(p2.n_dofs, 1681 + 4880);
        assert_eq!(p2.n_dofs, 81 * 81);
    }

    #[test]
    fn boundary_dofs_are_geometric() {
        let m = build_rect_mesh(-1.0, 2.0, 0.5, 1.5, 5, 4).unwrap();
        let p2 = dof_map(&m, 2).unwrap();
        let on_boundary = |p: [f64; 2]| {
            p[0] == -1.0 || p[0] == 2.0 || p[1] == 0.5 || p[1] == 1.5
        };
        for d in 0..p2.n_dofs {
            let p = p2.dof_point(&m, d);
            assert_eq!(p2.boundary_dofs.contains(&d), on_boundary(p), "dof {d} at {p:?}");
        }
        for d in p2.dofs_on(Side::Right) {
            assert_eq!(p2.dof_point(&m, d)[0], 2.0);
        }
        assert_eq!(p2.dofs_on(Side::Top).len(), 2 * 5 + 1);
    }

    proptest::proptest! {
        #[test]
        fn mesh_invariants(nx in 1usize..12, ny in 1usize..12, w in 0.1f64..5.0, hgt in 0.1f64..5.0) {
            let m = build_rect_mesh(0.3, 0.3 + w, -1.0, -1.0 + hgt, nx, ny).unwrap();
            proptest::prop_assert_eq!(m.n_nodes(), (nx + 1) * (ny + 1));
            proptest::prop_assert_eq!(m.n_triangles(), 2 * nx * ny);
            proptest::prop_assert_eq!(m.n_nodes() + m.n_triangles(), m.n_edges() + 1);
            let total: f64 = (0..m.n_triangles()).map(|t| m.signed_area(t)).sum();
            for t in 0..m.n_triangles() {
                proptest::prop_assert!(m.signed_area(t) > 0.0);
            }
            proptest::prop_assert!((total - w * hgt).abs() <= 1e-14 * w * hgt);
            let p2 = dof_map(&m, 2).unwrap();
            proptest::prop_assert_eq!(p2.n_dofs, m.n_nodes() + m.n_edges());
            let mut seen = vec![false; p2.n_dofs];
            for cell in &p2.cell_to_dofs {
                for &d in cell {
                    proptest::prop_assert!(d < p2.n_dofs);
                    seen[d] = true;
                }
            }
            proptest::prop_assert!(seen.iter().all(|s| *s));
        }
    }
}
