//! Regions, contiguity rules and adjacency graphs.
//!
//! A region is a polygon (possibly several rings: disjoint parts and holes)
//! with an identifier and a population. Two regions are *queen* contiguous
//! when their boundaries share at least one vertex, and *rook* contiguous
//! when they share a whole edge (two consecutive vertices). Vertex matching
//! is exact-within-tolerance comparison of coordinates, not geometric
//! intersection: boundary layers for administrative lattices repeat shared
//! vertices bit-for-bit, and a small tolerance absorbs the odd re-encoded
//! file.
//!
//! The resulting [`AdjacencyGraph`] is a symmetric binary 0/1 weight
//! structure with a zero diagonal, stored as sorted neighbor lists. Regions
//! with no neighbors (islands) are kept in the graph and can be listed with
//! [`AdjacencyGraph::islands`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A closed polygon ring: at least four vertices with the first repeated as
/// the last.
pub type Ring = Vec<[f64; 2]>;

/// One areal unit of the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: String,
    /// All rings of the region: exterior shells and holes alike, for every
    /// disjoint part of a multi-polygon. Even-odd containment rules make the
    /// distinction irrelevant for the operations in this crate.
    pub rings: Vec<Ring>,
    pub population: u64,
}

impl Region {
    /// Validate and build a region.
    ///
    /// Every ring must be closed (first vertex repeated as the last), have
    /// at least four vertices including that repeat, and contain only finite
    /// coordinates.
    pub fn new(id: impl Into<String>, rings: Vec<Ring>, population: u64) -> Result<Self> {
        let id = id.into();
        if rings.is_empty() {
            return Err(Error::invalid(format_args!(
                "region {id:?} has no polygon rings"
            )));
        }
        for (k, ring) in rings.iter().enumerate() {
            if ring.len() < 4 {
                return Err(Error::invalid(format_args!(
                    "region {id:?} ring {k} has {} vertices; a closed ring needs at least 4",
                    ring.len()
                )));
            }
            if ring.iter().flatten().any(|c| !c.is_finite()) {
                return Err(Error::invalid(format_args!(
                    "region {id:?} ring {k} contains a non-finite coordinate"
                )));
            }
            let first = ring[0];
            let last = ring[ring.len() - 1];
            if first != last {
                return Err(Error::invalid(format_args!(
                    "region {id:?} ring {k} is not closed (first vertex must repeat as last)"
                )));
            }
        }
        Ok(Region {
            id,
            rings,
            population,
        })
    }
}

/// Which boundary sharing counts as contiguity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContiguityRule {
    /// Any shared vertex.
    Queen,
    /// A shared edge: two consecutive vertices in both boundaries.
    Rook,
}

/// Symmetric binary adjacency over a fixed region ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    region_ids: Vec<String>,
    /// `neighbor_lists[i]` is sorted and never contains `i` itself.
    neighbor_lists: Vec<Vec<usize>>,
    /// Total weight `sum_ij w_ij` counting both directions of every edge.
    w_total: u64,
}

impl AdjacencyGraph {
    /// Assemble a graph from an undirected edge set over `region_ids`.
    ///
    /// Callers normally go through [`build_adjacency`]; this constructor
    /// exists for edge lists read from files and for tests. Edges must be
    /// in-range and never loops.
    pub fn from_edges(region_ids: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = region_ids.len();
        if n == 0 {
            return Err(Error::invalid("adjacency graph needs at least one region"));
        }
        let mut seen = BTreeSet::new();
        for id in &region_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format_args!(
                    "duplicate region id {id:?} in adjacency graph"
                )));
            }
        }
        let mut lists = alloc::vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::invalid(format_args!(
                    "edge ({a}, {b}) out of range for {n} regions"
                )));
            }
            if a == b {
                return Err(Error::invalid(format_args!(
                    "self-edge on region index {a} is not allowed"
                )));
            }
            lists[a].insert(b);
            lists[b].insert(a);
        }
        let neighbor_lists: Vec<Vec<usize>> =
            lists.into_iter().map(|s| s.into_iter().collect()).collect();
        let w_total = neighbor_lists.iter().map(|l| l.len() as u64).sum();
        Ok(AdjacencyGraph {
            region_ids,
            neighbor_lists,
            w_total,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.region_ids.iter().position(|r| r == id)
    }

    /// Sorted neighbor indices of region `i`.
    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.neighbor_lists
            .get(i)
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                Error::invalid(format_args!(
                    "region index {i} out of range for {} regions",
                    self.n_regions()
                ))
            })
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbor_lists
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbor_lists[i].len()
    }

    /// `w_ij` as a number: 1 when `j` is a neighbor of `i`, else 0.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i != j && self.neighbor_lists[i].binary_search(&j).is_ok() {
            1.0
        } else {
            0.0
        }
    }

    /// `sum_ij w_ij`; twice the number of undirected edges.
    pub fn w_total(&self) -> u64 {
        self.w_total
    }

    /// Indices of regions with no neighbors.
    pub fn islands(&self) -> Vec<usize> {
        (0..self.n_regions())
            .filter(|&i| self.neighbor_lists[i].is_empty())
            .collect()
    }

    /// Dense 0/1 weight matrix. Intended for exports and small-n oracles.
    pub fn dense_weights(&self) -> Vec<Vec<f64>> {
        let n = self.n_regions();
        let mut w = alloc::vec![alloc::vec![0.0; n]; n];
        for (i, nb) in self.neighbor_lists.iter().enumerate() {
            for &j in nb {
                w[i][j] = 1.0;
            }
        }
        w
    }

    /// Undirected edge list with `a < b`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.w_total as usize / 2);
        for (i, nb) in self.neighbor_lists.iter().enumerate() {
            for &j in nb {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Connected components, each a sorted list of region indices.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.n_regions();
        let mut comp = alloc::vec![usize::MAX; n];
        let mut out: Vec<Vec<usize>> = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let c = out.len();
            let mut stack = alloc::vec![start];
            comp[start] = c;
            let mut members = alloc::vec![start];
            while let Some(i) = stack.pop() {
                for &j in &self.neighbor_lists[i] {
                    if comp[j] == usize::MAX {
                        comp[j] = c;
                        stack.push(j);
                        members.push(j);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }
}

/// Spatio-temporal neighborhood of region `i` at time index `year`: the
/// spatial neighbors of `i` paired with the previous year.
///
/// At `year == 0` there is no previous observation, so the neighborhood is
/// empty — that is a legitimate answer, not an error.
pub fn st_neighborhood(
    graph: &AdjacencyGraph,
    i: usize,
    year: usize,
) -> Result<Vec<(usize, usize)>> {
    let nb = graph.neighbors(i)?;
    if year == 0 {
        return Ok(Vec::new());
    }
    Ok(nb.iter().map(|&j| (j, year - 1)).collect())
}

/// Remove `excluded_ids` from a graph: plain row/column deletion of the
/// weight structure, no rewiring. Remaining regions keep their relative
/// order. Unknown ids are rejected, naming the offenders.
pub fn subset_graph(graph: &AdjacencyGraph, excluded_ids: &[String]) -> Result<AdjacencyGraph> {
    let mut excluded = BTreeSet::new();
    let mut unknown: Vec<&str> = Vec::new();
    for id in excluded_ids {
        match graph.index_of(id) {
            Some(idx) => {
                excluded.insert(idx);
            }
            None => unknown.push(id),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::invalid(format_args!(
            "exclusion list names unknown region ids: {unknown:?}"
        )));
    }
    let keep: Vec<usize> = (0..graph.n_regions())
        .filter(|i| !excluded.contains(i))
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid("exclusion list removes every region"));
    }
    let mut new_index = BTreeMap::new();
    for (new, &old) in keep.iter().enumerate() {
        new_index.insert(old, new);
    }
    let region_ids: Vec<String> = keep
        .iter()
        .map(|&old| graph.region_ids[old].clone())
        .collect();
    let mut neighbor_lists = Vec::with_capacity(keep.len());
    let mut w_total = 0u64;
    for &old in &keep {
        let mut nb: Vec<usize> = graph.neighbor_lists[old]
            .iter()
            .filter_map(|j| new_index.get(j).copied())
            .collect();
        nb.sort_unstable();
        w_total += nb.len() as u64;
        neighbor_lists.push(nb);
    }
    Ok(AdjacencyGraph {
        region_ids,
        neighbor_lists,
        w_total,
    })
}

// ---------------------------------------------------------------------------
// Vertex matching
// ---------------------------------------------------------------------------

/// Union-find where the representative is always the smallest member, so
/// class labels do not depend on union order.
struct MinUnionFind {
    parent: Vec<usize>,
}

impl MinUnionFind {
    fn new(n: usize) -> Self {
        MinUnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
    }
}

fn norm_coord(c: f64) -> f64 {
    // Fold -0.0 onto 0.0 so bitwise keys agree.
    c + 0.0
}

fn point_key(p: [f64; 2]) -> (u64, u64) {
    (norm_coord(p[0]).to_bits(), norm_coord(p[1]).to_bits())
}

/// Assign every distinct vertex coordinate a class id such that vertices
/// within `tolerance` (Euclidean, transitively closed) share a class.
/// Class ids are stable under permutations of the input regions because
/// points are processed in coordinate order.
struct VertexClasses {
    classes: BTreeMap<(u64, u64), usize>,
}

impl VertexClasses {
    fn build(regions: &[Region], tolerance: f64) -> Self {
        // Distinct points in a deterministic (bit-pattern) order.
        let mut keys: BTreeSet<(u64, u64)> = BTreeSet::new();
        for r in regions {
            for ring in &r.rings {
                for &p in ring {
                    keys.insert(point_key(p));
                }
            }
        }
        let points: Vec<(u64, u64)> = keys.into_iter().collect();
        let index: BTreeMap<(u64, u64), usize> = points
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i))
            .collect();

        let mut uf = MinUnionFind::new(points.len());
        if tolerance > 0.0 {
            // Bucket points on a grid of cell size `tolerance`; matching
            // points are at most one cell apart in either axis.
            let cell = |v: f64| libm::floor(v / tolerance) as i64;
            let mut grid: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
            let coords: Vec<[f64; 2]> = points
                .iter()
                .map(|&(bx, by)| [f64::from_bits(bx), f64::from_bits(by)])
                .collect();
            for (i, p) in coords.iter().enumerate() {
                grid.entry((cell(p[0]), cell(p[1]))).or_default().push(i);
            }
            let tol2 = tolerance * tolerance;
            for (i, p) in coords.iter().enumerate() {
                let (cx, cy) = (cell(p[0]), cell(p[1]));
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                            continue;
                        };
                        for &j in bucket {
                            if j <= i {
                                continue;
                            }
                            let q = coords[j];
                            let d2 = (p[0] - q[0]) * (p[0] - q[0])
                                + (p[1] - q[1]) * (p[1] - q[1]);
                            if d2 <= tol2 {
                                uf.union(i, j);
                            }
                        }
                    }
                }
            }
        }
        let classes = index.into_iter().map(|(k, i)| (k, uf.find(i))).collect();
        VertexClasses { classes }
    }

    fn class_of(&self, p: [f64; 2]) -> usize {
        self.classes[&point_key(p)]
    }
}

/// Build the contiguity graph of a region set.
///
/// `tolerance` is the coordinate distance (in the units of the input
/// coordinates, e.g. degrees) within which two vertices count as the same
/// point. The default used by the pipeline is `1e-9`.
///
/// Regions with no contiguity ties are kept as islands. The input must be
/// non-empty with unique region ids.
pub fn build_adjacency(
    regions: &[Region],
    rule: ContiguityRule,
    tolerance: f64,
) -> Result<AdjacencyGraph> {
    if regions.is_empty() {
        return Err(Error::invalid("cannot build adjacency of an empty region set"));
    }
    if !(tolerance >= 0.0) || !tolerance.is_finite() {
        return Err(Error::invalid(format_args!(
            "tolerance must be finite and non-negative, got {tolerance}"
        )));
    }
    let mut seen = BTreeSet::new();
    for r in regions {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::invalid(format_args!(
                "duplicate region id {:?}",
                r.id
            )));
        }
    }

    let classes = VertexClasses::build(regions, tolerance);
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();

    match rule {
        ContiguityRule::Queen => {
            // class -> regions touching it
            let mut touch: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            for (ri, r) in regions.iter().enumerate() {
                for ring in &r.rings {
                    for &p in ring {
                        touch.entry(classes.class_of(p)).or_default().insert(ri);
                    }
                }
            }
            for (_, rs) in touch {
                let rs: Vec<usize> = rs.into_iter().collect();
                for a in 0..rs.len() {
                    for b in a + 1..rs.len() {
                        edges.insert((rs[a], rs[b]));
                    }
                }
            }
        }
        ContiguityRule::Rook => {
            // undirected class-pair edge -> regions using it
            let mut touch: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
            for (ri, r) in regions.iter().enumerate() {
                for ring in &r.rings {
                    for seg in ring.windows(2) {
                        let a = classes.class_of(seg[0]);
                        let b = classes.class_of(seg[1]);
                        if a == b {
                            // Degenerate (zero-length within tolerance) edge.
                            continue;
                        }
                        let key = if a < b { (a, b) } else { (b, a) };
                        touch.entry(key).or_default().insert(ri);
                    }
                }
            }
            for (_, rs) in touch {
                let rs: Vec<usize> = rs.into_iter().collect();
                for a in 0..rs.len() {
                    for b in a + 1..rs.len() {
                        edges.insert((rs[a], rs[b]));
                    }
                }
            }
        }
    }

    let region_ids: Vec<String> = regions.iter().map(|r| r.id.clone()).collect();
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    AdjacencyGraph::from_edges(region_ids, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;

    /// Closed unit square ring with lower-left corner at `(x, y)`.
    fn square(x: f64, y: f64) -> Ring {
        alloc::vec![
            [x, y],
            [x + 1.0, y],
            [x + 1.0, y + 1.0],
            [x, y + 1.0],
            [x, y],
        ]
    }

    /// `nrows x ncols` grid of unit squares, row-major ids "r{row}c{col}".
    pub(crate) fn grid(nrows: usize, ncols: usize) -> Vec<Region> {
        let mut out = Vec::new();
        for r in 0..nrows {
            for c in 0..ncols {
                out.push(
                    Region::new(
                        format!("r{r}c{c}"),
                        alloc::vec![square(c as f64, r as f64)],
                        100,
                    )
                    .unwrap(),
                );
            }
        }
        out
    }

    #[test]
    fn ring_validation() {
        assert!(Region::new("a", alloc::vec![], 0).is_err());
        // Unclosed ring
        let open = alloc::vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(Region::new("a", alloc::vec![open], 0).is_err());
        // Too short
        let short = alloc::vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]];
        assert!(Region::new("a", alloc::vec![short], 0).is_err());
        assert!(Region::new("a", alloc::vec![square(0.0, 0.0)], 0).is_ok());
    }

    #[test]
    fn three_by_three_rook_grid() {
        let regions = grid(3, 3);
        let g = build_adjacency(&regions, ContiguityRule::Rook, 1e-9).unwrap();
        // Center has 4 neighbors, corners 2, and w_total counts both
        // directions of the 12 undirected grid edges.
        let center = g.index_of("r1c1").unwrap();
        assert_eq!(g.degree(center), 4);
        for corner in ["r0c0", "r0c2", "r2c0", "r2c2"] {
            assert_eq!(g.degree(g.index_of(corner).unwrap()), 2);
        }
        assert_eq!(g.w_total(), 24);
        assert!(g.islands().is_empty());
    }

    #[test]
    fn three_by_three_queen_adds_diagonals() {
        let regions = grid(3, 3);
        let g = build_adjacency(&regions, ContiguityRule::Queen, 1e-9).unwrap();
        let center = g.index_of("r1c1").unwrap();
        assert_eq!(g.degree(center), 8);
        for corner in ["r0c0", "r0c2", "r2c0", "r2c2"] {
            assert_eq!(g.degree(g.index_of(corner).unwrap()), 3);
        }
        // 12 rook edges + 8 diagonal contacts, both directions.
        assert_eq!(g.w_total(), 40);
    }

    #[test]
    fn tolerance_bridges_small_gaps() {
        // Second square shifted by 1e-10 along x: within the default
        // tolerance the shared edge still matches; with tolerance 0 the
        // regions are islands.
        let a = Region::new("a", alloc::vec![square(0.0, 0.0)], 1).unwrap();
        let b = Region::new("b", alloc::vec![square(1.0 + 1e-10, 0.0)], 1).unwrap();
        let g = build_adjacency(&[a.clone(), b.clone()], ContiguityRule::Queen, 1e-9).unwrap();
        assert_eq!(g.degree(0), 1);
        let g0 = build_adjacency(&[a, b], ContiguityRule::Queen, 0.0).unwrap();
        assert_eq!(g0.degree(0), 0);
        assert_eq!(g0.islands(), alloc::vec![0, 1]);
    }

    #[test]
    fn corner_touch_is_queen_but_not_rook() {
        let a = Region::new("a", alloc::vec![square(0.0, 0.0)], 1).unwrap();
        let d = Region::new("d", alloc::vec![square(1.0, 1.0)], 1).unwrap();
        let queen = build_adjacency(&[a.clone(), d.clone()], ContiguityRule::Queen, 1e-9).unwrap();
        let rook = build_adjacency(&[a, d], ContiguityRule::Rook, 1e-9).unwrap();
        assert_eq!(queen.degree(0), 1);
        assert_eq!(rook.degree(0), 0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = Region::new("same", alloc::vec![square(0.0, 0.0)], 1).unwrap();
        let b = Region::new("same", alloc::vec![square(1.0, 0.0)], 1).unwrap();
        let err = build_adjacency(&[a, b], ContiguityRule::Queen, 1e-9).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn empty_rejected() {
        assert!(build_adjacency(&[], ContiguityRule::Queen, 1e-9).is_err());
    }

    #[test]
    fn multipolygon_regions_connect_through_any_part() {
        // Region "m" has two disjoint parts; the second part touches "b".
        let m = Region::new(
            "m",
            alloc::vec![square(0.0, 0.0), square(5.0, 0.0)],
            10,
        )
        .unwrap();
        let b = Region::new("b", alloc::vec![square(6.0, 0.0)], 10).unwrap();
        let g = build_adjacency(&[m, b], ContiguityRule::Rook, 1e-9).unwrap();
        assert_eq!(g.degree(0), 1);
        assert_eq!(g.neighbors(0).unwrap(), &[1]);
    }

    #[test]
    fn st_neighborhood_previous_year() {
        let regions = grid(1, 3); // path a - b - c
        let g = build_adjacency(&regions, ContiguityRule::Rook, 1e-9).unwrap();
        let mid = g.index_of("r0c1").unwrap();
        assert_eq!(st_neighborhood(&g, mid, 0).unwrap(), alloc::vec![]);
        let nb = st_neighborhood(&g, mid, 4).unwrap();
        assert_eq!(nb, alloc::vec![(0, 3), (2, 3)]);
        assert!(st_neighborhood(&g, 99, 1).is_err());
    }

    #[test]
    fn subset_deletes_rows_without_rewiring() {
        // Path a - b - c: removing b leaves a and c disconnected.
        let regions = grid(1, 3);
        let g = build_adjacency(&regions, ContiguityRule::Rook, 1e-9).unwrap();
        let sub = subset_graph(&g, &["r0c1".to_string()]).unwrap();
        assert_eq!(sub.n_regions(), 2);
        assert_eq!(sub.w_total(), 0);
        assert_eq!(sub.islands().len(), 2);
        assert_eq!(sub.region_ids(), &["r0c0".to_string(), "r0c2".to_string()]);

        // Unknown ids are named in the error.
        let err = subset_graph(&g, &["nope".to_string()]).unwrap_err();
        match err {
            Error::InvalidInput(msg) => assert!(msg.contains("nope")),
            other => panic!("unexpected error {other:?}"),
        }

        // Empty exclusion list is the identity.
        let same = subset_graph(&g, &[]).unwrap();
        assert_eq!(&same, &g);
    }

    #[test]
    fn neighbors_out_of_range_is_invalid() {
        let regions = grid(1, 2);
        let g = build_adjacency(&regions, ContiguityRule::Rook, 1e-9).unwrap();
        assert!(g.neighbors(2).is_err());
        assert_eq!(g.neighbors(0).unwrap(), &[1]);
    }
}
