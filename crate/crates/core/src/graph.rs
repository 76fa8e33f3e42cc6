//! Region adjacency structure, spatial weight matrices and the intrinsic
//! CAR precision operator.
//!
//! A [`RegionGraph`] can be built from an explicit adjacency list (the
//! canonical input) or derived from polygon rings via queen contiguity:
//! two regions are neighbours when they share a border or a single vertex.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Symmetric, loop-free adjacency over `n_regions` regions, with the
/// connected-component partition precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGraph {
    n_regions: usize,
    neighbors: Vec<Vec<usize>>,
    component_id: Vec<usize>,
    components: Vec<Vec<usize>>,
}

impl RegionGraph {
    /// Builds a graph from undirected pairs. Pairs are closed symmetrically
    /// and duplicates are idempotent.
    pub fn from_adjacency_list(n_regions: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_regions];
        for &(i, j) in pairs {
            if i == j {
                return Err(Error::Validation(format!("self-loop on region {i}")));
            }
            if i >= n_regions || j >= n_regions {
                return Err(Error::Validation(format!(
                    "adjacency pair ({i}, {j}) out of range for {n_regions} regions"
                )));
            }
            sets[i].insert(j);
            sets[j].insert(i);
        }
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self::from_neighbor_lists(neighbors))
    }

    fn from_neighbor_lists(neighbors: Vec<Vec<usize>>) -> Self {
        let n_regions = neighbors.len();
        // BFS component labelling.
        let mut component_id = vec![usize::MAX; n_regions];
        let mut components = Vec::new();
        for start in 0..n_regions {
            if component_id[start] != usize::MAX {
                continue;
            }
            let cid = components.len();
            let mut members = vec![start];
            component_id[start] = cid;
            let mut queue = vec![start];
            while let Some(i) = queue.pop() {
                for &j in &neighbors[i] {
                    if component_id[j] == usize::MAX {
                        component_id[j] = cid;
                        members.push(j);
                        queue.push(j);
                    }
                }
            }
            members.sort_unstable();
            components.push(members);
        }
        Self { n_regions, neighbors, component_id, components }
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Disjoint cover of all regions by connected component.
    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn component_of(&self, i: usize) -> usize {
        self.component_id[i]
    }

    /// Undirected edges with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn n_edges(&self) -> usize {
        self.edges().count()
    }

    /// Induced subgraph on `indices` (in the given order); region `k` of the
    /// subgraph corresponds to `indices[k]`.
    pub fn subgraph(&self, indices: &[usize]) -> Result<Self> {
        let mut pos = vec![usize::MAX; self.n_regions];
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.n_regions {
                return Err(Error::Validation(format!("subgraph index {i} out of range")));
            }
            if pos[i] != usize::MAX {
                return Err(Error::Validation(format!("subgraph index {i} repeated")));
            }
            pos[i] = k;
        }
        let neighbors = indices
            .iter()
            .map(|&i| {
                let mut ns: Vec<usize> =
                    self.neighbors[i].iter().filter(|&&j| pos[j] != usize::MAX).map(|&j| pos[j]).collect();
                ns.sort_unstable();
                ns
            })
            .collect();
        Ok(Self::from_neighbor_lists(neighbors))
    }

    /// Parses the adjacency-list file format: one `i j` pair per line,
    /// `#` comments and blank lines ignored, 0-based indices.
    pub fn from_adjacency_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut max_index = 0usize;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (a, b) = (it.next(), it.next());
            if it.next().is_some() {
                return Err(Error::Validation(format!(
                    "adjacency line {}: expected 'i j', got {raw:?}",
                    lineno + 1
                )));
            }
            match (a.and_then(|s| s.parse::<usize>().ok()), b.and_then(|s| s.parse::<usize>().ok())) {
                (Some(i), Some(j)) => {
                    max_index = max_index.max(i).max(j);
                    pairs.push((i, j));
                }
                _ => {
                    return Err(Error::Validation(format!(
                        "adjacency line {}: expected 'i j', got {raw:?}",
                        lineno + 1
                    )))
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::Validation("adjacency file contains no edges".into()));
        }
        Self::from_adjacency_list(max_index + 1, &pairs)
    }

    pub fn from_adjacency_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut text = String::new();
        for line in std::io::BufReader::new(file).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_adjacency_text(&text)
    }

    pub fn write_adjacency<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, j) in self.edges() {
            writeln!(out, "{i} {j}")?;
        }
        Ok(())
    }

    /// Queen-contiguity lattice: cells of a `rows x cols` grid are neighbours
    /// when they touch orthogonally or diagonally.
    pub fn queen_lattice(rows: usize, cols: usize) -> Self {
        let mut pairs = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    pairs.push((i, i + 1));
                }
                if r + 1 < rows {
                    pairs.push((i, i + cols));
                    if c + 1 < cols {
                        pairs.push((i, i + cols + 1));
                    }
                    if c > 0 {
                        pairs.push((i, i + cols - 1));
                    }
                }
            }
        }
        Self::from_adjacency_list(rows * cols, &pairs).expect("lattice pairs are valid")
    }

    /// The bundled 99-county Iowa neighbourhood fixture (queen contiguity on
    /// the state's 9x11 county lattice). Connected, so the ICAR precision has
    /// rank 98.
    pub fn iowa99() -> Self {
        Self::from_adjacency_text(IOWA99_ADJACENCY).expect("bundled fixture is valid")
    }
}

/// Raw text of the bundled Iowa adjacency fixture.
pub const IOWA99_ADJACENCY: &str = include_str!("../data/iowa99_adjacency.txt");

/// Weight style for [`WeightMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStyle {
    /// `w_ij = 1` for neighbours, 0 otherwise.
    Binary,
    /// Each non-empty row rescaled to sum to one.
    RowStandardized,
}

impl std::str::FromStr for WeightStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "b" => Ok(WeightStyle::Binary),
            "row" | "row_standardized" | "w" => Ok(WeightStyle::RowStandardized),
            other => Err(Error::Validation(format!(
                "unknown weight style {other:?} (expected 'binary' or 'row_standardized')"
            ))),
        }
    }
}

/// Sparse non-negative spatial weights with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    style: WeightStyle,
    n: usize,
    /// Per-row `(column, weight)` entries, column-sorted.
    rows: Vec<Vec<(usize, f64)>>,
    /// Regions with no neighbours (all-zero rows); relevant for the
    /// row-standardized style, where such rows cannot be rescaled.
    isolated: Vec<usize>,
}

impl WeightMatrix {
    pub fn style(&self) -> WeightStyle {
        self.style
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Regions whose weight row is all zeros.
    pub fn isolated_regions(&self) -> &[usize] {
        &self.isolated
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, w)| (i, j, w)))
    }

    /// Sum of all weights (the `S0` term of the Moran variance).
    pub fn s0(&self) -> f64 {
        self.entries().map(|(_, _, w)| w).sum()
    }

    /// `S1 = 1/2 * sum_ij (w_ij + w_ji)^2`.
    pub fn s1(&self) -> f64 {
        let mut total = 0.0;
        for (i, j, w) in self.entries() {
            let wji = self.weight(j, i);
            total += (w + wji) * (w + wji);
        }
        0.5 * total
    }

    /// `S2 = sum_i (row_sum_i + col_sum_i)^2`.
    pub fn s2(&self) -> f64 {
        let mut row_sum = vec![0.0; self.n];
        let mut col_sum = vec![0.0; self.n];
        for (i, j, w) in self.entries() {
            row_sum[i] += w;
            col_sum[j] += w;
        }
        (0..self.n).map(|i| (row_sum[i] + col_sum[i]).powi(2)).sum()
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map(|k| self.rows[i][k].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for (i, j, w) in self.entries() {
            m[i][j] = w;
        }
        m
    }
}

/// Builds the weight matrix for a graph in the requested style.
///
/// Isolated regions yield all-zero rows; they are listed in
/// [`WeightMatrix::isolated_regions`] so callers can flag them.
pub fn weight_matrix(graph: &RegionGraph, style: WeightStyle) -> WeightMatrix {
    let n = graph.n_regions();
    let mut rows = Vec::with_capacity(n);
    let mut isolated = Vec::new();
    for i in 0..n {
        let deg = graph.degree(i);
        if deg == 0 {
            isolated.push(i);
            rows.push(Vec::new());
            continue;
        }
        let w = match style {
            WeightStyle::Binary => 1.0,
            WeightStyle::RowStandardized => 1.0 / deg as f64,
        };
        rows.push(graph.neighbors(i).iter().map(|&j| (j, w)).collect());
    }
    WeightMatrix { style, n, rows, isolated }
}

/// The intrinsic CAR precision `Q = D - A` of a region graph: positive
/// semidefinite with rank `n_regions - n_components`.
///
/// `Q` is improper (its null space is spanned by the per-component indicator
/// vectors), so log densities built on it use the pseudo-determinant
/// convention; see `model::icar_logdensity`.
#[derive(Debug, Clone)]
pub struct IcarPrecision {
    n: usize,
    degrees: Vec<usize>,
    edges: Vec<(usize, usize)>,
    rank: usize,
}

pub fn icar_precision(graph: &RegionGraph) -> IcarPrecision {
    IcarPrecision {
        n: graph.n_regions(),
        degrees: graph.degrees(),
        edges: graph.edges().collect(),
        rank: graph.n_regions() - graph.n_components(),
    }
}

impl IcarPrecision {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `n_regions - n_components`; equals the matrix rank.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `x' Q x = sum over edges (x_i - x_j)^2`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n, "quad_form dimension mismatch");
        self.edges.iter().map(|&(i, j)| (x[i] - x[j]) * (x[i] - x[j])).sum()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut q = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            q[(i, i)] = self.degrees[i] as f64;
        }
        for &(i, j) in &self.edges {
            q[(i, j)] = -1.0;
            q[(j, i)] = -1.0;
        }
        q
    }
}

/// One region's geometry: a set of closed rings (outer boundaries and holes
/// are treated alike for contiguity purposes).
#[derive(Debug, Clone)]
pub struct RegionPolygon {
    pub region_id: String,
    pub rings: Vec<Vec<[f64; 2]>>,
}

/// Queen contiguity from polygon rings: regions are neighbours when any
/// vertex of one lies within `snap_tol` of any vertex or boundary edge of
/// the other (a shared border and a shared corner both qualify).
///
/// Regions are sorted by `region_id` before indexing, so the resulting graph
/// ordering is deterministic. Returns the graph together with the sorted ids.
pub fn queen_contiguity(
    polygons: &[RegionPolygon],
    snap_tol: f64,
) -> Result<(RegionGraph, Vec<String>)> {
    if snap_tol < 0.0 || !snap_tol.is_finite() {
        return Err(Error::Validation(format!("snap_tol must be finite and >= 0, got {snap_tol}")));
    }
    let mut order: Vec<usize> = (0..polygons.len()).collect();
    order.sort_by(|&a, &b| polygons[a].region_id.cmp(&polygons[b].region_id));
    let sorted: Vec<&RegionPolygon> = order.iter().map(|&k| &polygons[k]).collect();

    for p in &sorted {
        let distinct: BTreeSet<(u64, u64)> = p
            .rings
            .iter()
            .flatten()
            .map(|v| (v[0].to_bits(), v[1].to_bits()))
            .collect();
        if distinct.len() < 3 {
            return Err(Error::Validation(format!(
                "degenerate polygon for region {:?}: fewer than 3 distinct vertices",
                p.region_id
            )));
        }
    }

    let boxes: Vec<[f64; 4]> = sorted.iter().map(|p| bounding_box(p)).collect();
    let n = sorted.len();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if !boxes_within(&boxes[a], &boxes[b], snap_tol) {
                continue;
            }
            if polygons_touch(sorted[a], sorted[b], snap_tol) {
                pairs.push((a, b));
            }
        }
    }
    let graph = RegionGraph::from_adjacency_list(n, &pairs)?;
    let ids = sorted.iter().map(|p| p.region_id.clone()).collect();
    Ok((graph, ids))
}

fn bounding_box(p: &RegionPolygon) -> [f64; 4] {
    let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for v in p.rings.iter().flatten() {
        bb[0] = bb[0].min(v[0]);
        bb[1] = bb[1].min(v[1]);
        bb[2] = bb[2].max(v[0]);
        bb[3] = bb[3].max(v[1]);
    }
    bb
}

fn boxes_within(a: &[f64; 4], b: &[f64; 4], tol: f64) -> bool {
    a[0] <= b[2] + tol && b[0] <= a[2] + tol && a[1] <= b[3] + tol && b[1] <= a[3] + tol
}

fn polygons_touch(a: &RegionPolygon, b: &RegionPolygon, tol: f64) -> bool {
    vertices_near_boundary(a, b, tol) || vertices_near_boundary(b, a, tol)
}

/// True when some vertex of `a` lies within `tol` of a vertex or edge of `b`.
fn vertices_near_boundary(a: &RegionPolygon, b: &RegionPolygon, tol: f64) -> bool {
    let tol2 = tol * tol;
    for va in a.rings.iter().flatten() {
        for ring in &b.rings {
            for k in 0..ring.len() {
                let p = ring[k];
                let q = ring[(k + 1) % ring.len()];
                if point_segment_dist2(*va, p, q) <= tol2 {
                    return true;
                }
            }
        }
    }
    false
}

fn point_segment_dist2(v: [f64; 2], p: [f64; 2], q: [f64; 2]) -> f64 {
    let dx = q[0] - p[0];
    let dy = q[1] - p[1];
    let len2 = dx * dx + dy * dy;
    let (cx, cy) = if len2 == 0.0 {
        (p[0], p[1])
    } else {
        let t = (((v[0] - p[0]) * dx + (v[1] - p[1]) * dy) / len2).clamp(0.0, 1.0);
        (p[0] + t * dx, p[1] + t * dy)
    };
    (v[0] - cx) * (v[0] - cx) + (v[1] - cy) * (v[1] - cy)
}

/// Parses a GeoJSON FeatureCollection into region polygons. Every feature
/// must carry the `region_id_property` and a Polygon or MultiPolygon
/// geometry.
pub fn parse_geojson_polygons(json: &str, region_id_property: &str) -> Result<Vec<RegionPolygon>> {
    let root: serde_json::Value = serde_json::from_str(json)?;
    let features = root
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::Validation("GeoJSON input is not a FeatureCollection".into()))?;
    let mut out = Vec::with_capacity(features.len());
    for (k, feat) in features.iter().enumerate() {
        let region_id = feat
            .get("properties")
            .and_then(|p| p.get(region_id_property))
            .map(json_scalar_to_string)
            .ok_or_else(|| {
                Error::Validation(format!("feature {k} lacks property {region_id_property:?}"))
            })?;
        let geom = feat
            .get("geometry")
            .ok_or_else(|| Error::Validation(format!("feature {k} lacks a geometry")))?;
        let gtype = geom.get("type").and_then(|t| t.as_str()).unwrap_or("");
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| Error::Validation(format!("feature {k} lacks coordinates")))?;
        let rings = match gtype {
            "Polygon" => parse_polygon_rings(coords)?,
            "MultiPolygon" => {
                let polys = coords
                    .as_array()
                    .ok_or_else(|| Error::Validation(format!("feature {k}: bad MultiPolygon")))?;
                let mut rings = Vec::new();
                for poly in polys {
                    rings.extend(parse_polygon_rings(poly)?);
                }
                rings
            }
            other => {
                return Err(Error::Validation(format!(
                    "feature {k} ({region_id}): unsupported geometry type {other:?} (only Polygon/MultiPolygon)"
                )))
            }
        };
        out.push(RegionPolygon { region_id, rings });
    }
    Ok(out)
}

fn json_scalar_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_polygon_rings(coords: &serde_json::Value) -> Result<Vec<Vec<[f64; 2]>>> {
    let rings = coords
        .as_array()
        .ok_or_else(|| Error::Validation("bad Polygon coordinates".into()))?;
    rings
        .iter()
        .map(|ring| {
            let pts = ring
                .as_array()
                .ok_or_else(|| Error::Validation("bad Polygon ring".into()))?;
            let mut out: Vec<[f64; 2]> = pts
                .iter()
                .map(|pt| {
                    let xy = pt.as_array().filter(|a| a.len() >= 2).ok_or_else(|| {
                        Error::Validation("bad coordinate pair in Polygon ring".into())
                    })?;
                    Ok([
                        xy[0].as_f64().ok_or_else(|| Error::Validation("non-numeric coordinate".into()))?,
                        xy[1].as_f64().ok_or_else(|| Error::Validation("non-numeric coordinate".into()))?,
                    ])
                })
                .collect::<Result<_>>()?;
            // Drop an explicit closing vertex; rings are treated as closed.
            if out.len() >= 2 && out.first() == out.last() {
                out.pop();
            }
            Ok(out)
        })
        .collect()
}
