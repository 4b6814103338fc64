//! Sensor graph construction and slicing.
//!
//! Adjacency weights come from a thresholded Gaussian kernel over road
//! distances. `W[r][s]` is the weight of the directed edge from sender `s`
//! to receiver `r`; the edge list and the dense matrix always agree.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default kernel threshold.
pub const DEFAULT_KAPPA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub sender: usize,
    pub receiver: usize,
    pub weight: f64,
}

/// Longitude/latitude in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub lon: f64,
    pub lat: f64,
}

/// Square matrix of road distances; `values[i * n + j]` is the distance from
/// node `i` to node `j`. Unreachable pairs are `+inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * n {
            return Err(Error::dim("DistanceMatrix", &[n, n], &[values.len()]));
        }
        Ok(Self { ids, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    /// Reads a CSV whose header row lists node ids and whose body is the
    /// square distance matrix. Empty cells and `inf` mean unreachable.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let ids: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut values = Vec::with_capacity(ids.len() * ids.len());
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != ids.len() {
                return Err(Error::dim("distance csv row", &[ids.len()], &[rec.len()]));
            }
            for cell in rec.iter() {
                let cell = cell.trim();
                let v = if cell.is_empty() {
                    f64::INFINITY
                } else {
                    cell.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad distance `{cell}` in {}", path.display())))?
                };
                values.push(v);
            }
        }
        Self::new(ids, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.ids)?;
        let n = self.len();
        for i in 0..n {
            w.write_record(self.values[i * n..(i + 1) * n].iter().map(|v| format_float(*v)))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub(crate) fn format_float(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    node_ids: Vec<String>,
    coords: Option<Vec<Coord>>,
    edges: Vec<Edge>,
    adjacency: Vec<f64>,
}

impl SensorGraph {
    /// Builds a graph from a dense weight matrix (`adjacency[r * n + s]`).
    /// Every nonzero entry becomes an edge, receiver-major.
    pub fn from_adjacency(node_ids: Vec<String>, coords: Option<Vec<Coord>>, adjacency: Vec<f64>) -> Result<Self> {
        let n = node_ids.len();
        if adjacency.len() != n * n {
            return Err(Error::dim("adjacency", &[n, n], &[adjacency.len()]));
        }
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(Error::dim("coords", &[n], &[c.len()]));
            }
        }
        if let Some(w) = adjacency.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Contract(format!("adjacency weight {w} outside [0, 1]")));
        }
        let mut edges = Vec::new();
        for r in 0..n {
            for s in 0..n {
                let w = adjacency[r * n + s];
                if w != 0.0 {
                    edges.push(Edge {
                        sender: s,
                        receiver: r,
                        weight: w,
                    });
                }
            }
        }
        Ok(Self {
            node_ids,
            coords,
            edges,
            adjacency,
        })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn coords(&self) -> Option<&[Coord]> {
        self.coords.as_deref()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Row-major `W[r][s]`.
    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn weight(&self, receiver: usize, sender: usize) -> f64 {
        self.adjacency[receiver * self.len() + sender]
    }

    pub fn nonself_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.sender != e.receiver).count()
    }

    pub fn with_coords(mut self, coords: Vec<Coord>) -> Result<Self> {
        if coords.len() != self.len() {
            return Err(Error::dim("coords", &[self.len()], &[coords.len()]));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract("not a permutation".into()));
        }
        let ids = perm.iter().map(|&p| self.node_ids[p].clone()).collect();
        let coords = self.coords.as_ref().map(|c| perm.iter().map(|&p| c[p]).collect());
        let mut adj = vec![0.0; n * n];
        for r in 0..n {
            for s in 0..n {
                adj[r * n + s] = self.adjacency[perm[r] * n + perm[s]];
            }
        }
        Self::from_adjacency(ids, coords, adj)
    }

    /// Attaches coordinates by node id from a CSV with columns
    /// `id, longitude, latitude`.
    pub fn read_coords_csv(&self, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut by_id = HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(Error::Config(format!(
                    "node table {} needs id, longitude, latitude",
                    path.display()
                )));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad coordinate `{s}` in {}", path.display())))
            };
            by_id.insert(
                rec[0].trim().to_string(),
                Coord {
                    lon: parse(&rec[1])?,
                    lat: parse(&rec[2])?,
                },
            );
        }
        let coords = self
            .node_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("node `{id}` missing from {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        self.clone().with_coords(coords)
    }

    pub fn write_coords_csv(&self, path: &Path) -> Result<()> {
        let coords = self
            .coords
            .as_ref()
            .ok_or_else(|| Error::Contract("graph has no coordinates".into()))?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "longitude", "latitude"])?;
        for (id, c) in self.node_ids.iter().zip(coords) {
            w.write_record([id.clone(), format!("{}", c.lon), format!("{}", c.lat)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Edge list as `sender, receiver, weight` rows keyed by node id.
    pub fn write_edges_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sender", "receiver", "weight"])?;
        for e in &self.edges {
            w.write_record([
                self.node_ids[e.sender].clone(),
                self.node_ids[e.receiver].clone(),
                format!("{}", e.weight),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Population standard deviation over finite off-diagonal distances.
pub fn distance_std(dist: &DistanceMatrix) -> Option<f64> {
    let n = dist.len();
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| dist.get(i, j))
        .filter(|v| v.is_finite())
        .collect();
    if vals.is_empty() {
        return None;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Some(var.sqrt())
}

/// Thresholded Gaussian kernel: `W = exp(-dist^2 / sigma^2)` where that is
/// at least `kappa`, zero elsewhere.
pub fn build_adjacency(dist: &DistanceMatrix, kappa: f64) -> Result<SensorGraph> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Config(format!("kappa {kappa} outside [0, 1]")));
    }
    if let Some(bad) = dist.values.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::Contract(format!("distance {bad} is not a nonnegative number")));
    }
    let sigma = distance_std(dist)
        .filter(|s| *s > 0.0)
        .ok_or_else(|| Error::Degenerate("distance spread is zero; kernel width undefined".into()))?;
    Ok(kernel_with_sigma(dist, sigma, kappa))
}

/// Same as [`build_adjacency`] with an explicit kernel width.
pub fn kernel_with_sigma(dist: &DistanceMatrix, sigma: f64, kappa: f64) -> SensorGraph {
    let adjacency = dist
        .values
        .iter()
        .map(|&d| {
            let k = (-(d * d) / (sigma * sigma)).exp();
            if k >= kappa {
                k
            } else {
                0.0
            }
        })
        .collect();
    SensorGraph::from_adjacency(dist.ids.clone(), None, adjacency).expect("kernel weights lie in [0, 1]")
}

/// Induced subgraph on the `floor(eta * n)` westernmost nodes, in original
/// node order. Returns the subgraph and, for each sub-index, its original
/// index.
pub fn subgraph_by_longitude(g: &SensorGraph, eta: f64) -> Result<(SensorGraph, Vec<usize>)> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Config(format!("eta {eta} outside (0, 1]")));
    }
    let coords = g
        .coords()
        .ok_or_else(|| Error::Contract("longitude cut needs node coordinates".into()))?;
    let n = g.len();
    let keep_count = (eta * n as f64 + 1e-9).floor() as usize;
    if keep_count == 0 {
        return Err(Error::Degenerate(format!("eta {eta} keeps no nodes of {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| coords[a].lon.total_cmp(&coords[b].lon).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..keep_count].to_vec();
    kept.sort_unstable();
    Ok((induced(g, &kept), kept))
}

/// Induced subgraph on `kept` (original indices, in the order given).
pub fn induced(g: &SensorGraph, kept: &[usize]) -> SensorGraph {
    let n = g.len();
    let k = kept.len();
    let mut adj = vec![0.0; k * k];
    for (ri, &r) in kept.iter().enumerate() {
        for (si, &s) in kept.iter().enumerate() {
            adj[ri * k + si] = g.adjacency[r * n + s];
        }
    }
    let ids = kept.iter().map(|&i| g.node_ids[i].clone()).collect();
    let coords = g.coords.as_ref().map(|c| kept.iter().map(|&i| c[i]).collect());
    SensorGraph::from_adjacency(ids, coords, adj).expect("weights come from a valid graph")
}

fn haversine_km(a: Coord, b: Coord) -> f64 {
    let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = la2 - la1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

/// Random sensor layout in a small lon/lat box. Each node gets a finite
/// distance to its `neighbours` nearest nodes (symmetrized); all other pairs
/// are unreachable.
pub fn random_layout<R: Rng + ?Sized>(n: usize, neighbours: usize, rng: &mut R) -> (DistanceMatrix, Vec<Coord>) {
    let coords: Vec<Coord> = (0..n)
        .map(|_| Coord {
            lon: rng.gen_range(-118.5..-118.0),
            lat: rng.gen_range(34.0..34.3),
        })
        .collect();
    let mut values = vec![f64::INFINITY; n * n];
    for i in 0..n {
        values[i * n + i] = 0.0;
        let mut by_dist: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (haversine_km(coords[i], coords[j]), j))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in by_dist.iter().take(neighbours) {
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    (DistanceMatrix { ids, values }, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    #[test]
    fn kernel_examples() {
        let d = DistanceMatrix::new(ids(2), vec![0.0, 1.0, 3.0, 0.0]).unwrap();
        let g = kernel_with_sigma(&d, 1.0, 0.1);
        assert_eq!(g.weight(0, 0), 1.0);
        assert!((g.weight(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((g.weight(0, 1) - 0.36788).abs() < 1e-5);
        assert_eq!(g.weight(1, 0), 0.0); // exp(-9) < 0.1
        assert_eq!(g.edges().len(), 3);
    }

    #[test]
    fn sigma_uses_off_diagonal_finite_entries() {
        // off-diagonal finite: 1, 3 -> mean 2, population std 1
        let d = DistanceMatrix::new(
            ids(3),
            vec![
                0.0,
                1.0,
                f64::INFINITY,
                3.0,
                0.0,
                f64::INFINITY,
                f64::INFINITY,
                f64::INFINITY,
                0.0,
            ],
        )
        .unwrap();
        assert_eq!(distance_std(&d), Some(1.0));
        let g = build_adjacency(&d, DEFAULT_KAPPA).unwrap();
        assert_eq!(g.weight(2, 2), 1.0);
        assert_eq!(g.weight(0, 2), 0.0);
    }

    #[test]
    fn all_zero_distances_are_degenerate() {
        let d = DistanceMatrix::new(ids(3), vec![0.0; 9]).unwrap();
        assert!(matches!(build_adjacency(&d, 0.1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn longitude_cut_examples() {
        let coords: Vec<Coord> = [-118.2, -118.4, -118.1, -118.3]
            .iter()
            .map(|&lon| Coord { lon, lat: 34.0 })
            .collect();
        let g = SensorGraph::from_adjacency(ids(4), Some(coords), {
            let mut a = vec![0.5; 16];
            a[0] = 1.0;
            a
        })
        .unwrap();
        let (sub, map) = subgraph_by_longitude(&g, 0.5).unwrap();
        assert_eq!(map, vec![1, 3]);
        assert_eq!(sub.node_ids(), &["n1".to_string(), "n3".to_string()]);

        let (same, ident) = subgraph_by_longitude(&g, 1.0).unwrap();
        assert_eq!(same, g);
        assert_eq!(ident, vec![0, 1, 2, 3]);

        assert!(matches!(subgraph_by_longitude(&g, 0.2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cut_of_325_nodes_at_quarter_keeps_81() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, coords) = random_layout(325, 3, &mut rng);
        let g = build_adjacency(&d, 0.1).unwrap().with_coords(coords).unwrap();
        let (sub, _) = subgraph_by_longitude(&g, 0.25).unwrap();
        assert_eq!(sub.len(), 81);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, coords) = random_layout(6, 2, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dist.csv");
        d.write_csv(&p).unwrap();
        assert_eq!(DistanceMatrix::read_csv(&p).unwrap(), d);
        let g = build_adjacency(&d, 0.1).unwrap().with_coords(coords).unwrap();
        let np = dir.path().join("nodes.csv");
        g.write_coords_csv(&np).unwrap();
        let bare = build_adjacency(&d, 0.1).unwrap();
        assert_eq!(bare.read_coords_csv(&np).unwrap(), g);
        g.write_edges_csv(&dir.path().join("edges.csv")).unwrap();
    }

    fn random_dist(n: usize, seed: u64, symmetric: bool) -> DistanceMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && (!symmetric || j > i) {
                    let d = rng.gen_range(0.0..5.0);
                    v[i * n + j] = d;
                    if symmetric {
                        v[j * n + i] = d;
                    }
                }
            }
        }
        DistanceMatrix::new(ids(n), v).unwrap()
    }

    proptest! {
        #[test]
        fn edges_and_matrix_agree(seed in 0u64..500, sym in any::<bool>()) {
            let g = build_adjacency(&random_dist(7, seed, sym), 0.1).unwrap();
            let n = g.len();
            let nonzero = g.adjacency().iter().filter(|w| **w != 0.0).count();
            prop_assert_eq!(nonzero, g.edges().len());
            for e in g.edges() {
                prop_assert_eq!(g.weight(e.receiver, e.sender), e.weight);
                prop_assert!(e.weight > 0.0 && e.weight <= 1.0);
            }
            for i in 0..n {
                prop_assert_eq!(g.weight(i, i), 1.0);
            }
            if sym {
                for i in 0..n { for j in 0..n {
                    prop_assert_eq!(g.weight(i, j), g.weight(j, i));
                }}
            }
        }

        #[test]
        fn induced_edges_match_brute_force(seed in 0u64..500, mask in prop::collection::vec(any::<bool>(), 10)) {
            let g = build_adjacency(&random_dist(10, seed, false), 0.1).unwrap();
            let kept: Vec<usize> = (0..10).filter(|&i| mask[i]).collect();
            prop_assume!(!kept.is_empty());
            let sub = induced(&g, &kept);
            let mut expect: Vec<(usize, usize, f64)> = g.edges().iter()
                .filter(|e| mask[e.sender] && mask[e.receiver])
                .map(|e| (e.sender, e.receiver, e.weight))
                .collect();
            let mut got: Vec<(usize, usize, f64)> = sub.edges().iter()
                .map(|e| (kept[e.sender], kept[e.receiver], e.weight))
                .collect();
            expect.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            got.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            prop_assert_eq!(got, expect);
        }
    }
}
