//! Grid-accelerated DBSCAN over 3-D points.
//!
//! Space is bucketed into cubes of side `eps / sqrt(3)`, so any two points in
//! one cube are within `eps` of each other. Cubes holding core points are
//! merged with a union-find whenever some pair of their core points is within
//! `eps`, which yields exactly the connected components of the core-point
//! graph. A border point joins the cluster of its nearest core neighbor
//! (smallest index on ties); everything else is noise.

use std::collections::HashMap;

type Cell = (i64, i64, i64);

struct Grid {
    side: f64,
    cells: HashMap<Cell, Vec<u32>>,
}

impl Grid {
    fn new(points: &[[f64; 3]], side: f64) -> Self {
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, side)).or_default().push(i as u32);
        }
        Self { side, cells }
    }
}

fn cell_of(p: &[f64; 3], side: f64) -> Cell {
    ((p[0] / side).floor() as i64, (p[1] / side).floor() as i64, (p[2] / side).floor() as i64)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Cell offsets that can hold points within `eps` of a point in the center cell.
const REACH: i64 = 2;

fn neighbor_cells(c: Cell) -> impl Iterator<Item = Cell> {
    (-REACH..=REACH).flat_map(move |dx| {
        (-REACH..=REACH).flat_map(move |dy| (-REACH..=REACH).map(move |dz| (c.0 + dx, c.1 + dy, c.2 + dz)))
    })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Clusters `points`; returns one sorted index list per cluster, largest
/// first, ties by smallest member index. Noise points appear in no cluster.
///
/// `min_points` counts the point itself, so `min_points = 1` makes every point
/// a core point and the result is the connected components of the
/// `eps`-neighborhood graph.
pub fn dbscan(points: &[[f64; 3]], eps: f64, min_points: usize) -> Vec<Vec<u32>> {
    assert!(eps > 0.0 && min_points >= 1, "dbscan requires eps > 0 and min_points >= 1");
    if points.is_empty() {
        return Vec::new();
    }
    let eps2 = eps * eps;
    let grid = Grid::new(points, eps / 3f64.sqrt());
    let mut cell_keys: Vec<Cell> = grid.cells.keys().copied().collect();
    cell_keys.sort_unstable();

    // core flags
    let mut core = vec![false; points.len()];
    for key in &cell_keys {
        let members = &grid.cells[key];
        if members.len() >= min_points {
            for &i in members {
                core[i as usize] = true;
            }
            continue;
        }
        for &i in members {
            let p = &points[i as usize];
            let mut count = 0usize;
            'outer: for nc in neighbor_cells(*key) {
                if let Some(others) = grid.cells.get(&nc) {
                    for &j in others {
                        if dist2(p, &points[j as usize]) <= eps2 {
                            count += 1;
                            if count >= min_points {
                                break 'outer;
                            }
                        }
                    }
                }
            }
            core[i as usize] = count >= min_points;
        }
    }

    // union cells through core-core pairs
    let cell_id: HashMap<Cell, usize> = cell_keys.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let core_in: Vec<Vec<u32>> = cell_keys
        .iter()
        .map(|k| grid.cells[k].iter().copied().filter(|&i| core[i as usize]).collect())
        .collect();
    let mut uf = UnionFind::new(cell_keys.len());
    for (a, key) in cell_keys.iter().enumerate() {
        if core_in[a].is_empty() {
            continue;
        }
        for nc in neighbor_cells(*key) {
            let Some(&b) = cell_id.get(&nc) else { continue };
            if b <= a || core_in[b].is_empty() || uf.find(a) == uf.find(b) {
                continue;
            }
            let linked = core_in[a]
                .iter()
                .any(|&i| core_in[b].iter().any(|&j| dist2(&points[i as usize], &points[j as usize]) <= eps2));
            if linked {
                uf.union(a, b);
            }
        }
    }

    // label: core points by their cell root, border points by nearest core neighbor
    let mut label: Vec<Option<usize>> = vec![None; points.len()];
    for (a, _) in cell_keys.iter().enumerate() {
        let root = uf.find(a);
        for &i in &core_in[a] {
            label[i as usize] = Some(root);
        }
    }
    let side = grid.side;
    for (i, p) in points.iter().enumerate() {
        if core[i] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for nc in neighbor_cells(cell_of(p, side)) {
            let Some(&b) = cell_id.get(&nc) else { continue };
            for &j in &core_in[b] {
                let d = dist2(p, &points[j as usize]);
                if d <= eps2 && best.is_none_or(|(bd, bj)| d < bd || (d == bd && (j as usize) < bj)) {
                    best = Some((d, j as usize));
                }
            }
        }
        if let Some((_, j)) = best {
            label[i] = label[j];
        }
    }

    let mut groups: HashMap<usize, Vec<u32>> = HashMap::new();
    for (i, l) in label.iter().enumerate() {
        if let Some(l) = l {
            groups.entry(*l).or_default().push(i as u32);
        }
    }
    let mut clusters: Vec<Vec<u32>> = groups.into_values().collect();
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: [f64; 3], n: usize, spread: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                [center[0] + spread * t.cos(), center[1] + spread * t.sin(), center[2] + spread * (i % 3) as f64 * 0.3]
            })
            .collect()
    }

    #[test]
    fn two_far_blobs() {
        let mut pts = blob([0.0; 3], 10, 0.2);
        pts.extend(blob([5.0, 0.0, 0.0], 10, 0.2));
        let c = dbscan(&pts, 0.95, 1);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0], (0..10).collect::<Vec<u32>>());
        assert_eq!(c[1], (10..20).collect::<Vec<u32>>());
    }

    #[test]
    fn chain_is_one_cluster() {
        let pts: Vec<[f64; 3]> = (0..30).map(|i| [0.5 * i as f64, 0.0, 0.0]).collect();
        let c = dbscan(&pts, 0.95, 1);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 30);
    }

    #[test]
    fn isolated_point_is_noise_with_min_points() {
        let mut pts = blob([0.0; 3], 20, 0.3);
        pts.push([10.0, 0.0, 0.0]);
        let c = dbscan(&pts, 0.95, 4);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 20);
        assert!(!c[0].contains(&20));
    }

    #[test]
    fn size_then_index_ordering() {
        let mut pts = blob([9.0, 0.0, 0.0], 3, 0.1);
        pts.extend(blob([0.0; 3], 5, 0.1));
        pts.extend(blob([-9.0, 0.0, 0.0], 3, 0.1));
        let c = dbscan(&pts, 0.5, 1);
        assert_eq!(c.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 3, 3]);
        assert_eq!(c[1][0], 0);
        assert_eq!(c[2][0], 8);
    }

    #[test]
    fn negative_coordinates_and_exact_eps() {
        // distance exactly eps is a neighbor
        let pts = vec![[-1.0, -1.0, -1.0], [-1.0, -1.0, -0.5]];
        assert_eq!(dbscan(&pts, 0.5, 1).len(), 1);
        assert_eq!(dbscan(&pts, 0.499, 1).len(), 2);
    }
}
