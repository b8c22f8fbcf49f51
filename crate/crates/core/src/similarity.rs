//! Pairwise distances, agglomerative clustering and flat cuts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::EncodedMatrix;

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(nrows: usize, ncols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::Shape(format!(
                "{} values for a {nrows}x{ncols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { nrows, ncols, data })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Matrix {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            nrows: rows.len(),
            ncols,
            data: rows.concat(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ncols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.ncols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols
    }
}

/// Symmetric, zero-diagonal, non-negative distances between labelled items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    ids: Vec<String>,
    values: Matrix,
}

impl DistanceMatrix {
    pub fn new(ids: Vec<String>, values: Matrix) -> Result<Self> {
        if !values.is_square() || values.nrows != ids.len() {
            return Err(Error::Shape(format!(
                "{} ids for a {}x{} matrix",
                ids.len(),
                values.nrows,
                values.ncols
            )));
        }
        let n = ids.len();
        for i in 0..n {
            if values.get(i, i) != 0.0 {
                return Err(Error::invalid(format!("non-zero diagonal at {i}")));
            }
            for j in 0..n {
                let v = values.get(i, j);
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::invalid(format!("invalid distance {v} at ({i},{j})")));
                }
                if v != values.get(j, i) {
                    return Err(Error::invalid(format!("asymmetric entry at ({i},{j})")));
                }
            }
        }
        Ok(DistanceMatrix { ids, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    /// Nearest other item to `i`, ties broken by position.
    pub fn nearest(&self, i: usize) -> Option<usize> {
        (0..self.len())
            .filter(|&j| j != i)
            .min_by(|&a, &b| self.get(i, a).total_cmp(&self.get(i, b)).then(a.cmp(&b)))
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn pairwise_euclidean(m: &EncodedMatrix) -> Result<DistanceMatrix> {
    let n = m.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 rows for distances, got {n}")));
    }
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = euclidean(m.row(i), m.row(j));
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    DistanceMatrix::new(m.ids.clone(), d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum LinkageMethod {
    Single,
    Complete,
    #[default]
    Average,
}

impl LinkageMethod {
    pub const ALL: [LinkageMethod; 3] = [
        LinkageMethod::Single,
        LinkageMethod::Complete,
        LinkageMethod::Average,
    ];
}

impl fmt::Display for LinkageMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkageMethod::Single => "single",
            LinkageMethod::Complete => "complete",
            LinkageMethod::Average => "average",
        })
    }
}

impl FromStr for LinkageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(LinkageMethod::Single),
            "complete" => Ok(LinkageMethod::Complete),
            "average" => Ok(LinkageMethod::Average),
            other => Err(Error::invalid(format!("unknown linkage `{other}`"))),
        }
    }
}

/// One agglomeration step. Leaves are nodes `0..n`; the k-th merge creates
/// node `n + k`. `left < right` always.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkageTree {
    pub leaf_ids: Vec<String>,
    pub merges: Vec<Merge>,
    pub method: LinkageMethod,
}

impl LinkageTree {
    pub fn n_leaves(&self) -> usize {
        self.leaf_ids.len()
    }

    pub fn max_height(&self) -> f64 {
        self.merges.iter().map(|m| m.height).fold(0.0, f64::max)
    }

    /// Leaves in dendrogram drawing order (left subtree first).
    pub fn leaf_order(&self) -> Vec<usize> {
        let n = self.n_leaves();
        if self.merges.is_empty() {
            return (0..n).collect();
        }
        let mut out = Vec::with_capacity(n);
        let mut stack = vec![n + self.merges.len() - 1];
        while let Some(node) = stack.pop() {
            if node < n {
                out.push(node);
            } else {
                let m = &self.merges[node - n];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
        out
    }

    /// One merge per line: `left,right,height,count`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# left,right,height,count\n");
        for (i, id) in self.leaf_ids.iter().enumerate() {
            s.push_str(&format!("# leaf {i} = {id}\n"));
        }
        for m in &self.merges {
            s.push_str(&format!("{},{},{},{}\n", m.left, m.right, m.height, m.count));
        }
        s
    }
}

/// Agglomerative clustering over a distance matrix. Among equal-distance
/// candidate pairs the pair with the smallest `(i, j)` node ids merges first.
pub fn linkage(d: &DistanceMatrix, method: LinkageMethod) -> Result<LinkageTree> {
    let n = d.len();
    if n < 2 {
        return Err(Error::invalid(format!("linkage needs at least 2 items, got {n}")));
    }
    // Slot s holds one active cluster; `link[s][t]` is the running min, max or
    // sum of cross-pair distances between the clusters in slots s and t.
    let mut link: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| d.get(i, j)).collect()).collect();
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut size: Vec<usize> = vec![1; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut merges = Vec::with_capacity(n - 1);

    let dist = |link: &Vec<Vec<f64>>, size: &Vec<usize>, s: usize, t: usize| -> f64 {
        match method {
            LinkageMethod::Average => link[s][t] / (size[s] * size[t]) as f64,
            _ => link[s][t],
        }
    };

    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for s in (0..n).filter(|&s| active[s]) {
            for t in (s + 1..n).filter(|&t| active[t]) {
                let h = dist(&link, &size, s, t);
                let (a, b) = (node_of[s].min(node_of[t]), node_of[s].max(node_of[t]));
                let better = match best {
                    None => true,
                    Some((bh, ba, bb, _, _)) => h < bh || (h == bh && (a, b) < (ba, bb)),
                };
                if better {
                    best = Some((h, a, b, s, t));
                }
            }
        }
        let (height, left, right, s, t) = best.expect("at least two active clusters");
        for u in (0..n).filter(|&u| active[u] && u != s && u != t) {
            let v = match method {
                LinkageMethod::Single => link[s][u].min(link[t][u]),
                LinkageMethod::Complete => link[s][u].max(link[t][u]),
                LinkageMethod::Average => link[s][u] + link[t][u],
            };
            link[s][u] = v;
            link[u][s] = v;
        }
        active[t] = false;
        size[s] += size[t];
        node_of[s] = n + step;
        merges.push(Merge {
            left,
            right,
            height,
            count: size[s],
        });
    }
    Ok(LinkageTree {
        leaf_ids: d.ids().to_vec(),
        merges,
        method,
    })
}

/// Flat cluster labels, dense from 0 in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl ClusterAssignment {
    pub fn from_labels(ids: Vec<String>, raw: &[usize]) -> Self {
        let mut remap: Vec<(usize, usize)> = Vec::new();
        let labels = raw
            .iter()
            .map(|r| match remap.iter().find(|(k, _)| k == r) {
                Some((_, v)) => *v,
                None => {
                    let v = remap.len();
                    remap.push((*r, v));
                    v
                }
            })
            .collect();
        ClusterAssignment { ids, labels }
    }

    pub fn n_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn label_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id).map(|i| self.labels[i])
    }

    /// Member ids per cluster label.
    pub fn groups(&self) -> Vec<Vec<String>> {
        let mut g = vec![Vec::new(); self.n_clusters()];
        for (id, &l) in self.ids.iter().zip(&self.labels) {
            g[l].push(id.clone());
        }
        g
    }

    pub fn same_cluster(&self, a: &str, b: &str) -> bool {
        matches!((self.label_of(a), self.label_of(b)), (Some(x), Some(y)) if x == y)
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Flat clusters formed by every merge strictly below
/// `fraction * max_height`.
pub fn cut_at_fraction(t: &LinkageTree, fraction: f64) -> Result<ClusterAssignment> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("cut fraction {fraction} outside (0, 1]")));
    }
    cut_at_height(t, fraction * t.max_height())
}

pub fn cut_at_height(t: &LinkageTree, threshold: f64) -> Result<ClusterAssignment> {
    let n = t.n_leaves();
    let mut parent: Vec<usize> = (0..n).collect();
    // representative leaf of every node
    let mut rep: Vec<usize> = (0..n).collect();
    for m in &t.merges {
        let (a, b) = (rep[m.left], rep[m.right]);
        if m.height < threshold {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        rep.push(a);
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    Ok(ClusterAssignment::from_labels(t.leaf_ids.clone(), &roots))
}

/// Averages each entry with its transpose; the diagonal is set to 0.
pub fn symmetrize(ids: &[String], e: &Matrix) -> Result<DistanceMatrix> {
    if !e.is_square() {
        return Err(Error::Shape(format!(
            "symmetrize needs a square matrix, got {}x{}",
            e.nrows, e.ncols
        )));
    }
    let n = e.nrows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (e.get(i, j) + e.get(j, i)) / 2.0;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    DistanceMatrix::new(ids.to_vec(), out)
}

/// Whole-matrix min-max scaling to [0, 1]; a constant matrix maps to zeros.
pub fn minmax_scale_matrix(e: &Matrix) -> Result<Matrix> {
    if e.data.is_empty() {
        return Err(Error::invalid("cannot scale an empty matrix"));
    }
    let lo = e.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = e.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = e
        .data
        .iter()
        .map(|v| if range == 0.0 { 0.0 } else { (v - lo) / range })
        .collect();
    Ok(Matrix {
        nrows: e.nrows,
        ncols: e.ncols,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encoded(rows: &[Vec<f64>]) -> EncodedMatrix {
        EncodedMatrix {
            ids: (0..rows.len()).map(|i| i.to_string()).collect(),
            columns: (0..rows[0].len()).map(|j| format!("c{j}")).collect(),
            values: rows.concat(),
            scaled: false,
            pipeline: "test".into(),
        }
    }

    fn line(points: &[f64]) -> DistanceMatrix {
        pairwise_euclidean(&encoded(&points.iter().map(|p| vec![*p]).collect::<Vec<_>>())).unwrap()
    }

    fn tree_with_heights(heights: &[f64]) -> LinkageTree {
        // chain: (0,1) then (node, 2) then (node, 3) ...
        let n = heights.len() + 1;
        let mut merges = vec![Merge {
            left: 0,
            right: 1,
            height: heights[0],
            count: 2,
        }];
        for (k, &h) in heights.iter().enumerate().skip(1) {
            merges.push(Merge {
                left: k + 1,
                right: n + k - 1,
                height: h,
                count: k + 2,
            });
        }
        LinkageTree {
            leaf_ids: (0..n).map(|i| i.to_string()).collect(),
            merges,
            method: LinkageMethod::Average,
        }
    }

    #[test]
    fn euclidean_examples() {
        let d = pairwise_euclidean(&encoded(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 0.0]])).unwrap();
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(0, 2), 0.0);
        assert_eq!(d.get(1, 0), d.get(0, 1));
        assert!(pairwise_euclidean(&encoded(&[vec![1.0]])).is_err());
    }

    #[test]
    fn average_linkage_on_a_line() {
        let t = linkage(&line(&[0.0, 1.0, 10.0]), LinkageMethod::Average).unwrap();
        assert_eq!((t.merges[0].left, t.merges[0].right, t.merges[0].height), (0, 1, 1.0));
        assert_eq!(t.merges[1].height, 9.5);
        assert_eq!((t.merges[1].left, t.merges[1].right, t.merges[1].count), (2, 3, 3));
    }

    #[test]
    fn single_and_complete_on_a_line() {
        let s = linkage(&line(&[0.0, 1.0, 10.0]), LinkageMethod::Single).unwrap();
        assert_eq!(s.merges[1].height, 9.0);
        let c = linkage(&line(&[0.0, 1.0, 10.0]), LinkageMethod::Complete).unwrap();
        assert_eq!(c.merges[1].height, 10.0);
    }

    #[test]
    fn identical_points_merge_at_zero() {
        let t = linkage(&line(&[2.0, 2.0]), LinkageMethod::Average).unwrap();
        assert_eq!(t.merges.len(), 1);
        assert_eq!(t.merges[0].height, 0.0);
        assert!(linkage(&line(&[2.0, 2.0]).clone(), LinkageMethod::Single).is_ok());
    }

    #[test]
    fn ties_merge_smallest_pair_first() {
        // 0 -- 1 and 2 -- 3 both at distance 1
        let t = linkage(&line(&[0.0, 1.0, 5.0, 6.0]), LinkageMethod::Single).unwrap();
        assert_eq!((t.merges[0].left, t.merges[0].right), (0, 1));
        assert_eq!((t.merges[1].left, t.merges[1].right), (2, 3));
    }

    #[test]
    fn cut_examples() {
        let t = tree_with_heights(&[1.0, 2.0, 10.0]);
        assert_eq!(cut_at_fraction(&t, 0.7).unwrap().n_clusters(), 2);
        assert_eq!(cut_at_fraction(&t, 1.0).unwrap().n_clusters(), 2);
        let flat = tree_with_heights(&[0.0, 0.0]);
        assert_eq!(cut_at_fraction(&flat, 0.7).unwrap().n_clusters(), 3);
        assert!(cut_at_fraction(&t, 0.0).is_err());
        assert!(cut_at_fraction(&t, 1.5).is_err());
    }

    #[test]
    fn cut_labels_are_dense_in_leaf_order() {
        let t = linkage(&line(&[10.0, 0.0, 11.0, 1.0]), LinkageMethod::Average).unwrap();
        let c = cut_at_fraction(&t, 0.7).unwrap();
        assert_eq!(c.labels, vec![0, 1, 0, 1]);
        assert_eq!(c.groups(), vec![vec!["0", "2"], vec!["1", "3"]]);
    }

    #[test]
    fn symmetrize_examples() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let d = symmetrize(&ids, &Matrix::from_rows(&[vec![0.0, 2.0], vec![4.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(d.matrix().data, vec![0.0, 3.0, 3.0, 0.0]);
        let d = symmetrize(&ids, &Matrix::from_rows(&[vec![0.3, 2.0], vec![2.0, 0.3]]).unwrap()).unwrap();
        assert_eq!(d.matrix().data, vec![0.0, 2.0, 2.0, 0.0]);
        assert!(symmetrize(&ids, &Matrix::new(1, 2, vec![0.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn matrix_scaling_examples() {
        let m = minmax_scale_matrix(&Matrix::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap()).unwrap();
        assert_eq!(m.data, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        let m = minmax_scale_matrix(&Matrix::from_rows(&[vec![4.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(m.data, vec![0.0, 0.0]);
        let fixed = Matrix::from_rows(&[vec![0.0, 0.25], vec![1.0, 0.5]]).unwrap();
        assert_eq!(minmax_scale_matrix(&fixed).unwrap(), fixed);
    }

    #[test]
    fn tree_text_export() {
        let t = linkage(&line(&[0.0, 1.0, 10.0]), LinkageMethod::Average).unwrap();
        let txt = t.to_text();
        assert!(txt.contains("\n0,1,1,2\n"));
        assert!(txt.ends_with("2,3,9.5,3\n"));
        assert_eq!(t.leaf_order(), vec![2, 0, 1]);
    }

    fn arb_points() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..9).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), n))
    }

    proptest! {
        #[test]
        fn triangle_inequality(pts in arb_points()) {
            let d = pairwise_euclidean(&encoded(&pts)).unwrap();
            let n = d.len();
            for i in 0..n { for j in 0..n { for k in 0..n {
                prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-12);
            }}}
        }

        #[test]
        fn monotone_heights(pts in arb_points()) {
            let d = pairwise_euclidean(&encoded(&pts)).unwrap();
            for method in [LinkageMethod::Average, LinkageMethod::Complete, LinkageMethod::Single] {
                let t = linkage(&d, method).unwrap();
                prop_assert_eq!(t.merges.last().unwrap().count, pts.len());
                for w in t.merges.windows(2) {
                    prop_assert!(w[1].height >= w[0].height);
                }
            }
        }

        #[test]
        fn cuts_refine_with_smaller_fractions(pts in arb_points(), f1 in 0.01f64..1.0, f2 in 0.01f64..1.0) {
            let (lo, hi) = if f1 < f2 { (f1, f2) } else { (f2, f1) };
            let d = pairwise_euclidean(&encoded(&pts)).unwrap();
            let t = linkage(&d, LinkageMethod::Average).unwrap();
            let fine = cut_at_fraction(&t, lo).unwrap();
            let coarse = cut_at_fraction(&t, hi).unwrap();
            for i in 0..pts.len() { for j in 0..pts.len() {
                if fine.labels[i] == fine.labels[j] {
                    prop_assert_eq!(coarse.labels[i], coarse.labels[j]);
                }
            }}
        }
    }
}
