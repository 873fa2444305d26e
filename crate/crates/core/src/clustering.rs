//! Splits an FFN into equal-size experts by balanced k-means over neuron
//! weight vectors.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{add_bias_inplace, ffn_apply, Activation, FfnWeights};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_MAX_ITERS: usize = 50;

/// Min-cost perfect matching of `rows` to `cols` (`rows <= cols`) for a dense
/// row-major cost matrix. Returns the column matched to each row.
///
/// Shortest augmenting paths with potentials, O(rows² · cols). Rows are
/// inserted in index order and the first minimal column wins ties, so the
/// result is deterministic.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols && cost.len() == rows * cols);
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    let mut minv = vec![inf; cols + 1];
    let mut used = vec![false; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * cols..i0 * cols];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    /// Sum of squared distances to cluster means.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each Lloyd iteration, then after swap refinement.
    pub history: Vec<f64>,
    pub swaps: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cluster_sums(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points.first().map_or(0, |p| p.len());
    let mut sums = vec![vec![0.0; d]; k];
    for (p, &c) in points.iter().zip(assignment) {
        sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    sums
}

/// Within-cluster sum of squared distances to the cluster means.
pub fn kmeans_objective(points: &[Vec<f64>], assignment: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    assignment.iter().for_each(|&c| counts[c] += 1);
    let sums = cluster_sums(points, assignment, k);
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| {
            let n = counts[c] as f64;
            p.iter()
                .zip(&sums[c])
                .map(|(x, s)| (x - s / n).powi(2))
                .sum::<f64>()
        })
        .sum()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let m = points.len();
    let mut centroids = vec![points[rng.random_range(0..m)].clone()];
    let mut best: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..m)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (i, &w) in best.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        let c = points[idx].clone();
        best.iter_mut()
            .zip(points)
            .for_each(|(b, p)| *b = b.min(sq_dist(p, &c)));
        centroids.push(c);
    }
    centroids
}

/// Balanced k-means: every cluster receives exactly `rows / n_clusters` points.
///
/// Each iteration solves the balanced assignment exactly (Hungarian over
/// points × slots, `expert_size` slots per centroid), then recomputes means.
/// A final pass applies improving cross-cluster swaps until none remains, so
/// the result is swap-locally optimal.
pub fn balanced_kmeans<T: Real>(
    points: &Tensor<T>,
    n_clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult> {
    let (m, d) = points.dims2().ok_or_else(|| {
        Error::input(format!("points must be a matrix, got {:?}", points.shape()))
    })?;
    if n_clusters == 0 {
        return Err(Error::input("n_clusters must be >= 1"));
    }
    if n_clusters > m {
        return Err(Error::input(format!(
            "n_clusters {n_clusters} exceeds point count {m}"
        )));
    }
    if m % n_clusters != 0 {
        return Err(Error::input(format!(
            "{m} points not divisible into {n_clusters} clusters"
        )));
    }
    let pts: Vec<Vec<f64>> = (0..m)
        .map(|r| points.row(r).iter().map(|v| v.to_f64().unwrap()).collect())
        .collect();
    let size = m / n_clusters;
    if n_clusters == 1 {
        let obj = kmeans_objective(&pts, &vec![0; m], 1);
        return Ok(KMeansResult {
            assignment: vec![0; m],
            objective: obj,
            iterations: 0,
            history: vec![obj],
            swaps: 0,
        });
    }
    let mut rng = rng::stream(seed, "balanced-kmeans");
    let mut centroids = kmeans_pp(&pts, n_clusters, &mut rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut cost = vec![0.0; m * m];
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        for (i, p) in pts.iter().enumerate() {
            for (c, cen) in centroids.iter().enumerate() {
                let dist = sq_dist(p, cen);
                cost[i * m + c * size..i * m + (c + 1) * size]
                    .iter_mut()
                    .for_each(|x| *x = dist);
            }
        }
        let slots = hungarian(&cost, m, m);
        let next: Vec<usize> = slots.iter().map(|&s| s / size).collect();
        let stable = next == assignment;
        assignment = next;
        let sums = cluster_sums(&pts, &assignment, n_clusters);
        centroids = sums
            .into_iter()
            .map(|s| s.into_iter().map(|v| v / size as f64).collect())
            .collect();
        history.push(kmeans_objective(&pts, &assignment, n_clusters));
        if stable {
            break;
        }
    }
    let swaps = swap_refine(&pts, &mut assignment, n_clusters, d);
    let objective = kmeans_objective(&pts, &assignment, n_clusters);
    history.push(objective);
    Ok(KMeansResult {
        assignment,
        objective,
        iterations,
        history,
        swaps,
    })
}

/// Swapping x ∈ A with y ∈ B lowers the objective iff
/// `(S_A − S_B)·(y − x) + |y − x|² > 0`, with `S` the cluster sums.
fn swap_refine(pts: &[Vec<f64>], assignment: &mut [usize], k: usize, d: usize) -> usize {
    let m = pts.len();
    let mut sums = cluster_sums(pts, assignment, k);
    let scale: f64 = pts
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .max(1e-300);
    let tol = 1e-12 * scale;
    let mut swaps = 0;
    let mut delta = vec![0.0; d];
    let cap = 64 * m * m;
    loop {
        let mut improved = false;
        for i in 0..m {
            for j in (i + 1)..m {
                let (a, b) = (assignment[i], assignment[j]);
                if a == b {
                    continue;
                }
                let mut gain = 0.0;
                for t in 0..d {
                    delta[t] = pts[j][t] - pts[i][t];
                    gain += (sums[a][t] - sums[b][t]) * delta[t] + delta[t] * delta[t];
                }
                if gain > tol {
                    for t in 0..d {
                        sums[a][t] += delta[t];
                        sums[b][t] -= delta[t];
                    }
                    assignment.swap(i, j);
                    swaps += 1;
                    improved = true;
                }
            }
        }
        if !improved || swaps >= cap {
            return swaps;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPartition {
    pub n_experts: usize,
    pub expert_size: usize,
    /// Neuron index to expert id.
    pub assignment: Vec<usize>,
}

impl ExpertPartition {
    pub fn new(n_experts: usize, assignment: Vec<usize>) -> Result<Self> {
        if n_experts == 0 || assignment.len() % n_experts != 0 {
            return Err(Error::input(format!(
                "{} neurons cannot form {n_experts} equal experts",
                assignment.len()
            )));
        }
        let expert_size = assignment.len() / n_experts;
        let mut counts = vec![0usize; n_experts];
        for &a in &assignment {
            if a >= n_experts {
                return Err(Error::input(format!("expert id {a} out of range")));
            }
            counts[a] += 1;
        }
        if counts.iter().any(|&c| c != expert_size) {
            return Err(Error::input(format!(
                "unbalanced partition: sizes {counts:?}"
            )));
        }
        Ok(ExpertPartition {
            n_experts,
            expert_size,
            assignment,
        })
    }

    /// Ascending neuron indices of each expert.
    pub fn experts(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::with_capacity(self.expert_size); self.n_experts];
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights {
    /// `[d_m, s]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[s, d_m]`
    pub w2: Tensor,
    /// `[d_m, s]`, gated kind only.
    pub wg: Option<Tensor>,
}

impl ExpertWeights {
    pub fn size(&self) -> usize {
        self.b1.numel()
    }

    /// Expert contribution, b2 excluded.
    pub fn forward(&self, act: Activation, z: &Tensor) -> Result<Tensor> {
        ffn_apply(&self.w1, &self.b1, &self.w2, self.wg.as_ref(), act, z)
    }

    fn forward_f64(&self, act: Activation, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let wg = self.wg.as_ref().map(|t| t.cast::<f64>());
        ffn_apply(
            &self.w1.cast(),
            &self.b1.cast(),
            &self.w2.cast(),
            wg.as_ref(),
            act,
            z,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSlices {
    pub experts: Vec<ExpertWeights>,
    /// Shared output bias, added once after the expert sum.
    pub b2: Tensor,
    /// [`FfnWeights::fingerprint`] of the FFN the slices came from.
    pub source: u64,
}

impl ExpertSlices {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn is_gated(&self) -> bool {
        self.experts.first().is_some_and(|e| e.wg.is_some())
    }

    pub fn d_model(&self) -> usize {
        self.b2.numel()
    }

    /// Reassemble dense weights in expert-major neuron order.
    pub fn concat(&self) -> FfnWeights {
        let cat_cols = |f: &dyn Fn(&ExpertWeights) -> &Tensor| {
            let d = f(&self.experts[0]).rows();
            let total: usize = self.experts.iter().map(|e| f(e).cols()).sum();
            let mut out = Tensor::zeros(&[d, total]);
            let mut off = 0;
            for e in &self.experts {
                let t = f(e);
                for r in 0..d {
                    out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                }
                off += t.cols();
            }
            out
        };
        let w1 = cat_cols(&|e| &e.w1);
        let wg = self
            .is_gated()
            .then(|| cat_cols(&|e| e.wg.as_ref().unwrap()));
        let b1 = Tensor::from_vec(
            self.experts
                .iter()
                .flat_map(|e| e.b1.data().to_vec())
                .collect(),
        );
        let d = self.d_model();
        let w2_data: Vec<f32> = self
            .experts
            .iter()
            .flat_map(|e| e.w2.data().to_vec())
            .collect();
        let w2 = Tensor::new(vec![w2_data.len() / d, d], w2_data).expect("consistent slices");
        FfnWeights {
            w1,
            b1,
            w2,
            b2: self.b2.clone(),
            wg,
        }
    }

    /// Split expert-major concatenated weights back into `n` experts.
    pub fn from_concat(ffn: &FfnWeights, n: usize, source: u64) -> Result<Self> {
        let hidden = ffn.hidden();
        if n == 0 || hidden % n != 0 {
            return Err(Error::format(
                0,
                format!("hidden width {hidden} not divisible by {n} experts"),
            ));
        }
        let s = hidden / n;
        let experts = (0..n)
            .map(|i| {
                let idx: Vec<usize> = (i * s..(i + 1) * s).collect();
                Ok(ExpertWeights {
                    w1: ffn.w1.select_cols(&idx)?,
                    b1: ffn.b1.select(&idx)?,
                    w2: ffn.w2.select_rows(&idx)?,
                    wg: ffn.wg.as_ref().map(|w| w.select_cols(&idx)).transpose()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ExpertSlices {
            experts,
            b2: ffn.b2.clone(),
            source,
        })
    }
}

/// Slice `ffn` according to `partition`.
pub fn slice_ffn(ffn: &FfnWeights, partition: &ExpertPartition) -> Result<ExpertSlices> {
    if partition.assignment.len() != ffn.hidden() {
        return Err(Error::contract(format!(
            "partition covers {} neurons, FFN has {}",
            partition.assignment.len(),
            ffn.hidden()
        )));
    }
    let experts = partition
        .experts()
        .iter()
        .map(|idx| {
            Ok(ExpertWeights {
                w1: ffn.w1.select_cols(idx)?,
                b1: ffn.b1.select(idx)?,
                w2: ffn.w2.select_rows(idx)?,
                wg: ffn.wg.as_ref().map(|w| w.select_cols(idx)).transpose()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ExpertSlices {
        experts,
        b2: ffn.b2.clone(),
        source: ffn.fingerprint(),
    })
}

/// Neuron feature vectors: columns of W1, or of Wg for the gated kind.
pub fn neuron_features(ffn: &FfnWeights) -> Result<Tensor> {
    ffn.wg.as_ref().unwrap_or(&ffn.w1).transpose()
}

pub fn split_ffn(
    ffn: &FfnWeights,
    n_experts: usize,
    seed: u64,
) -> Result<(ExpertPartition, ExpertSlices)> {
    split_ffn_with(ffn, n_experts, seed, DEFAULT_MAX_ITERS)
}

pub fn split_ffn_with(
    ffn: &FfnWeights,
    n_experts: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(ExpertPartition, ExpertSlices)> {
    let feats = neuron_features(ffn)?;
    let km = balanced_kmeans(&feats, n_experts, seed, max_iters)?;
    let partition = ExpertPartition::new(n_experts, km.assignment)?;
    let slices = slice_ffn(ffn, &partition)?;
    Ok((partition, slices))
}

fn check_source(ffn: &FfnWeights, slices: &ExpertSlices) -> Result<()> {
    if ffn.fingerprint() != slices.source {
        return Err(Error::contract(
            "expert slices were not derived from this FFN",
        ));
    }
    Ok(())
}

/// `b2 + Σ_i expert_i(z)`, experts summed in index order.
pub fn all_experts_forward(slices: &ExpertSlices, act: Activation, z: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[z.rows(), slices.d_model()]);
    add_bias_inplace(&mut out, &slices.b2);
    for e in &slices.experts {
        let y = e.forward(act, z)?;
        out.data_mut()
            .iter_mut()
            .zip(y.data())
            .for_each(|(o, &v)| *o += v);
    }
    Ok(out)
}

/// `max |dense_ffn(z) − (b2 + Σ_i expert_i(z))|` in 32-bit.
pub fn reconstruct_check(
    ffn: &FfnWeights,
    act: Activation,
    slices: &ExpertSlices,
    z: &Tensor,
) -> Result<f32> {
    check_source(ffn, slices)?;
    let dense = ffn.forward(act, z)?;
    let moe = all_experts_forward(slices, act, z)?;
    Ok(dense.max_abs_diff(&moe))
}

/// The same check evaluated in 64-bit arithmetic.
pub fn reconstruct_check_f64(
    ffn: &FfnWeights,
    act: Activation,
    slices: &ExpertSlices,
    z: &Tensor,
) -> Result<f64> {
    check_source(ffn, slices)?;
    let z = z.cast::<f64>();
    let b2 = ffn.b2.cast::<f64>();
    let wg = ffn.wg.as_ref().map(|t| t.cast::<f64>());
    let mut dense = ffn_apply(
        &ffn.w1.cast(),
        &ffn.b1.cast(),
        &ffn.w2.cast(),
        wg.as_ref(),
        act,
        &z,
    )?;
    add_bias_inplace(&mut dense, &b2);
    let mut moe = Tensor::<f64>::zeros(&[z.rows(), b2.numel()]);
    add_bias_inplace(&mut moe, &b2);
    for e in &slices.experts {
        let y = e.forward_f64(act, &z)?;
        moe.data_mut()
            .iter_mut()
            .zip(y.data())
            .for_each(|(o, &v)| *o += v);
    }
    Ok(dense.max_abs_diff(&moe))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_small() {
        // Optimal: row0->col1, row1->col0, row2->col2, total 1+2+2 = 5.
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let m = hungarian(&cost, 3, 3);
        let total: f64 = m.iter().enumerate().map(|(r, &c)| cost[r * 3 + c]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn single_cluster_takes_everything() {
        let pts = Tensor::<f64>::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(
            balanced_kmeans(&pts, 1, 0, 10).unwrap().assignment,
            vec![0, 0, 0]
        );
    }

    #[test]
    fn input_errors() {
        let pts = Tensor::<f64>::zeros(&[5, 2]);
        assert!(matches!(
            balanced_kmeans(&pts, 2, 0, 10),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            balanced_kmeans(&pts, 6, 0, 10),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn partition_rejects_unbalanced() {
        assert!(ExpertPartition::new(2, vec![0, 0, 0, 1]).is_err());
        assert_eq!(
            ExpertPartition::new(2, vec![1, 0, 0, 1]).unwrap().experts(),
            vec![vec![1, 2], vec![0, 3]]
        );
    }
}
