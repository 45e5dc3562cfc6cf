//! Position-space K-Means clustering of a Gaussian cloud into patches.
//!
//! Patches are the unit of graph-based refinement: each patch is summarized
//! by the mean of its members' attribute rows, and refinement increments are
//! broadcast back to all members identically. Clustering therefore has to be
//! deterministic (seeded k-means++ init, lowest-index tie breaking, serial
//! sums) and must never produce an empty patch.

use nalgebra::{DMatrix, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gs::{GaussianCloud, ATTR_DIM, COL_ROTATION};

/// Cluster labels plus the final centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchAssignment {
    /// Per-point patch id, each strictly below `centroids.len()`.
    pub labels: Vec<usize>,
    /// Final patch centers in position space.
    pub centroids: Vec<Vector3<f64>>,
}

impl PatchAssignment {
    /// Number of patches.
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Indices of the points labelled `patch_id`, in ascending order.
    pub fn members(&self, patch_id: usize) -> Result<Vec<usize>> {
        if patch_id >= self.k() {
            return Err(Error::Config(format!(
                "patch id {patch_id} out of range (have {} patches)",
                self.k()
            )));
        }
        let members: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == patch_id)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::Config(format!("patch {patch_id} has no members")));
        }
        Ok(members)
    }

    /// Verify the assignment covers exactly this cloud.
    pub fn check_cloud(&self, cloud: &GaussianCloud) -> Result<()> {
        if self.labels.len() != cloud.len() {
            return Err(Error::Config(format!(
                "assignment labels {} points but the cloud has {}",
                self.labels.len(),
                cloud.len()
            )));
        }
        Ok(())
    }
}

/// Index of the centroid nearest to `p`; exact ties resolve to the lowest
/// centroid index (comparison is strict `<` while scanning in order).
pub fn nearest_centroid(p: &Vector3<f64>, centroids: &[Vector3<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn sse(positions: &[Vector3<f64>], labels: &[usize], centroids: &[Vector3<f64>]) -> f64 {
    positions
        .iter()
        .zip(labels)
        .map(|(p, &l)| (p - centroids[l]).norm_squared())
        .sum()
}

/// Seeded k-means++ initialization.
fn init_plus_plus(positions: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let n = positions.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(positions[rng.gen_range(0..n)]);
    let mut d2: Vec<f64> = positions
        .iter()
        .map(|p| (p - centroids[0]).norm_squared())
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > r {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with an existing center; any choice works.
            rng.gen_range(0..n)
        };
        let c = positions[idx];
        for (i, p) in positions.iter().enumerate() {
            d2[i] = d2[i].min((p - c).norm_squared());
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ init; returns the assignment and the
/// SSE recorded after every iteration (assignment + centroid update). The
/// trace is non-increasing up to floating-point roundoff.
///
/// Iteration stops when a full pass changes no label, or after `max_iter`
/// passes. Empty clusters are repaired in-pass by re-seeding them onto the
/// point currently farthest from its own centroid (taken only from clusters
/// that keep at least one member), so every returned patch is non-empty.
pub fn kmeans_with_trace(
    positions: &[Vector3<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(PatchAssignment, Vec<f64>)> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::Config("cannot cluster an empty point set".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "k must be between 1 and the number of points ({n}), got {k}"
        )));
    }
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    if positions
        .iter()
        .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
    {
        return Err(Error::Numerical(
            "positions contain non-finite values".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(positions, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..max_iter {
        // Assignment.
        let mut changed = false;
        for (i, p) in positions.iter().enumerate() {
            let l = nearest_centroid(p, &centroids);
            if l != labels[i] {
                labels[i] = l;
                changed = true;
            }
        }

        // Repair empty clusters before the mean update.
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for e in 0..k {
            if counts[e] > 0 {
                continue;
            }
            let mut far_idx = None;
            let mut far_d = -1.0;
            for (i, p) in positions.iter().enumerate() {
                if counts[labels[i]] < 2 {
                    continue; // donating would just move the hole
                }
                let d = (p - centroids[labels[i]]).norm_squared();
                if d > far_d {
                    far_d = d;
                    far_idx = Some(i);
                }
            }
            let i = far_idx.expect("a donor cluster with >= 2 members always exists");
            counts[labels[i]] -= 1;
            labels[i] = e;
            counts[e] = 1;
            centroids[e] = positions[i];
            changed = true;
        }

        // Update: centroid = mean of members (serial, index order).
        let mut sums = vec![Vector3::zeros(); k];
        for (p, &l) in positions.iter().zip(&labels) {
            sums[l] += p;
        }
        for j in 0..k {
            centroids[j] = sums[j] / counts[j] as f64;
        }

        trace.push(sse(positions, &labels, &centroids));
        if !changed {
            break;
        }
    }

    Ok((PatchAssignment { labels, centroids }, trace))
}

/// [`kmeans_with_trace`] without the trace.
pub fn kmeans(
    positions: &[Vector3<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<PatchAssignment> {
    kmeans_with_trace(positions, k, seed, max_iter).map(|(a, _)| a)
}

/// Per-patch arithmetic mean of attribute rows (K x 14).
///
/// The rotation block gets quaternion-aware averaging: each member quaternion
/// is sign-aligned to the patch's first member before the mean (q and -q are
/// the same rotation), and the averaged quaternion is renormalized. If the
/// mean degenerates (norm below 1e-12) the first member's quaternion is used.
pub fn patch_means(attrs: &DMatrix<f64>, assignment: &PatchAssignment) -> Result<DMatrix<f64>> {
    if attrs.ncols() != ATTR_DIM {
        return Err(Error::Config(format!(
            "attribute matrix must have {ATTR_DIM} columns, got {}",
            attrs.ncols()
        )));
    }
    if attrs.nrows() != assignment.labels.len() {
        return Err(Error::Config(format!(
            "attribute matrix has {} rows but the assignment labels {} points",
            attrs.nrows(),
            assignment.labels.len()
        )));
    }
    let k = assignment.k();
    let mut means = DMatrix::zeros(k, ATTR_DIM);
    for patch in 0..k {
        let members = assignment.members(patch)?;
        let inv = 1.0 / members.len() as f64;
        let rot0 = COL_ROTATION.start;
        let reference = Vector4::new(
            attrs[(members[0], rot0)],
            attrs[(members[0], rot0 + 1)],
            attrs[(members[0], rot0 + 2)],
            attrs[(members[0], rot0 + 3)],
        );
        let mut quat_sum = Vector4::zeros();
        for &m in &members {
            for c in 0..ATTR_DIM {
                if !COL_ROTATION.contains(&c) {
                    means[(patch, c)] += attrs[(m, c)];
                }
            }
            let mut q = Vector4::new(
                attrs[(m, rot0)],
                attrs[(m, rot0 + 1)],
                attrs[(m, rot0 + 2)],
                attrs[(m, rot0 + 3)],
            );
            if q.dot(&reference) < 0.0 {
                q = -q;
            }
            quat_sum += q;
        }
        for c in 0..ATTR_DIM {
            if !COL_ROTATION.contains(&c) {
                means[(patch, c)] *= inv;
            }
        }
        let mean_q = quat_sum * inv;
        let q = if mean_q.norm() < 1e-12 {
            reference
        } else {
            mean_q.normalize()
        };
        for (off, c) in COL_ROTATION.enumerate() {
            means[(patch, c)] = q[off];
        }
    }
    Ok(means)
}
