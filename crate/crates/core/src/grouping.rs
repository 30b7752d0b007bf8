//! Ray-based groups (Gaussians whose contribution weight at a pixel exceeds τ)
//! and the k-nearest-neighbour baseline.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::RenderOutput;

pub const DEFAULT_TAU: f64 = 1e-3;
pub const DEFAULT_K: usize = 20;

/// Members of one pixel's ray, in depth order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayGroup {
    pub row: usize,
    pub col: usize,
    pub members: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RayGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Extracts one group per sampled pixel holding the fragments with `w_i > τ`.
///
/// Pixels are visited row-major; with `stride > 1` only pixels whose row and
/// column are both multiples of `stride` are used. Pixels without a
/// qualifying fragment produce no entry.
pub fn extract_groups(out: &RenderOutput, tau: f64, stride: usize) -> Result<Vec<RayGroup>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!("tau must lie in (0, 1), got {tau}")));
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("pixel stride must be at least 1".into()));
    }
    let fragments = out
        .fragments
        .as_ref()
        .ok_or_else(|| Error::ContractViolation("extract_groups needs retained fragments".into()))?;
    let w = out.width();
    let mut groups = Vec::new();
    for row in (0..out.height()).step_by(stride) {
        for col in (0..w).step_by(stride) {
            let frags = &fragments[row * w + col];
            let (members, weights): (Vec<usize>, Vec<f64>) =
                frags.iter().filter(|f| f.weight > tau).map(|f| (f.index, f.weight)).unzip();
            if !members.is_empty() {
                groups.push(RayGroup { row, col, members, weights });
            }
        }
    }
    Ok(groups)
}

/// Number of groups per group size; size zero never appears.
pub fn group_size_histogram(groups: &[RayGroup]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for g in groups.iter().filter(|g| !g.is_empty()) {
        *hist.entry(g.len()).or_insert(0) += 1;
    }
    hist
}

/// Writes `pixel_row,pixel_col,member_index,weight` rows.
pub fn write_groups_csv<W: Write>(groups: &[RayGroup], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["pixel_row", "pixel_col", "member_index", "weight"])?;
    for g in groups {
        for (m, wt) in g.members.iter().zip(&g.weights) {
            w.write_record(&[g.row.to_string(), g.col.to_string(), m.to_string(), format!("{wt:e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Neighbour lists per Gaussian, nearest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnGroups {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

/// Exact Euclidean k nearest neighbours, ties broken by index.
pub fn knn_groups(positions: &[Vector3<f64>], k: usize) -> Result<KnnGroups> {
    if positions.len() < 2 {
        return Err(Error::InvalidInput(format!("knn needs at least 2 points, got {}", positions.len())));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let take = k.min(positions.len() - 1);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(positions.len());
    let neighbors = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            scratch.clear();
            scratch.extend(positions.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, q)| ((p - q).norm_squared(), j)));
            if take < scratch.len() {
                scratch.select_nth_unstable_by(take - 1, cmp);
            }
            let mut best = scratch[..take].to_vec();
            best.sort_by(cmp);
            best.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(KnnGroups { k, neighbors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_force_knn;
    use crate::rasterizer::{render, Fragment, RenderOptions};
    use crate::types::{Camera, Gaussian3D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fake_output(pixels: Vec<Vec<Fragment>>, width: usize, height: usize) -> RenderOutput {
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 0.8, width, height)
            .unwrap();
        let n = width * height;
        RenderOutput {
            image: crate::rasterizer::Image::filled(width, height, [0.0; 3]),
            fragments: Some(pixels),
            final_transmittance: vec![1.0; n],
            background: [0.0; 3],
            camera: cam,
            gaussians: vec![],
            projected: vec![],
        }
    }

    fn frag(index: usize, weight: f64) -> Fragment {
        Fragment { index, depth: index as f64, alpha: 0.0, density: 0.0, transmittance: 1.0, weight }
    }

    #[test]
    fn direct_threshold() {
        let out = fake_output(vec![vec![frag(0, 0.5), frag(1, 0.3), frag(2, 1e-5)]], 1, 1);
        let groups = extract_groups(&out, 1e-3, 1).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members, vec![0, 1]);
        assert_eq!(groups[0].weights, vec![0.5, 0.3]);
    }

    #[test]
    fn invalid_tau() {
        let out = fake_output(vec![vec![]], 1, 1);
        assert!(extract_groups(&out, 0.0, 1).is_err());
        assert!(extract_groups(&out, 1.0, 1).is_err());
        assert!(extract_groups(&out, 0.5, 0).is_err());
    }

    #[test]
    fn opaque_occluder_hides_far_gaussian() {
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 0.6, 9, 9).unwrap();
        let near = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.5, 1e6, Vector3::new(1.0, 0.0, 0.0));
        let far = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.5, 0.9, Vector3::new(0.0, 1.0, 0.0));
        let out = render(&[near, far], &cam, &RenderOptions::default()).unwrap();
        let frags = out.pixel_fragments(4, 4).unwrap();
        let near_alpha = frags[0].alpha;
        assert!(near_alpha > 10.0);
        // the far fragment is either never reached or carries w₂ = e^{-α₁}(1-e^{-α₂}) < τ
        if let Some(f) = frags.get(1) {
            let w2 = (-near_alpha).exp() * (1.0 - (-f.alpha).exp());
            assert!((f.weight - w2).abs() < 1e-15);
            assert!(w2 < 1e-3);
        }
        let groups = extract_groups(&out, 1e-3, 1).unwrap();
        let center = groups.iter().find(|g| g.row == 4 && g.col == 4).unwrap();
        assert_eq!(center.members, vec![0]);
    }

    #[test]
    fn histogram_examples() {
        let mk = |n: usize| RayGroup { row: 0, col: 0, members: (0..n).collect(), weights: vec![0.5; n] };
        let hist = group_size_histogram(&[mk(2), mk(2), mk(5)]);
        assert_eq!(hist, BTreeMap::from([(2, 2), (5, 1)]));
        assert!(group_size_histogram(&[]).is_empty());
        assert!(group_size_histogram(&[mk(0)]).is_empty());
    }

    #[test]
    fn csv_dump() {
        let g = RayGroup { row: 1, col: 2, members: vec![4, 7], weights: vec![0.5, 0.25] };
        let mut buf = Vec::new();
        write_groups_csv(&[g], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "pixel_row,pixel_col,member_index,weight\n1,2,4,5e-1\n1,2,7,2.5e-1\n");
    }

    #[test]
    fn knn_collinear() {
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(3.0, 0.0, 0.0)];
        let knn = knn_groups(&pts, 1).unwrap();
        assert_eq!(knn.neighbors, vec![vec![1], vec![0], vec![1]]);
        let knn = knn_groups(&pts, 20).unwrap();
        assert!(knn.neighbors.iter().all(|n| n.len() == 2));
    }

    #[test]
    fn knn_needs_two_points() {
        assert!(matches!(knn_groups(&[Vector3::zeros()], 3), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn knn_ties_by_index() {
        let pts = [Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        assert_eq!(knn_groups(&pts, 2).unwrap().neighbors[0], vec![1, 2]);
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts: Vec<_> =
            (0..200).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        assert_eq!(knn_groups(&pts, 5).unwrap().neighbors, brute_force_knn(&pts, 5));
        assert_eq!(knn_groups(&pts, DEFAULT_K).unwrap().neighbors, brute_force_knn(&pts, DEFAULT_K));
    }
}
