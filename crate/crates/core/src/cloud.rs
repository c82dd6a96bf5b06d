//! Point clouds and the geometry shared by every stage: farthest point
//! sampling, centroid/scale normalization and the Chamfer distance.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// An N×3 set of finite coordinates, N ≥ 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.ncols() != 3 {
            return Err(Error::shape(format!(
                "point cloud needs 3 columns, got {}",
                points.ncols()
            )));
        }
        if points.nrows() == 0 {
            return Err(Error::invalid("point cloud is empty"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud has non-finite coordinates"));
        }
        Ok(PointCloud { points })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((points.len(), 3), flat)
            .map_err(|e| Error::shape(e.to_string()))?;
        Self::new(arr)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn centroid(&self) -> [f64; 3] {
        let m = self.points.mean_axis(Axis(0)).expect("non-empty cloud");
        [m[0], m[1], m[2]]
    }

    /// Returns a copy with rows reordered so that row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            points: self.points.select(Axis(0), perm),
        }
    }
}

#[inline]
pub(crate) fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn row3(points: &ArrayView2<'_, f64>, i: usize) -> [f64; 3] {
    [points[[i, 0]], points[[i, 1]], points[[i, 2]]]
}

/// Greedy farthest point sampling over the rows of an N×3 array.
///
/// Returns `min(k, N)` distinct row indices in selection order. Ties go to
/// the lowest index.
pub fn farthest_point_indices(
    points: ArrayView2<'_, f64>,
    k: usize,
    start_index: usize,
) -> Result<Vec<usize>> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::invalid("farthest point sampling on an empty cloud"));
    }
    if k == 0 {
        return Err(Error::invalid("farthest point sampling needs k >= 1"));
    }
    if start_index >= n {
        return Err(Error::invalid(format!(
            "start index {start_index} out of range for {n} points"
        )));
    }
    let take = k.min(n);
    let mut selected = Vec::with_capacity(take);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = start_index;
    selected.push(current);
    min_dist[current] = f64::NEG_INFINITY;
    while selected.len() < take {
        let c = row3(&points, current);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, md) in min_dist.iter_mut().enumerate() {
            if *md == f64::NEG_INFINITY {
                continue;
            }
            let d = sq_dist(c, row3(&points, i));
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        current = best;
        min_dist[current] = f64::NEG_INFINITY;
        selected.push(current);
    }
    Ok(selected)
}

/// Resamples `cloud` to exactly `k` points by farthest point sampling.
///
/// When `k` exceeds the cloud size, every point is selected once and the
/// last selected point is repeated to fill the remainder.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, start_index: usize) -> Result<PointCloud> {
    let mut idx = farthest_point_indices(cloud.view(), k, start_index)?;
    let last = *idx.last().expect("at least one index");
    idx.resize(k, last);
    Ok(cloud.permuted(&idx))
}

/// Centroid and scale of a normalization, kept so it can be undone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let c = Array1::from(self.centroid.to_vec());
        PointCloud {
            points: (&cloud.points - &c) / self.scale,
        }
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        let c = Array1::from(self.centroid.to_vec());
        PointCloud {
            points: &cloud.points * self.scale + &c,
        }
    }
}

// Below this spread a cloud counts as a single repeated point.
const DEGENERATE_SCALE: f64 = 1e-12;

/// Centers the cloud on its centroid and scales it to unit max norm.
pub fn normalize_cloud(cloud: &PointCloud) -> (PointCloud, Normalization) {
    let centroid = cloud.centroid();
    let c = Array1::from(centroid.to_vec());
    let centered = &cloud.points - &c;
    let max_norm = centered
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0_f64, f64::max);
    let scale = if max_norm > DEGENERATE_SCALE { max_norm } else { 1.0 };
    let norm = Normalization { centroid, scale };
    (
        PointCloud {
            points: centered / scale,
        },
        norm,
    )
}

fn mean_min_sq_dist(from: ArrayView2<'_, f64>, to: ArrayView2<'_, f64>, exec: Exec) -> f64 {
    let mins = exec.map(from.nrows(), |i| {
        let p = row3(&from, i);
        (0..to.nrows())
            .map(|j| sq_dist(p, row3(&to, j)))
            .fold(f64::INFINITY, f64::min)
    });
    mins.iter().sum::<f64>() / from.nrows() as f64
}

/// Symmetric squared Chamfer distance with mean reduction per direction.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_distance_with(a.view(), b.view(), Exec::default())
}

/// [`chamfer_distance`] over raw N×3 arrays with an explicit execution mode.
pub fn chamfer_distance_with(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, exec: Exec) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("chamfer distance of an empty cloud"));
    }
    if a.ncols() != 3 || b.ncols() != 3 {
        return Err(Error::shape("chamfer distance needs N×3 inputs"));
    }
    Ok(mean_min_sq_dist(a, b, exec) + mean_min_sq_dist(b, a, exec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line() -> PointCloud {
        PointCloud::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn fps_single_pick_is_start() {
        let s = farthest_point_sample(&line(), 1, 0).unwrap();
        assert_eq!(s.point(0), [0.0, 0.0, 0.0]);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn fps_second_pick_is_farthest() {
        let s = farthest_point_sample(&line(), 2, 0).unwrap();
        assert_eq!(s.point(1), [3.0, 0.0, 0.0]);
    }

    #[test]
    fn fps_full_selection_is_permutation() {
        let idx = farthest_point_indices(line().view(), 4, 0).unwrap();
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_pads_with_last_selected() {
        let s = farthest_point_sample(&line(), 6, 0).unwrap();
        assert_eq!(s.len(), 6);
        let last = s.point(3);
        assert_eq!(s.point(4), last);
        assert_eq!(s.point(5), last);
    }

    #[test]
    fn fps_ties_go_to_lowest_index() {
        // 1 and 2 are equidistant from 0.
        let c = PointCloud::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(farthest_point_indices(c.view(), 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_rejects_bad_arguments() {
        assert!(farthest_point_sample(&line(), 0, 0).is_err());
        assert!(farthest_point_sample(&line(), 2, 4).is_err());
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(farthest_point_indices(empty.view(), 1, 0).is_err());
    }

    #[test]
    fn normalize_singleton() {
        let c = PointCloud::from_points(&[[2.0, 2.0, 2.0]]).unwrap();
        let (n, t) = normalize_cloud(&c);
        assert_eq!(n.point(0), [0.0, 0.0, 0.0]);
        assert_eq!(t.centroid, [2.0, 2.0, 2.0]);
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn normalize_symmetric_pair() {
        let c = PointCloud::from_points(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let (n, t) = normalize_cloud(&c);
        assert_eq!(n, c);
        assert_eq!(t.centroid, [0.0, 0.0, 0.0]);
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn chamfer_hand_values() {
        let o = PointCloud::from_points(&[[0.0, 0.0, 0.0]]).unwrap();
        let x = PointCloud::from_points(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(chamfer_distance(&o, &x).unwrap(), 2.0);
        let two = PointCloud::from_points(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(chamfer_distance(&two, &x).unwrap(), 2.0);
        assert_eq!(chamfer_distance(&two, &two).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_rejects_empty() {
        let empty = Array2::<f64>::zeros((0, 3));
        let x = Array2::<f64>::zeros((1, 3));
        assert!(chamfer_distance_with(empty.view(), x.view(), Exec::Sequential).is_err());
    }

    #[test]
    fn cloud_rejects_nan() {
        assert!(PointCloud::from_points(&[[f64::NAN, 0.0, 0.0]]).is_err());
    }

    fn cloud_strategy(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..max)
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_permutation_invariant(a in cloud_strategy(24), b in cloud_strategy(24), seed in any::<u64>()) {
            let ca = PointCloud::from_points(&a).unwrap();
            let cb = PointCloud::from_points(&b).unwrap();
            let ab = chamfer_distance(&ca, &cb).unwrap();
            let ba = chamfer_distance(&cb, &ca).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            prop_assert_eq!(chamfer_distance(&ca, &ca).unwrap(), 0.0);
            // rotate rows by a seed-derived offset
            let off = (seed as usize) % a.len();
            let perm: Vec<usize> = (0..a.len()).map(|i| (i + off) % a.len()).collect();
            let pa = chamfer_distance(&ca.permuted(&perm), &cb).unwrap();
            prop_assert!((pa - ab).abs() <= 1e-12 * (1.0 + ab));
        }

        #[test]
        fn normalize_centers_and_scales(a in cloud_strategy(32)) {
            let c = PointCloud::from_points(&a).unwrap();
            let (n, t) = normalize_cloud(&c);
            let back = t.invert(&n);
            for (x, y) in back.points().iter().zip(c.points().iter()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
            if t.scale != 1.0 || a.len() > 1 {
                let cen = n.centroid();
                prop_assert!(cen.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
            }
            let spread = a.iter().any(|p| sq_dist(*p, a[0]) > 1e-6);
            if spread {
                let max_norm = n.points().rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
                prop_assert!((max_norm - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn fps_deterministic(a in cloud_strategy(40), k in 1usize..50) {
            let c = PointCloud::from_points(&a).unwrap();
            let s1 = farthest_point_sample(&c, k, 0).unwrap();
            let s2 = farthest_point_sample(&c, k, 0).unwrap();
            prop_assert_eq!(s1.len(), k);
            prop_assert_eq!(s1, s2);
        }
    }
}
