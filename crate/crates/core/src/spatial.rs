//! Exact nearest-neighbor and radius queries over 3D points.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Static KD-tree. Queries return indices into the input slice and give
/// exactly the same answers as a linear scan.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    root: Option<Node>,
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = (!points.is_empty()).then(|| Self::split(points, &mut order, 0, points.len()));
        KdTree {
            points: points.to_vec(),
            order,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn split(points: &[Vec3], order: &mut [usize], start: usize, end: usize) -> Node {
        if end - start <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        let slice = &mut order[start..end];
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in slice.iter() {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[slice[mid]][axis];
        let m = start + mid;
        Node::Split {
            axis,
            value,
            left: Box::new(Self::split(points, order, start, m)),
            right: Box::new(Self::split(points, order, m, end)),
        }
    }

    /// Index and distance of the closest point; ties go to the lowest index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let root = self.root.as_ref()?;
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(root, q, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn nearest_in(&self, node: &Node, q: &Vec3, best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d = dist2(&self.points[i], q);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                if diff * diff <= best.1 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// Indices of all points with distance `≤ r`, ascending.
    pub fn within_radius(&self, q: &Vec3, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(root) = &self.root {
            self.radius_in(root, q, r * r, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_in(&self, node: &Node, q: &Vec3, r2: f64, out: &mut Vec<usize>) {
        match node {
            Node::Leaf { start, end } => {
                out.extend(self.order[*start..*end].iter().copied().filter(|&i| dist2(&self.points[i], q) <= r2));
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[*axis] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.radius_in(left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.radius_in(right, q, r2, out);
                }
            }
        }
    }
}

/// Linear-scan counterparts used as test oracles.
pub mod brute {
    use super::{dist2, Vec3};

    pub fn nearest(points: &[Vec3], q: &Vec3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, q);
            if best.is_none_or(|b| d < b.1) {
                best = Some((i, d));
            }
        }
        best.map(|(i, d)| (i, d.sqrt()))
    }

    pub fn within_radius(points: &[Vec3], q: &Vec3, r: f64) -> Vec<usize> {
        (0..points.len()).filter(|&i| dist2(&points[i], q) <= r * r).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud() -> impl Strategy<Value = Vec<Vec3>> {
        proptest::collection::vec(
            (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z)),
            0..200,
        )
    }

    #[test]
    fn empty_tree() {
        let t = KdTree::build(&[]);
        assert!(t.nearest(&Vec3::zeros()).is_none());
        assert!(t.within_radius(&Vec3::zeros(), 1.0).is_empty());
    }

    #[test]
    fn duplicates_tie_to_lowest_index() {
        let p = vec![Vec3::new(1.0, 0.0, 0.0); 20];
        assert_eq!(KdTree::build(&p).nearest(&Vec3::zeros()), Some((0, 1.0)));
    }

    proptest! {
        #[test]
        fn matches_brute_force(pts in cloud(), q in (-6.0..6.0f64, -6.0..6.0f64, -6.0..6.0f64), r in 0.0..4.0f64) {
            let q = Vec3::new(q.0, q.1, q.2);
            let t = KdTree::build(&pts);
            prop_assert_eq!(t.within_radius(&q, r), brute::within_radius(&pts, &q, r));
            prop_assert_eq!(t.nearest(&q), brute::nearest(&pts, &q));
        }
    }
}
