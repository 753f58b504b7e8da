use hpn_autograd::Tensor;

use crate::tsp::{euclidean, Instance, Point};

/// Per-city rows `(x_j - x_i, y_j - y_i, |v_j - v_i|)` relative to a
/// reference point `v_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureContext {
    pub rows: Vec<[f64; 3]>,
}

impl FeatureContext {
    fn relative_to(inst: &Instance, origin: Point) -> Self {
        let rows = inst
            .coords()
            .iter()
            .map(|&p| [p.x - origin.x, p.y - origin.y, euclidean(p, origin)])
            .collect();
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.rows.iter().flatten().copied().collect();
        Tensor::matrix(self.rows.len(), 3, data).expect("n x 3")
    }
}

/// Feature context seen from the current city.
pub fn extract_features(inst: &Instance, current: usize) -> FeatureContext {
    FeatureContext::relative_to(inst, inst.point(current))
}

/// Feature context for the first step, before any city is chosen: taken
/// relative to the centroid so it stays translation invariant.
pub fn start_features(inst: &Instance) -> FeatureContext {
    let n = inst.len() as f64;
    let (sx, sy) = inst
        .coords()
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    FeatureContext::relative_to(inst, Point::new(sx / n, sy / n))
}
