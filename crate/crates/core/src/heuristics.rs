//! Classical construction and improvement heuristics.
//!
//! All ties are broken towards the lowest city index (or the earliest
//! position), which makes every heuristic here deterministic.

use rand::seq::SliceRandom;

use crate::error::{Result, TspError};
use crate::rng::seeded;
use crate::tsp::{check_permutation, Instance, Tour};

/// Strict improvement threshold for a 2-exchange.
pub const TWO_OPT_EPS: f64 = 1e-12;

/// Cached distances for small instances, on-the-fly for large ones.
struct Dist<'a> {
    inst: &'a Instance,
    matrix: Option<Vec<f64>>,
}

impl<'a> Dist<'a> {
    const MATRIX_LIMIT: usize = 2048;

    fn new(inst: &'a Instance) -> Self {
        let matrix = (inst.len() <= Self::MATRIX_LIMIT).then(|| inst.distance_matrix());
        Self { inst, matrix }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        match &self.matrix {
            Some(m) => m[i * self.inst.len() + j],
            None => self.inst.dist(i, j),
        }
    }
}

/// Greedy tour from `start`: always move to the closest unvisited city.
pub fn nearest_neighbor(inst: &Instance, start: usize) -> Result<Tour> {
    let n = inst.len();
    if start >= n {
        return Err(TspError::CityOutOfRange { index: start, n });
    }
    let d = Dist::new(inst);
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    order.push(cur);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for c in 0..n {
            if !visited[c] {
                let dc = d.get(cur, c);
                if dc < best_d {
                    best_d = dc;
                    best = c;
                }
            }
        }
        visited[best] = true;
        order.push(best);
        cur = best;
    }
    Ok(Tour::from_valid(inst, order))
}

/// Farthest insertion starting from a diameter pair.
///
/// Each round picks the city whose distance to the partial tour is largest
/// and inserts it where the tour grows least.
pub fn farthest_insertion(inst: &Instance) -> Tour {
    let n = inst.len();
    if n <= 2 {
        return Tour::from_valid(inst, (0..n).collect());
    }
    let d = Dist::new(inst);
    let (mut a, mut b, mut diam) = (0, 1, f64::NEG_INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            let v = d.get(i, j);
            if v > diam {
                (a, b, diam) = (i, j, v);
            }
        }
    }
    let mut tour = Vec::with_capacity(n);
    tour.extend([a, b]);
    let mut in_tour = vec![false; n];
    in_tour[a] = true;
    in_tour[b] = true;
    let mut to_tour: Vec<f64> = (0..n).map(|k| d.get(k, a).min(d.get(k, b))).collect();

    for _ in 2..n {
        let mut pick = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for k in 0..n {
            if !in_tour[k] && to_tour[k] > far {
                far = to_tour[k];
                pick = k;
            }
        }
        let len = tour.len();
        let mut pos = 0;
        let mut grow = f64::INFINITY;
        for p in 0..len {
            let (u, v) = (tour[p], tour[(p + 1) % len]);
            let g = d.get(u, pick) + d.get(pick, v) - d.get(u, v);
            if g < grow {
                grow = g;
                pos = p;
            }
        }
        tour.insert(pos + 1, pick);
        in_tour[pick] = true;
        for k in 0..n {
            if !in_tour[k] {
                to_tour[k] = to_tour[k].min(d.get(k, pick));
            }
        }
    }
    Tour::from_valid(inst, tour)
}

/// Uniformly random tour, deterministic per seed.
pub fn random_tour(inst: &Instance, seed: u64) -> Tour {
    let mut order: Vec<usize> = (0..inst.len()).collect();
    order.shuffle(&mut seeded(seed));
    Tour::from_valid(inst, order)
}

/// Change in length from replacing edges (order[i], order[i+1]) and
/// (order[j], order[j+1]) with (order[i], order[j]) and (order[i+1], order[j+1]).
#[inline]
fn exchange_delta(d: &Dist, order: &[usize], i: usize, j: usize) -> f64 {
    let n = order.len();
    let (a, b) = (order[i], order[i + 1]);
    let (c, e) = (order[j], order[(j + 1) % n]);
    d.get(a, c) + d.get(b, e) - d.get(a, b) - d.get(c, e)
}

/// Best improving 2-exchange, scanned in lexicographic `(i, j)` order.
fn best_exchange(d: &Dist, order: &[usize]) -> Option<(usize, usize, f64)> {
    let n = order.len();
    if n < 4 {
        return None;
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..n - 2 {
        // i = 0 with j = n - 1 would pick two adjacent edges
        let last = if i == 0 { n - 1 } else { n };
        for j in i + 2..last {
            let delta = exchange_delta(d, order, i, j);
            if delta < -TWO_OPT_EPS && best.is_none_or(|(_, _, bd)| delta < bd) {
                best = Some((i, j, delta));
            }
        }
    }
    best
}

/// Best-improvement 2-opt.
///
/// Every sweep scans all exchanges and applies the single best one.
/// Stops after `max_no_improve_sweeps` consecutive sweeps without a strict
/// improvement; values below 1 are treated as 1.
pub fn two_opt(inst: &Instance, start: &Tour, max_no_improve_sweeps: usize) -> Result<Tour> {
    check_permutation(&start.order, inst.len())?;
    let d = Dist::new(inst);
    let mut order = start.order.clone();
    let patience = max_no_improve_sweeps.max(1);
    let mut idle = 0;
    while idle < patience {
        match best_exchange(&d, &order) {
            Some((i, j, _)) => {
                order[i + 1..=j].reverse();
                idle = 0;
            }
            None => idle += 1,
        }
    }
    Ok(Tour::from_valid(inst, order))
}

/// True when no 2-exchange shortens `order` by more than [`TWO_OPT_EPS`].
pub fn is_two_opt_optimal(inst: &Instance, order: &[usize]) -> bool {
    best_exchange(&Dist::new(inst), order).is_none()
}

/// Construction heuristics selectable by name from the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heuristic {
    NearestNeighbor,
    FarthestInsertion,
    /// 2-opt started from a seeded random tour.
    TwoOpt,
    Random,
}

impl Heuristic {
    pub const ALL: [Heuristic; 4] = [
        Heuristic::NearestNeighbor,
        Heuristic::FarthestInsertion,
        Heuristic::TwoOpt,
        Heuristic::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::NearestNeighbor => "nearest_neighbor",
            Heuristic::FarthestInsertion => "farthest_insertion",
            Heuristic::TwoOpt => "two_opt",
            Heuristic::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.name() == name)
    }

    /// Runs the heuristic; `seed` only matters for the randomized ones.
    pub fn solve(self, inst: &Instance, seed: u64) -> Tour {
        match self {
            Heuristic::NearestNeighbor => nearest_neighbor(inst, 0).expect("city 0 exists"),
            Heuristic::FarthestInsertion => farthest_insertion(inst),
            Heuristic::TwoOpt => {
                two_opt(inst, &random_tour(inst, seed), 1).expect("random tour is valid")
            }
            Heuristic::Random => random_tour(inst, seed),
        }
    }
}
