//! Euclidean TSP instances, tours and tour lengths.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TspError};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// Straight-line distance between two points.
#[inline]
pub fn euclidean(a: Point, b: Point) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// A set of cities in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    coords: Vec<Point>,
}

impl Instance {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Err(TspError::EmptyInstance);
        }
        if let Some(i) = coords.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(TspError::NonFiniteCoordinate { index: i });
        }
        Ok(Self { coords })
    }

    pub fn from_xy(xy: &[(f64, f64)]) -> Result<Self> {
        Self::new(xy.iter().copied().map(Point::from).collect())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> Point {
        self.coords[i]
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        euclidean(self.coords[i], self.coords[j])
    }

    /// Full `n × n` distance matrix, row-major.
    pub fn distance_matrix(&self) -> Vec<f64> {
        let n = self.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = self.dist(i, j);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        d
    }

    /// Same cities, relabeled so that new city `k` is old city `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.len())?;
        Ok(Self {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
        })
    }
}

/// A closed tour: visiting order plus its length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tour {
    pub order: Vec<usize>,
    pub length: f64,
}

impl Tour {
    /// Validates `order` against `inst` and computes its length.
    pub fn new(inst: &Instance, order: Vec<usize>) -> Result<Self> {
        let length = tour_length(inst, &order)?;
        Ok(Self { order, length })
    }

    pub(crate) fn from_valid(inst: &Instance, order: Vec<usize>) -> Self {
        debug_assert!(check_permutation(&order, inst.len()).is_ok());
        let length = length_unchecked(inst, &order);
        Self { order, length }
    }
}

pub fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(TspError::NotPermutation(format!(
            "expected {n} cities, got {}",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &c in order {
        if c >= n {
            return Err(TspError::NotPermutation(format!("city {c} out of range 0..{n}")));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(TspError::NotPermutation(format!("city {c} visited twice")));
        }
    }
    Ok(())
}

/// Closed tour length: consecutive edges plus the edge back to the start.
pub fn tour_length(inst: &Instance, order: &[usize]) -> Result<f64> {
    check_permutation(order, inst.len())?;
    Ok(length_unchecked(inst, order))
}

pub(crate) fn length_unchecked(inst: &Instance, order: &[usize]) -> f64 {
    let n = order.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = inst.dist(order[n - 1], order[0]);
    for w in order.windows(2) {
        total += inst.dist(w[0], w[1]);
    }
    total
}

/// `count` instances of `n` cities drawn uniformly from the unit square.
pub fn generate_uniform(n: usize, count: usize, seed: u64) -> Vec<Instance> {
    assert!(n >= 1, "instances need at least one city");
    let mut rng = seeded(seed);
    (0..count)
        .map(|_| {
            let coords = (0..n)
                .map(|_| Point::new(rng.gen::<f64>(), rng.gen::<f64>()))
                .collect();
            Instance { coords }
        })
        .collect()
}

/// Largest instance [`brute_force_optimal`] accepts.
pub const BRUTE_FORCE_MAX: usize = 10;

/// Exact optimum by enumerating every distinct cyclic order.
///
/// City 0 is fixed in front and only orders whose second city has a lower
/// index than the last are expanded, so each undirected tour is visited
/// once.
pub fn brute_force_optimal(inst: &Instance) -> Result<Tour> {
    let n = inst.len();
    if n > BRUTE_FORCE_MAX {
        return Err(TspError::TooLarge {
            n,
            max: BRUTE_FORCE_MAX,
        });
    }
    if n <= 3 {
        return Ok(Tour::from_valid(inst, (0..n).collect()));
    }
    let d = inst.distance_matrix();
    let mut best = (f64::INFINITY, Vec::new());
    let mut path = vec![0usize];
    let mut used = vec![false; n];
    used[0] = true;
    enumerate(&d, n, &mut path, &mut used, 0.0, &mut best);
    Ok(Tour::from_valid(inst, best.1))
}

fn enumerate(
    d: &[f64],
    n: usize,
    path: &mut Vec<usize>,
    used: &mut [bool],
    partial: f64,
    best: &mut (f64, Vec<usize>),
) {
    let last = *path.last().expect("path starts with city 0");
    if path.len() == n {
        // canonical direction only
        if path[1] < path[n - 1] {
            let total = partial + d[last * n];
            if total < best.0 {
                *best = (total, path.clone());
            }
        }
        return;
    }
    for c in 1..n {
        if used[c] {
            continue;
        }
        used[c] = true;
        path.push(c);
        enumerate(d, n, path, used, partial + d[last * n + c], best);
        path.pop();
        used[c] = false;
    }
}

/// Writes the batch text format: a `n count` header, then `count` blocks of
/// `n` lines `x y`. Every instance must have `n` cities.
pub fn write_batch<W: Write>(mut w: W, n: usize, instances: &[Instance]) -> Result<()> {
    let mut buf = String::new();
    writeln!(buf, "{n} {}", instances.len()).expect("string write");
    for inst in instances {
        if inst.len() != n {
            return Err(TspError::Format {
                line: 0,
                message: format!("instance has {} cities, header says {n}", inst.len()),
            });
        }
        for p in inst.coords() {
            writeln!(buf, "{} {}", p.x, p.y).expect("string write");
        }
    }
    w.write_all(buf.as_bytes())?;
    Ok(())
}

/// Reads the batch text format written by [`write_batch`]. Returns `n` and
/// the instances (`n` is meaningful even for an empty batch).
pub fn read_batch<R: BufRead>(r: R) -> Result<(usize, Vec<Instance>)> {
    let mut lines = r
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let bad = |line: usize, message: String| TspError::Format { line, message };

    let (hline, header) = lines
        .next()
        .ok_or_else(|| bad(1, "missing `n count` header".into()))?;
    let header = header?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [n, count] = fields.as_slice() else {
        return Err(bad(hline, format!("expected `n count`, got {header:?}")));
    };
    let n: usize = n.parse().map_err(|_| bad(hline, format!("bad city count {n:?}")))?;
    let count: usize = count
        .parse()
        .map_err(|_| bad(hline, format!("bad instance count {count:?}")))?;
    if n == 0 {
        return Err(bad(hline, "city count must be at least 1".into()));
    }

    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| bad(0, format!("instance {k} ended early")))?;
            let line = line?;
            let mut it = line.split_whitespace();
            let mut num = || -> Result<f64> {
                let tok = it
                    .next()
                    .ok_or_else(|| bad(ln, "expected two coordinates".into()))?;
                tok.parse().map_err(|_| bad(ln, format!("bad number {tok:?}")))
            };
            let (x, y) = (num()?, num()?);
            coords.push(Point::new(x, y));
        }
        out.push(Instance::new(coords)?);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(bad(ln, "trailing data after the last instance".into()));
    }
    Ok((n, out))
}
