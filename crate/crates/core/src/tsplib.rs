//! TSPLIB `NODE_COORD_SECTION` instances and unit-square normalization.
//!
//! Recognized header keywords are `NAME`, `DIMENSION`, `EDGE_WEIGHT_TYPE`
//! (plus `TYPE`, `COMMENT` and anything else, which are ignored). A keyword
//! may be followed by `:` or by whitespace only. Node lines are
//! `index x y` with 1-based indices in any order. Parsing ends at `EOF` or
//! at the end of the stream.
//!
//! Only one scale factor is used for both axes, so normalization is a
//! similarity transform: tour lengths scale uniformly and the optimal tour
//! of the normalized instance is optimal for the raw one.

use std::io::BufRead;

use thiserror::Error;

use crate::tsp::{Instance, Point};

#[derive(Debug, Error)]
pub enum TsplibError {
    #[error("missing {0} keyword")]
    MissingKeyword(&'static str),
    #[error("line {line}: could not parse {what} from {token:?}")]
    BadNumber {
        line: usize,
        what: &'static str,
        token: String,
    },
    #[error("line {line}: expected `index x y`")]
    MalformedNode { line: usize },
    #[error("line {line}: node index {index} outside 1..={dimension}")]
    IndexOutOfRange {
        line: usize,
        index: usize,
        dimension: usize,
    },
    #[error("line {line}: node {index} listed twice")]
    DuplicateNode { line: usize, index: usize },
    #[error("line {line}: DIMENSION is {expected} but {found} coordinates were read")]
    CountMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: name {name:?} implies {implied} cities but DIMENSION is {dimension}")]
    NameDimensionMismatch {
        line: usize,
        name: String,
        implied: usize,
        dimension: usize,
    },
    #[error("line {line}: coordinate is not finite")]
    NonFinite { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeWeightType {
    Euc2d,
    Ceil2d,
    Geo,
    Other(String),
}

impl EdgeWeightType {
    fn parse(s: &str) -> Self {
        match s {
            "EUC_2D" => Self::Euc2d,
            "CEIL_2D" => Self::Ceil2d,
            "GEO" => Self::Geo,
            other => Self::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsplibInstance {
    pub name: String,
    pub dimension: usize,
    pub edge_weight_type: EdgeWeightType,
    pub raw_coords: Vec<Point>,
}

/// City count encoded in a conventional name such as `rd400` or `kroA100`:
/// letters followed by a decimal suffix.
pub fn name_suffix_dimension(name: &str) -> Option<usize> {
    let digits_at = name.find(|c: char| c.is_ascii_digit())?;
    let (head, tail) = name.split_at(digits_at);
    let conventional = !head.is_empty()
        && head.chars().all(|c| c.is_ascii_alphabetic())
        && tail.chars().all(|c| c.is_ascii_digit());
    conventional.then(|| tail.parse().ok()).flatten()
}

/// Splits `KEY : value`, `KEY: value` or `KEY value`.
fn split_keyword(line: &str) -> (&str, &str) {
    let (key, rest) = match line.find(|c: char| c == ':' || c.is_whitespace()) {
        Some(i) => (&line[..i], &line[i..]),
        None => (line, ""),
    };
    let rest = rest.trim_start();
    let rest = rest.strip_prefix(':').unwrap_or(rest);
    (key.trim(), rest.trim())
}

pub fn parse_tsplib<R: BufRead>(reader: R) -> Result<TsplibInstance, TsplibError> {
    let mut name = String::new();
    let mut name_line = 0;
    let mut dimension: Option<usize> = None;
    let mut edge_weight_type: Option<EdgeWeightType> = None;
    let mut in_coords = false;
    let mut saw_section = false;
    let mut nodes: Vec<Option<Point>> = Vec::new();
    let mut found = 0usize;
    let mut last_line = 0;

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        last_line = lineno;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed == "EOF" {
            break;
        }
        if in_coords {
            let first = trimmed.chars().next().unwrap_or(' ');
            if !(first.is_ascii_digit() || first == '-' || first == '+' || first == '.') {
                // another section starts; coordinates are done
                in_coords = false;
            } else {
                let dim = dimension.expect("checked when the section opened");
                let mut it = trimmed.split_whitespace();
                let (Some(idx), Some(x), Some(y)) = (it.next(), it.next(), it.next()) else {
                    return Err(TsplibError::MalformedNode { line: lineno });
                };
                let num = |what, tok: &str| {
                    tok.parse::<f64>().map_err(|_| TsplibError::BadNumber {
                        line: lineno,
                        what,
                        token: tok.to_string(),
                    })
                };
                let index = idx.parse::<usize>().map_err(|_| TsplibError::BadNumber {
                    line: lineno,
                    what: "node index",
                    token: idx.to_string(),
                })?;
                let (x, y) = (num("x coordinate", x)?, num("y coordinate", y)?);
                if !x.is_finite() || !y.is_finite() {
                    return Err(TsplibError::NonFinite { line: lineno });
                }
                if index == 0 || index > dim {
                    if found >= dim {
                        return Err(TsplibError::CountMismatch {
                            line: lineno,
                            expected: dim,
                            found: found + 1,
                        });
                    }
                    return Err(TsplibError::IndexOutOfRange {
                        line: lineno,
                        index,
                        dimension: dim,
                    });
                }
                if nodes[index - 1].replace(Point::new(x, y)).is_some() {
                    return Err(TsplibError::DuplicateNode { line: lineno, index });
                }
                found += 1;
                continue;
            }
        }
        let (key, value) = split_keyword(trimmed);
        match key {
            "NAME" => {
                name = value.to_string();
                name_line = lineno;
            }
            "DIMENSION" => {
                let d = value.parse::<usize>().map_err(|_| TsplibError::BadNumber {
                    line: lineno,
                    what: "DIMENSION",
                    token: value.to_string(),
                })?;
                dimension = Some(d);
            }
            "EDGE_WEIGHT_TYPE" => edge_weight_type = Some(EdgeWeightType::parse(value)),
            "NODE_COORD_SECTION" => {
                let dim = dimension.ok_or(TsplibError::MissingKeyword("DIMENSION"))?;
                nodes = vec![None; dim];
                in_coords = true;
                saw_section = true;
            }
            _ => {}
        }
    }

    let dimension = dimension.ok_or(TsplibError::MissingKeyword("DIMENSION"))?;
    let edge_weight_type = edge_weight_type.ok_or(TsplibError::MissingKeyword("EDGE_WEIGHT_TYPE"))?;
    if !saw_section {
        return Err(TsplibError::MissingKeyword("NODE_COORD_SECTION"));
    }
    if found != dimension {
        return Err(TsplibError::CountMismatch {
            line: last_line,
            expected: dimension,
            found,
        });
    }
    if let Some(implied) = name_suffix_dimension(&name) {
        if implied != dimension {
            return Err(TsplibError::NameDimensionMismatch {
                line: name_line,
                name,
                implied,
                dimension,
            });
        }
    }
    let raw_coords = nodes.into_iter().map(|p| p.expect("all nodes counted")).collect();
    Ok(TsplibInstance {
        name,
        dimension,
        edge_weight_type,
        raw_coords,
    })
}

/// Unit-square instance with the affine map back to raw coordinates:
/// `raw = normalized * scale + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedInstance {
    pub instance: Instance,
    pub scale: f64,
    pub offset: Point,
}

impl NormalizedInstance {
    pub fn denormalize_point(&self, p: Point) -> Point {
        Point::new(p.x * self.scale + self.offset.x, p.y * self.scale + self.offset.y)
    }

    pub fn denormalized_coords(&self) -> Vec<Point> {
        self.instance
            .coords()
            .iter()
            .map(|&p| self.denormalize_point(p))
            .collect()
    }

    /// A normalized tour length in raw units. Lengths are Euclidean on the
    /// raw coordinates (no GEO great-circle conversion).
    pub fn denormalize_length(&self, normalized_length: f64) -> f64 {
        normalized_length * self.scale
    }
}

/// Shifts the minimum corner to the origin and divides by the larger of the
/// two coordinate ranges (1 when every city coincides).
pub fn normalize(raw: &TsplibInstance) -> NormalizedInstance {
    normalize_points(&raw.raw_coords)
}

pub fn normalize_points(points: &[Point]) -> NormalizedInstance {
    assert!(!points.is_empty(), "cannot normalize an empty instance");
    let fold = |f: fn(f64, f64) -> f64, init: f64, get: fn(&Point) -> f64| {
        points.iter().map(get).fold(init, f)
    };
    let (min_x, max_x) = (fold(f64::min, f64::INFINITY, |p| p.x), fold(f64::max, f64::NEG_INFINITY, |p| p.x));
    let (min_y, max_y) = (fold(f64::min, f64::INFINITY, |p| p.y), fold(f64::max, f64::NEG_INFINITY, |p| p.y));
    let range = (max_x - min_x).max(max_y - min_y);
    let scale = if range > 0.0 { range } else { 1.0 };
    let coords = points
        .iter()
        .map(|p| Point::new(((p.x - min_x) / scale).clamp(0.0, 1.0), ((p.y - min_y) / scale).clamp(0.0, 1.0)))
        .collect();
    NormalizedInstance {
        instance: Instance::new(coords).expect("finite, nonempty"),
        scale,
        offset: Point::new(min_x, min_y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsp::tour_length;

    const TRIANGLE: &str = "NAME : tri3\nTYPE : TSP\nCOMMENT : crafted\nDIMENSION : 3\n\
                            EDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n\
                            2 3 0\n1 0 0\n3 0 4\nEOF\n";

    #[test]
    fn parses_crafted_fixture_and_resorts_nodes() {
        let t = parse_tsplib(TRIANGLE.as_bytes()).unwrap();
        assert_eq!(t.name, "tri3");
        assert_eq!(t.dimension, 3);
        assert_eq!(t.edge_weight_type, EdgeWeightType::Euc2d);
        assert_eq!(
            t.raw_coords,
            vec![Point::new(0.0, 0.0), Point::new(3.0, 0.0), Point::new(0.0, 4.0)]
        );
    }

    #[test]
    fn keyword_colon_is_optional() {
        let text = "NAME: tri3\nDIMENSION 3\nEDGE_WEIGHT_TYPE:CEIL_2D\nNODE_COORD_SECTION\n\
                    1 0 0\n2 3 0\n3 0 4\n";
        let t = parse_tsplib(text.as_bytes()).unwrap();
        assert_eq!(t.dimension, 3);
        assert_eq!(t.edge_weight_type, EdgeWeightType::Ceil2d);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let missing = "NAME : x\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n";
        assert!(matches!(
            parse_tsplib(missing.as_bytes()),
            Err(TsplibError::MissingKeyword("DIMENSION"))
        ));

        let short = "DIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 1 1\nEOF\n";
        match parse_tsplib(short.as_bytes()) {
            Err(TsplibError::CountMismatch { expected: 3, found: 2, .. }) => {}
            other => panic!("{other:?}"),
        }

        let long = "DIMENSION : 1\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 1 1\n";
        assert!(matches!(
            parse_tsplib(long.as_bytes()),
            Err(TsplibError::CountMismatch { line: 5, expected: 1, found: 2 })
        ));

        let bad = "DIMENSION : 2\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 1 x1\n";
        match parse_tsplib(bad.as_bytes()) {
            Err(TsplibError::BadNumber { line: 5, token, .. }) => assert_eq!(token, "x1"),
            other => panic!("{other:?}"),
        }

        let dup = "DIMENSION : 2\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n1 1 1\n";
        assert!(matches!(
            parse_tsplib(dup.as_bytes()),
            Err(TsplibError::DuplicateNode { line: 5, index: 1 })
        ));
    }

    #[test]
    fn name_suffix_must_agree_with_dimension() {
        assert_eq!(name_suffix_dimension("rd400"), Some(400));
        assert_eq!(name_suffix_dimension("kroA100"), Some(100));
        assert_eq!(name_suffix_dimension("my_instance"), None);
        assert_eq!(name_suffix_dimension("a1b2"), None);
        let text = TRIANGLE.replace("tri3", "tri4");
        assert!(matches!(
            parse_tsplib(text.as_bytes()),
            Err(TsplibError::NameDimensionMismatch { line: 1, implied: 4, dimension: 3, .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let pts = [Point::new(10.0, 10.0), Point::new(20.0, 15.0), Point::new(15.0, 12.0)];
        let n = normalize_points(&pts);
        assert_eq!(n.scale, 10.0);
        assert_eq!(n.offset, Point::new(10.0, 10.0));
        let xs: Vec<f64> = n.instance.coords().iter().map(|p| p.x).collect();
        let ys: Vec<f64> = n.instance.coords().iter().map(|p| p.y).collect();
        assert_eq!(xs.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(xs.iter().cloned().fold(0.0, f64::max), 1.0);
        assert_eq!(ys.iter().cloned().fold(0.0, f64::max), 0.5);

        let single = normalize_points(&[Point::new(7.0, -3.0)]);
        assert_eq!(single.scale, 1.0);
        assert_eq!(single.instance.point(0), Point::new(0.0, 0.0));
        assert_eq!(single.denormalize_point(single.instance.point(0)), Point::new(7.0, -3.0));
    }

    #[test]
    fn denormalize_length_examples() {
        let n = normalize_points(&[Point::new(0.0, 0.0), Point::new(10.0, 0.0)]);
        assert_eq!(n.denormalize_length(4.0), 40.0);
        assert_eq!(n.denormalize_length(0.0), 0.0);
        let raw = Instance::new(vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0)]).unwrap();
        let order = [0, 1];
        let norm_len = tour_length(&n.instance, &order).unwrap();
        assert_eq!(n.denormalize_length(norm_len), tour_length(&raw, &order).unwrap());
    }
}
